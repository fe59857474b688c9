"""Numerical checks of the replay theory on enumerable policies.

The chain under test, for a buffer kept by score threshold tau from the
previous policy:

  1. kept items have bounded previous-policy loss (confidence selection
     makes this an identity: -log pi(y|x) <= -|y| tau);
  2. the mean replay gradient of a smooth non-negative loss is self-bounded,
     ||g||^2 <= 2 L max-loss;
  3. that gradient is exactly the parameter gradient of the expected KL from
     the filtered distribution to the current policy;
  4. one small step along -g moves the policy by at most
     L sigma_max eta^2 max-loss in sequence KL, quadratically in eta.

Exact modes enumerate the full response space and are restricted to the
tabular backend; Monte Carlo modes work on any backend and report a
standard error.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .policy import (Arch, FisherOperator, PolicyError, SamplerConfig,
                     backward_from_dlogits, batch_sequence_logprobs, ce_loss_and_grad,
                     compose_context, context_windows, enumerate_responses,
                     logits_for_windows, sample_responses, sequence_logprob)
from .policy.sample import ENUMERATION_CAP
from .replay import ReplayBuffer
from .util import central_diff_gradient, derive_seed, log_softmax, softmax, write_jsonl


class DiagnosticsError(ValueError):
    pass


# ---------------------------------------------------------------- sequence KL

@dataclass
class KLEstimate:
    value: float
    mode: str                 # "exact" | "mc"
    stderr: float | None
    n_prompts: int

    def __post_init__(self):
        if self.mode == "exact" and self.value < -1e-12:
            raise DiagnosticsError(f"exact KL came out negative: {self.value}")


def seq_kl(arch: Arch, values_a: np.ndarray, values_b: np.ndarray, prompts, *,
           mode: str = "mc", mc_samples: int = 8, max_len: int = 8, seed: int = 0,
           cap: int = ENUMERATION_CAP) -> KLEstimate:
    """Sequence-level KL(pi_a || pi_b) averaged over prompts.

    Both policies share one stopping rule (first EOS, else exactly max_len
    tokens). The Monte Carlo estimator samples trajectories from pi_a and
    accumulates the full next-token KL at every visited context, which is
    unbiased for the sequence KL by the chain rule.
    """
    prompts = [tuple(p) for p in prompts]
    if not prompts:
        raise DiagnosticsError("seq_kl needs at least one prompt")
    if mode == "exact":
        if arch.kind != "tabular":
            raise DiagnosticsError("exact sequence KL requires the enumerable tabular backend")
        total = 0.0
        for p in prompts:
            seqs, lpa = enumerate_responses(arch, values_a, p, max_len, cap=cap)
            lpb = np.array([lp.sum() for lp in
                            batch_sequence_logprobs(arch, values_b, [(p, s) for s in seqs])])
            total += float(np.sum(np.exp(lpa) * (lpa - lpb)))
        return KLEstimate(value=total / len(prompts), mode="exact", stderr=None,
                          n_prompts=len(prompts))
    if mode != "mc":
        raise DiagnosticsError(f"unknown seq_kl mode {mode!r}")
    if mc_samples < 1:
        raise DiagnosticsError("mc_samples must be >= 1")
    cfg = SamplerConfig(temperature=1.0, top_p=1.0, max_new_tokens=max_len, seed=seed)
    pairs = []
    for i, p in enumerate(prompts):
        outs = sample_responses(arch, values_a, [p] * mc_samples, cfg,
                                seeds=[derive_seed(seed, "kl", i, k) for k in range(mc_samples)])
        pairs.extend((p, o.tokens) for o in outs)
    contexts, owner = [], []
    for k, (p, resp) in enumerate(pairs):
        base = compose_context(arch, p)
        for t in range(len(resp)):
            contexts.append(base + resp[:t])
            owner.append(k)
    windows = context_windows(arch, contexts)
    la = logits_for_windows(arch, values_a, windows)
    lb = logits_for_windows(arch, values_b, windows)
    lpa, lpb = log_softmax(la), log_softmax(lb)
    per_pos = np.sum(softmax(la) * (lpa - lpb), axis=1)
    per_traj = np.zeros(len(pairs))
    np.add.at(per_traj, np.asarray(owner), per_pos)
    value = float(per_traj.mean())
    stderr = float(per_traj.std(ddof=1) / np.sqrt(len(per_traj))) if len(per_traj) > 1 else None
    return KLEstimate(value=value, mode="mc", stderr=stderr, n_prompts=len(prompts))


# ---------------------------------------------------------------- filtered distribution

def enumerate_filtered(arch: Arch, values: np.ndarray, prompt, score_fn, tau: float,
                       max_len: int, cap: int = ENUMERATION_CAP):
    """The policy's response distribution restricted to scores >= tau, renormalized.

    score_fn(prompt, response, total_logprob) -> float. Returns (kept
    responses, their renormalized probabilities, kept mass Z).
    """
    seqs, logps = enumerate_responses(arch, values, prompt, max_len, cap=cap)
    probs = np.exp(logps)
    keep = [i for i, s in enumerate(seqs) if score_fn(prompt, s, float(logps[i])) >= tau]
    if not keep:
        raise DiagnosticsError(f"filter tau={tau} leaves empty support for prompt {prompt}")
    z = float(probs[keep].sum())
    return [seqs[i] for i in keep], probs[keep] / z, z


def confidence_score(prompt, response, total_logprob: float) -> float:
    """Length-normalized sequence confidence, the self-scoring rule."""
    return total_logprob / max(len(response), 1)


# ---------------------------------------------------------------- loss bound (selection identity)

@dataclass
class LossBoundItem:
    task_id: int
    length: int
    score: float
    loss_prev: float        # -log pi_prev(y|x), from the scores themselves when available
    ceiling: float          # -|y| tau for confidence selection, else the empirical max
    ok: bool


@dataclass
class LossBoundReport:
    mode: str               # "identity" (confidence scores) | "empirical" (rule scores)
    items: list[LossBoundItem]
    loss_ceiling: float
    violations: int


def verify_loss_bound(arch: Arch, prev_values: np.ndarray, buffer: ReplayBuffer) -> LossBoundReport:
    """Check every kept item's previous-policy loss against the selection ceiling.

    Confidence-selected buffers admit an exact identity: score >= tau implies
    -|y| score <= -|y| tau, with both sides formed by the same float product.
    Rule-selected (and gold) buffers get an empirical ceiling instead: the
    max previous-policy sequence loss over kept items, reported not asserted.
    """
    if not buffer.items:
        raise DiagnosticsError("empty buffer")
    kept = [r for r in buffer.pool if r.kept]
    identity = buffer.scorer == "self-confidence" and buffer.mode == "top"
    losses = []
    for rec in kept:
        if rec.logprobs is not None and len(rec.logprobs) == len(rec.response):
            # form the loss from the recorded per-token scores so the identity
            # check compares like against like in float arithmetic
            losses.append(-float(len(rec.response)) * float(np.mean(rec.logprobs)))
        else:
            total, _ = sequence_logprob(arch, prev_values, rec.prompt, rec.response)
            losses.append(-total)
    items = []
    violations = 0
    if identity:
        for rec, loss in zip(kept, losses):
            tau = buffer.thresholds[rec.task_id]
            ceiling = -float(len(rec.response)) * tau
            ok = loss <= ceiling
            violations += not ok
            items.append(LossBoundItem(rec.task_id, len(rec.response), rec.score, loss, ceiling, ok))
        loss_ceiling = max(i.ceiling for i in items)
        return LossBoundReport(mode="identity", items=items, loss_ceiling=loss_ceiling,
                               violations=violations)
    loss_ceiling = max(losses)
    for rec, loss in zip(kept, losses):
        items.append(LossBoundItem(rec.task_id, len(rec.response), rec.score, loss,
                                   loss_ceiling, True))
    return LossBoundReport(mode="empirical", items=items, loss_ceiling=loss_ceiling, violations=0)


# ---------------------------------------------------------------- replay gradient (self-bounding)

@dataclass
class ReplayGradientReport:
    grad: np.ndarray
    grad_sq_norm: float
    mean_loss: float
    max_loss: float
    per_item_ratio_max: float     # max ||grad l_i||^2 / (2 l_i), a lower bound on L
    violations: int               # items breaking ||grad l_i||^2 <= 2 L l_i for the given L


def replay_gradient(arch: Arch, values: np.ndarray, buffer: ReplayBuffer,
                    smoothness: float | None = None) -> ReplayGradientReport:
    """Mean buffer gradient with the self-bounding diagnostics of a smooth loss.

    Violations of ||grad l_i||^2 <= 2 L l_i are counted (never asserted): they
    flag an underestimated smoothness constant, which is itself a finding.
    """
    pairs = buffer.pairs()
    if not pairs:
        raise DiagnosticsError("empty buffer")
    loss, grad = ce_loss_and_grad(arch, values, pairs)
    per_loss, ratios = [], []
    violations = 0
    for p, r in pairs:
        li, gi = ce_loss_and_grad(arch, values, [(p, r)])
        per_loss.append(li)
        ratio = float(gi @ gi) / (2.0 * li) if li > 0 else 0.0
        ratios.append(ratio)
        if smoothness is not None and ratio > smoothness * (1 + 1e-9):
            violations += 1
    return ReplayGradientReport(grad=grad, grad_sq_norm=float(grad @ grad),
                                mean_loss=float(np.mean(per_loss)),
                                max_loss=float(np.max(per_loss)),
                                per_item_ratio_max=float(np.max(ratios)),
                                violations=violations)


# ---------------------------------------------------------------- gradient identity

@dataclass
class IdentityReport:
    rel_err: float
    left: np.ndarray       # E_q[ grad -log pi_theta(y|x) ], analytic
    right: np.ndarray      # finite-difference grad of E_x KL(q || pi_theta)
    kl_value: float


def kl_grad_identity_check(arch: Arch, values: np.ndarray, prev_values: np.ndarray,
                           prompts, score_fn, tau: float, max_len: int,
                           fd_eps: float = 1e-3) -> IdentityReport:
    """Exact-enumeration check that the filtered-replay gradient is a KL gradient.

    Left: expected loss gradient under q, the previous policy filtered at tau.
    Right: numerical gradient of theta -> mean_x KL(q(.|x) || pi_theta(.|x)).
    Relative error is the max coordinate gap over the larger gradient's max
    magnitude. Holds for any theta, not just theta = theta_prev.
    """
    if arch.kind != "tabular":
        raise DiagnosticsError("identity check requires the enumerable tabular backend")
    prompts = [tuple(p) for p in prompts]
    filtered = [enumerate_filtered(arch, prev_values, p, score_fn, tau, max_len)
                for p in prompts]
    pairs, weights, q_ent = [], [], 0.0
    for p, (seqs, q, _) in zip(prompts, filtered):
        for s, qi in zip(seqs, q):
            pairs.append((p, s))
            weights.append(float(qi) / len(prompts))
            q_ent += float(qi) * np.log(float(qi)) / len(prompts)

    contexts, targets, owner = [], [], []
    for k, (p, resp) in enumerate(pairs):
        base = compose_context(arch, p)
        for t, y in enumerate(resp):
            contexts.append(base + resp[:t])
            targets.append(y)
            owner.append(k)
    windows = context_windows(arch, contexts)
    targets = np.asarray(targets)
    owner = np.asarray(owner)
    w = np.asarray(weights)
    logits, cache = logits_for_windows(arch, values, windows, with_cache=True)
    dlogits = softmax(logits)
    dlogits[np.arange(len(targets)), targets] -= 1.0
    dlogits *= w[owner, None]
    left = backward_from_dlogits(arch, values, cache, dlogits)

    def kl_objective(theta: np.ndarray) -> float:
        lps = batch_sequence_logprobs(arch, theta, pairs)
        cross = sum(wi * float(lp.sum()) for wi, lp in zip(w, lps))
        return q_ent - cross

    right = central_diff_gradient(kl_objective, values, eps=fd_eps, order=4)
    scale = max(np.max(np.abs(left)), np.max(np.abs(right)), 1e-300)
    rel_err = float(np.max(np.abs(left - right)) / scale)
    return IdentityReport(rel_err=rel_err, left=left, right=right,
                          kl_value=kl_objective(values))


# ---------------------------------------------------------------- smoothness

@dataclass
class SmoothnessEstimate:
    value: float
    ratios: list[float]
    delta: float
    n_probes: int


def estimate_smoothness(grad_fn, x0: np.ndarray, *, n_probes: int = 8, delta: float = 1e-3,
                        seed: int = 0, extra_dirs=None) -> SmoothnessEstimate:
    """Directional probe of the gradient Lipschitz constant at x0.

    Takes the max of ||grad(x0 + delta u) - grad(x0)|| / delta over unit
    directions: n_probes random ones plus any caller-supplied extras (a pure
    quadratic recovers its curvature exactly).
    """
    if n_probes < 1:
        raise DiagnosticsError("need at least one probe direction")
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    dirs = [rng.normal(size=x0.size) for _ in range(n_probes)]
    if extra_dirs is not None:
        dirs += [np.asarray(d, dtype=np.float64) for d in extra_dirs]
    g0 = grad_fn(x0)
    ratios = []
    for d in dirs:
        nd = np.linalg.norm(d)
        if nd == 0:
            continue
        u = d / nd
        g1 = grad_fn(x0 + delta * u)
        ratios.append(float(np.linalg.norm(g1 - g0) / delta))
    return SmoothnessEstimate(value=float(np.max(ratios)), ratios=ratios,
                              delta=delta, n_probes=len(dirs))


# ---------------------------------------------------------------- Fisher spectral norm

@dataclass
class FisherEstimate:
    spectral_norm: float
    residual: float          # ||F v - sigma v|| / sigma at the returned vector
    iterations: int
    mode: str
    converged: bool


def fisher_sigma_max(arch: Arch, values: np.ndarray, prompts, *, max_len: int,
                     mode: str = "exact", mc_samples: int = 16, seed: int = 0,
                     max_iters: int = 200, tol: float = 1e-6,
                     cap: int = ENUMERATION_CAP) -> FisherEstimate:
    """Largest Fisher eigenvalue by power iteration on Fisher-vector products.

    The operator is frozen once (same sequence set every iteration), so the
    iteration converges deterministically; the reported residual is the
    relative eigen-residual at the final vector.
    """
    op = FisherOperator(arch, values, prompts, max_len=max_len, mode=mode,
                        mc_samples=mc_samples, seed=seed, cap=cap)
    rng = np.random.default_rng(derive_seed(seed, "power"))
    v = rng.normal(size=op.n_params)
    v /= np.linalg.norm(v)
    sigma, residual = 0.0, np.inf
    for it in range(1, max_iters + 1):
        fv = op.apply(v)
        nrm = float(np.linalg.norm(fv))
        if nrm < 1e-30:
            return FisherEstimate(0.0, 0.0, it, mode, True)
        sigma = float(v @ fv)
        residual = float(np.linalg.norm(fv - sigma * v) / max(abs(sigma), 1e-30))
        v = fv / nrm
        if residual < tol:
            return FisherEstimate(sigma, residual, it, mode, True)
    return FisherEstimate(sigma, residual, max_iters, mode, False)


# ---------------------------------------------------------------- one-step bound

@dataclass
class BoundPoint:
    step_size: float
    measured_kl: float
    bound: float
    satisfied: bool


@dataclass
class OneStepReport:
    points: list[BoundPoint]
    loglog_slope: float
    smoothness: float
    sigma_max: float
    loss_ceiling: float
    ceiling_mode: str
    grad_sq_norm: float
    fisher_residual: float


def one_step_bound_check(arch: Arch, prev_values: np.ndarray, buffer: ReplayBuffer,
                         hist_prompts, etas, *, max_len: int, kl_mode: str = "exact",
                         mc_samples: int = 64, seed: int = 0,
                         smoothness_probes: int = 12) -> OneStepReport:
    """Measure one replay SGD step's KL move against L sigma_max eta^2 loss-ceiling.

    Every ingredient is estimated at the pre-step parameters: the mean buffer
    gradient, a probed smoothness constant (random directions plus the step
    direction itself), the Fisher spectral norm on historical prompts, and
    the selection loss ceiling. The measured KL(after || before) should grow
    quadratically in eta and stay under the bound.
    """
    etas = [float(e) for e in etas]
    if any(e <= 0 for e in etas) or len(etas) < 2:
        raise DiagnosticsError("need at least two positive step sizes")
    pairs = buffer.pairs()
    if not pairs:
        raise DiagnosticsError("empty buffer")
    _, g = ce_loss_and_grad(arch, prev_values, pairs)
    bound_rep = verify_loss_bound(arch, prev_values, buffer)
    if bound_rep.mode == "identity" and bound_rep.violations:
        raise DiagnosticsError(f"{bound_rep.violations} selection-identity violations")
    ell_max = bound_rep.loss_ceiling
    smooth = estimate_smoothness(lambda x: ce_loss_and_grad(arch, x, pairs)[1], prev_values,
                                 n_probes=smoothness_probes, seed=derive_seed(seed, "probe"),
                                 extra_dirs=[g])
    fish = fisher_sigma_max(arch, prev_values, hist_prompts, max_len=max_len,
                            mode="exact" if kl_mode == "exact" else "mc",
                            mc_samples=mc_samples, seed=derive_seed(seed, "fisher"))
    points = []
    for eta in etas:
        stepped = prev_values - eta * g
        est = seq_kl(arch, stepped, prev_values, hist_prompts, mode=kl_mode,
                     mc_samples=mc_samples, max_len=max_len, seed=derive_seed(seed, "kl"))
        bound = smooth.value * fish.spectral_norm * eta * eta * ell_max
        points.append(BoundPoint(step_size=eta, measured_kl=est.value, bound=bound,
                                 satisfied=est.value <= bound * 1.05))
    xs = np.log([p.step_size for p in points])
    ys = np.log([max(p.measured_kl, 1e-300) for p in points])
    slope = float(np.polyfit(xs, ys, 1)[0])
    return OneStepReport(points=points, loglog_slope=slope, smoothness=smooth.value,
                         sigma_max=fish.spectral_norm, loss_ceiling=ell_max,
                         ceiling_mode=bound_rep.mode, grad_sq_norm=float(g @ g),
                         fisher_residual=fish.residual)


# ---------------------------------------------------------------- forgetting association

@dataclass
class ProbeReport:
    n_windows: int
    spearman_rho: float
    p_value: float
    pairs: list[tuple[float, float]]   # (window KL, window forgetting)


def forgetting_vs_kl_probe(diag_rows) -> ProbeReport:
    """Rank correlation between per-window policy drift and accuracy drop.

    Consumes diagnostics rows (quantity window_kl / window_forgetting matched
    on stage and step). Reports association only; no proportionality constant
    is fitted or asserted.
    """
    kl, forget = {}, {}
    for row in diag_rows:
        key = (row["stage"], row["step"])
        if row["quantity"] == "window_kl":
            kl[key] = row["value"]
        elif row["quantity"] == "window_forgetting":
            forget[key] = row["value"]
    keys = sorted(set(kl) & set(forget))
    pairs = [(kl[k], forget[k]) for k in keys]
    if len(pairs) < 3:
        raise DiagnosticsError(f"need at least 3 matched probe windows, got {len(pairs)}")
    rho, p = stats.spearmanr([a for a, _ in pairs], [b for _, b in pairs])
    return ProbeReport(n_windows=len(pairs), spearman_rho=float(rho), p_value=float(p),
                       pairs=pairs)


# ---------------------------------------------------------------- artifacts

def write_diagnostics_jsonl(path: Path | str, rows) -> None:
    out = []
    for r in rows:
        out.append({"stage": r.get("stage"), "step": r.get("step"),
                    "quantity": r["quantity"], "value": r["value"],
                    "mode": r.get("mode"), "stderr": r.get("stderr")})
    write_jsonl(path, out)


def bound_report_csv(report: OneStepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step_size", "measured_kl", "bound", "satisfied",
                "smoothness", "sigma_max", "loss_ceiling", "ceiling_mode", "loglog_slope"])
    for p in report.points:
        w.writerow([repr(p.step_size), repr(p.measured_kl), repr(p.bound), int(p.satisfied),
                    repr(report.smoothness), repr(report.sigma_max), repr(report.loss_ceiling),
                    report.ceiling_mode, repr(report.loglog_slope)])
    return buf.getvalue()
