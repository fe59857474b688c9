"""Experiment configuration: one YAML file, validated strictly, hashed canonically."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..policy import Arch, SamplerConfig
from ..tasks import KINDS, StreamConfig
from ..training import DEFAULT_EPOCHS, DiagConfig, MethodSpec, OptimConfig
from ..util import canonical_json, sha256_bytes

SCHEMA_VERSION = 1

DEFAULT_RHO_LIST = (0.01, 0.02, 0.05, 0.10)
DEFAULT_METHODS = ({"name": "seq-sft"}, {"name": "vanilla-replay"}, {"name": "sdft"},
                   {"name": "opr-ru"}, {"name": "opr-sc"})
DEFAULT_RHO = 0.05

ENV_OUTPUT_DIR = "OPRLAB_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _section(raw: dict, name: str, allowed: dict) -> dict:
    """Pull a sub-dict, reject unknown keys, fill defaults."""
    got = raw.get(name) or {}
    if not isinstance(got, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    unknown = set(got) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}; "
                          f"allowed: {sorted(allowed)}")
    return {k: got.get(k, d) for k, d in allowed.items()}


def _positive(name, v, kind=float):
    try:
        v = kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a {kind.__name__}") from None
    if v <= 0:
        raise ConfigError(f"{name} must be positive, got {v}")
    return v


@dataclass
class ExperimentConfig:
    """Validated view over the raw config mapping; raw text kept for snapshots."""

    raw: dict
    text: str
    seeds: list[int]
    workers: int
    output_dir: str | None
    stream: dict
    model: dict
    optim: dict
    sampler: dict
    methods: list[dict]
    rho_list: list[float]
    sdft: dict
    diagnostics: dict

    # ---------------- builders

    def stream_config(self) -> StreamConfig:
        s = self.stream
        return StreamConfig(
            n_tasks=s["n_tasks"], vocab_size=s["vocab_size"],
            kinds=tuple(s["kinds"]) if s["kinds"] else None,
            n_train=s["n_train"], n_eval=s["n_eval"],
            content_len=tuple(s["content_len"]),
            content_len_overrides=tuple((k, tuple(v)) for k, v in
                                        (s["content_len_overrides"] or {}).items()),
            content_slices=s["content_slices"], slice_width=s["slice_width"],
            shared_tokens=s["shared_tokens"], shared_rate=s["shared_rate"],
            seed=s["seed"])

    def arch(self) -> Arch:
        m = self.model
        common = dict(vocab_size=self.stream["vocab_size"], context_len=m["context_len"],
                      window=m["window"], pad_id=0, bos_id=1, sep_id=3, eos_id=2)
        if m["kind"] == "tabular":
            return Arch(kind="tabular", n_features=m["n_features"], **common)
        return Arch(kind="mlp", emb_dim=m["emb_dim"], hidden_dim=m["hidden_dim"],
                    n_layers=m["n_layers"], activation=m["activation"],
                    skip_table=m["skip_table"], cosine_head=m["cosine_head"],
                    head_scale=m["head_scale"], **common)

    def optim_config(self) -> OptimConfig:
        o = self.optim
        return OptimConfig(optimizer=o["optimizer"], step_size=o["step_size"],
                           batch_size=o["batch_size"], epochs=tuple(o["epochs"]),
                           epochs_multiplier=o["epochs_multiplier"],
                           mtl_epochs=o["mtl_epochs"], weight_decay=o["weight_decay"])

    def sampler_config(self, seed: int = 0) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(temperature=s["temperature"], top_p=s["top_p"],
                             max_new_tokens=s["max_new_tokens"], seed=seed)

    def method_specs(self) -> list[MethodSpec]:
        sampler = self.sampler_config()
        specs = []
        for m in self.methods:
            name = m["name"]
            uses_replay = name in ("vanilla-replay", "opr-ru", "opr-sc", "opr-low-score")
            rho = m.get("rho")
            if rho is None:
                rho = DEFAULT_RHO if uses_replay else 0.0
            specs.append(MethodSpec(
                name=name, rho=float(rho), sampler=sampler,
                sdft_beta=float(m.get("beta", self.sdft["beta"])),
                sdft_kl_direction=m.get("kl_direction", self.sdft["kl_direction"]),
                sdft_contexts=m.get("contexts", self.sdft["contexts"])))
        tags = [s.tag for s in specs]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"duplicate method entries: {tags}")
        return specs

    def diag_config(self) -> DiagConfig:
        d = self.diagnostics
        return DiagConfig(stage_kl=d["stage_kl"], kl_prompts_per_task=d["kl_prompts_per_task"],
                          kl_mc_samples=d["kl_mc_samples"], window_interval=d["window_interval"],
                          window_prompts_per_task=d["window_prompts_per_task"],
                          window_eval_items=d["window_eval_items"])

    def config_hash(self) -> str:
        return sha256_bytes(canonical_json(self.raw).encode())

    def resolve_output_dir(self, cli_value: str | None) -> Path:
        if cli_value:
            return Path(cli_value)
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(ENV_OUTPUT_DIR, "runs"))


_TOP_KEYS = {"schema_version", "output_dir", "seeds", "workers", "stream", "model",
             "optim", "sampler", "methods", "rho_list", "sdft", "diagnostics"}


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")

    seeds = raw.get("seeds", [0, 1, 2])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError(f"seeds must be a non-empty list of integers, got {seeds!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds: {seeds}")
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError(f"workers must be a positive integer, got {workers!r}")

    stream = _section(raw, "stream", {
        "n_tasks": 8, "vocab_size": 62, "kinds": None, "n_train": 2000, "n_eval": 250,
        "content_len": [2, 5], "content_len_overrides": None, "content_slices": True,
        "slice_width": None, "shared_tokens": 0, "shared_rate": 0.0, "seed": 7})
    if stream["kinds"] is not None:
        bad = [k for k in stream["kinds"] if k not in KINDS]
        if bad:
            raise ConfigError(f"unknown task kinds {bad}; known: {sorted(KINDS)}")
    cl = stream["content_len"]
    if not (isinstance(cl, list) and len(cl) == 2 and all(isinstance(x, int) for x in cl)
            and 1 <= cl[0] <= cl[1]):
        raise ConfigError(f"stream.content_len must be [lo, hi] with 1 <= lo <= hi, got {cl!r}")

    model = _section(raw, "model", {
        "kind": "mlp", "window": 12, "context_len": 28, "emb_dim": 24, "hidden_dim": 192,
        "n_layers": 2, "n_features": 64, "activation": "tanh", "skip_table": False,
        "cosine_head": False, "head_scale": 10.0})
    if model["kind"] not in ("mlp", "tabular"):
        raise ConfigError(f"model.kind must be mlp or tabular, got {model['kind']!r}")

    optim = _section(raw, "optim", {
        "optimizer": "adam", "step_size": 2e-3, "batch_size": 64,
        "epochs": list(DEFAULT_EPOCHS), "epochs_multiplier": 1.0, "mtl_epochs": None,
        "weight_decay": 0.0})
    _positive("optim.step_size", optim["step_size"])
    if not isinstance(optim["epochs"], list) or not optim["epochs"]:
        raise ConfigError("optim.epochs must be a non-empty list")

    sampler = _section(raw, "sampler", {"temperature": 0.1, "top_p": 1.0, "max_new_tokens": 16})
    if sampler["temperature"] < 0:
        raise ConfigError("sampler.temperature must be >= 0")
    if not (0 < sampler["top_p"] <= 1):
        raise ConfigError("sampler.top_p must be in (0, 1]")

    methods = raw.get("methods") or [dict(m) for m in DEFAULT_METHODS]
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods must be a non-empty list")
    for m in methods:
        if not isinstance(m, dict) or "name" not in m:
            raise ConfigError(f"each method entry needs a name, got {m!r}")
        extra = set(m) - {"name", "rho", "beta", "kl_direction", "contexts"}
        if extra:
            raise ConfigError(f"unknown method keys {sorted(extra)} in {m['name']!r}")

    rho_list = raw.get("rho_list", list(DEFAULT_RHO_LIST))
    if not isinstance(rho_list, list):
        raise ConfigError("rho_list must be a list")
    for r in rho_list:
        if not isinstance(r, (int, float)) or not (0 < r <= 1):
            raise ConfigError(f"rho_list entries must be in (0, 1], got {r!r}")

    sdft = _section(raw, "sdft", {"beta": 1.0, "kl_direction": "reverse",
                                  "contexts": "teacher-forced"})
    diagnostics = _section(raw, "diagnostics", {
        "stage_kl": True, "kl_prompts_per_task": 24, "kl_mc_samples": 1,
        "window_interval": 0, "window_prompts_per_task": 8, "window_eval_items": 24})

    output_dir = raw.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string path")

    return ExperimentConfig(raw=raw, text=text, seeds=list(seeds), workers=workers,
                            output_dir=output_dir, stream=stream, model=model, optim=optim,
                            sampler=sampler, methods=[dict(m) for m in methods],
                            rho_list=[float(r) for r in rho_list], sdft=sdft,
                            diagnostics=diagnostics)


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())
