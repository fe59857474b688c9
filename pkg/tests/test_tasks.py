"""Task stream generation, gold rules, and the edit-similarity metric."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oprlab.tasks import (DEFAULT_KIND_ORDER, StreamConfig, TaskError, TaskSpec, Vocab,
                          build_stream, generate_task_dataset, gold_for_prompt,
                          historical_pool, levenshtein, read_dataset_jsonl, rule_score,
                          strip_trailing, write_dataset_jsonl)

VOCAB = Vocab(size=26)


def spec_for(kind: str, **kw) -> TaskSpec:
    defaults = dict(task_id=0, kind=kind, metric="edit-similarity", marker=VOCAB.marker(0),
                    n_train=4, n_eval=2, content_len=(3, 4), seed=1)
    defaults.update(kw)
    return TaskSpec(**defaults)


# ------------------------------------------------------------------ vocab layout


def test_vocab_reserved_layout():
    assert (VOCAB.pad_id, VOCAB.bos_id, VOCAB.eos_id, VOCAB.sep_id) == (0, 1, 2, 3)
    assert (VOCAB.class_a, VOCAB.class_b) == (4, 5)
    assert VOCAB.content_start == 14
    assert VOCAB.content_tokens == tuple(range(14, 26))
    assert [VOCAB.marker(i) for i in range(8)] == list(range(6, 14))


def test_vocab_size_bounds_and_marker_slots():
    with pytest.raises(TaskError):
        Vocab(size=7)
    with pytest.raises(TaskError):
        Vocab(size=65)
    with pytest.raises(TaskError):
        Vocab(size=26).marker(8)


# ------------------------------------------------------------------ gold rules

CONTENT = (15, 14, 17, 15)


@pytest.mark.parametrize("kind,expected", [
    ("copy", (15, 14, 17, 15)),
    ("reverse", (15, 17, 14, 15)),
    ("sort", (14, 15, 15, 17)),
    ("successor-mod-v", (16, 15, 18, 16)),
    ("max-token", (17,)),
    ("dedup", (15, 14, 17, 15)),
])
def test_gold_rules_hand_computed(kind, expected):
    spec = spec_for(kind)
    assert gold_for_prompt(spec, VOCAB, (spec.marker, *CONTENT)) == expected


def test_gold_dedup_collapses_runs():
    spec = spec_for("dedup")
    assert gold_for_prompt(spec, VOCAB, (spec.marker, 14, 14, 15, 15, 15, 14)) == (14, 15, 14)


def test_gold_caesar_wraps_modulo_alphabet():
    spec = spec_for("caesar-shift-k", shift=3)
    # alphabet is 14..25 (12 tokens); 24 + 3 wraps to 15
    assert gold_for_prompt(spec, VOCAB, (spec.marker, 24, 14)) == (15, 17)


def test_gold_successor_wraps():
    spec = spec_for("successor-mod-v")
    assert gold_for_prompt(spec, VOCAB, (spec.marker, 25)) == (14,)


def test_gold_parity_counts_designated_token():
    spec = spec_for("parity-classify", metric="exact-match", parity_token=14)
    assert gold_for_prompt(spec, VOCAB, (spec.marker, 14, 15, 14)) == (VOCAB.class_a,)
    assert gold_for_prompt(spec, VOCAB, (spec.marker, 14, 15, 16)) == (VOCAB.class_b,)
    assert gold_for_prompt(spec, VOCAB, (spec.marker, 15, 16, 17)) == (VOCAB.class_a,)


def test_gold_rejects_malformed_prompts():
    spec = spec_for("copy")
    with pytest.raises(TaskError, match="marker"):
        gold_for_prompt(spec, VOCAB, (99, 14))
    with pytest.raises(TaskError, match="marker"):
        gold_for_prompt(spec, VOCAB, ())
    with pytest.raises(TaskError, match="alphabet"):
        gold_for_prompt(spec, VOCAB, (spec.marker, 5))  # class token is not content


# ------------------------------------------------------------------ edit metric


def test_levenshtein_fixtures():
    assert levenshtein((1, 2, 3), (1, 2, 3)) == 0
    assert levenshtein((), (1, 2)) == 2
    assert levenshtein((1, 2, 3, 4), (1, 2, 9, 4)) == 1
    # classic kitten -> sitting example mapped to ints
    k = (10, 8, 19, 19, 4, 13)
    s = (18, 8, 19, 19, 8, 13, 6)
    assert levenshtein(k, s) == 3


@given(st.lists(st.integers(0, 5), max_size=6), st.lists(st.integers(0, 5), max_size=6),
       st.lists(st.integers(0, 5), max_size=6))
@settings(max_examples=100, deadline=None)
def test_levenshtein_metric_properties(a, b, c):
    assert levenshtein(a, a) == 0
    assert levenshtein(a, b) == levenshtein(b, a)
    assert levenshtein(a, b) <= max(len(a), len(b))
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


def test_rule_score_edit_similarity_fixture():
    spec = spec_for("copy")
    prompt = (spec.marker, 14, 15, 16, 17)
    # one substitution over length 4 gives similarity 0.75
    assert rule_score(spec, VOCAB, prompt, (14, 15, 16, 18)) == pytest.approx(0.75)
    assert rule_score(spec, VOCAB, prompt, (14, 15, 16, 17)) == 1.0
    assert rule_score(spec, VOCAB, prompt, ()) == 0.0


def test_rule_score_exact_match_binary():
    spec = spec_for("max-token", metric="exact-match")
    prompt = (spec.marker, 14, 17, 15)
    assert rule_score(spec, VOCAB, prompt, (17,)) == 1.0
    assert rule_score(spec, VOCAB, prompt, (17, 17)) == 0.0
    assert rule_score(spec, VOCAB, prompt, (15,)) == 0.0


def test_rule_score_strips_trailing_eos_and_pad():
    spec = spec_for("copy")
    prompt = (spec.marker, 14, 15)
    assert rule_score(spec, VOCAB, prompt, (14, 15, VOCAB.eos_id)) == 1.0
    assert rule_score(spec, VOCAB, prompt,
                      (14, 15, VOCAB.eos_id, VOCAB.pad_id, VOCAB.pad_id)) == 1.0
    assert strip_trailing((14, VOCAB.eos_id, 15, VOCAB.eos_id), VOCAB) == (14, VOCAB.eos_id, 15)


def test_rule_score_empty_gold_and_response():
    spec = spec_for("copy")
    assert rule_score(spec, VOCAB, (spec.marker,), (VOCAB.eos_id,)) == 1.0


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_rule_score_bounded(seed):
    rng = np.random.default_rng(seed)
    spec = spec_for("reverse")
    content = tuple(int(t) for t in rng.choice(VOCAB.content_tokens, size=4))
    resp = tuple(int(t) for t in rng.choice(VOCAB.content_tokens, size=rng.integers(0, 7)))
    s = rule_score(spec, VOCAB, (spec.marker, *content), resp)
    assert 0.0 <= s <= 1.0


# ------------------------------------------------------------------ dataset generation


def test_generate_dataset_distinct_and_disjoint():
    spec = spec_for("copy", n_train=30, n_eval=10)
    ds = generate_task_dataset(spec, VOCAB)
    prompts = [p for p, _ in ds.train] + [p for p, _ in ds.eval]
    assert len(prompts) == 40
    assert len(set(prompts)) == 40
    for p, g in ds.train + ds.eval:
        assert p[0] == spec.marker
        assert g == gold_for_prompt(spec, VOCAB, p)


def test_generate_dataset_deterministic():
    spec = spec_for("sort", n_train=20, n_eval=5)
    a = generate_task_dataset(spec, VOCAB)
    b = generate_task_dataset(spec, VOCAB)
    assert a.train == b.train and a.eval == b.eval


def test_generate_dataset_space_check():
    vocab = Vocab(size=16)  # 2 content tokens
    spec = spec_for("copy", marker=vocab.marker(0), n_train=10, n_eval=2,
                    content_len=(2, 2))  # space of 4 distinct prompts
    with pytest.raises(TaskError, match="space"):
        generate_task_dataset(spec, vocab)


def test_generate_dataset_parity_yields_both_classes():
    spec = spec_for("parity-classify", metric="exact-match", parity_token=14,
                    n_train=60, n_eval=20)
    ds = generate_task_dataset(spec, VOCAB)
    golds = {g for _, g in ds.train}
    assert golds == {(VOCAB.class_a,), (VOCAB.class_b,)}


def test_caesar_without_shift_rejected():
    with pytest.raises(TaskError, match="shift"):
        generate_task_dataset(spec_for("caesar-shift-k", shift=None), VOCAB)


# ------------------------------------------------------------------ streams


def test_default_stream_kinds_and_markers():
    stream = build_stream(StreamConfig(n_tasks=8, n_train=10, n_eval=4))
    assert tuple(s.kind for s in stream.specs) == DEFAULT_KIND_ORDER
    assert [s.marker for s in stream.specs] == list(range(6, 14))
    caesar = stream.specs[7]
    assert caesar.shift not in (0, 1, None)  # distinct from successor-mod-v
    parity = stream.specs[4]
    assert parity.parity_token in stream.vocab.content_tokens


def test_stream_rejects_duplicate_kinds():
    with pytest.raises(TaskError, match="duplicate"):
        build_stream(StreamConfig(n_tasks=2, kinds=("copy", "copy"), n_train=5, n_eval=2))


def test_stream_rejects_unknown_kind():
    with pytest.raises(TaskError, match="unknown"):
        build_stream(StreamConfig(n_tasks=1, kinds=("rot13",), n_train=5, n_eval=2))


def test_stream_kind_count_mismatch():
    with pytest.raises(TaskError):
        build_stream(StreamConfig(n_tasks=3, kinds=("copy", "reverse"), n_train=5, n_eval=2))


def test_stream_hash_stable_and_sensitive():
    a = build_stream(StreamConfig(n_tasks=2, kinds=("copy", "sort"), n_train=5, n_eval=2))
    b = build_stream(StreamConfig(n_tasks=2, kinds=("copy", "sort"), n_train=5, n_eval=2))
    c = build_stream(StreamConfig(n_tasks=2, kinds=("copy", "sort"), n_train=5, n_eval=2,
                                  seed=8))
    assert a.stream_hash() == b.stream_hash()
    assert a.stream_hash() != c.stream_hash()


def test_stream_datasets_cached():
    stream = build_stream(StreamConfig(n_tasks=2, kinds=("copy", "sort"), n_train=5,
                                       n_eval=2))
    assert stream.datasets() is stream.datasets()


# ------------------------------------------------------------------ content slices


def test_default_slices_disjoint_and_cover_prefix():
    stream = build_stream(StreamConfig(n_train=10, n_eval=4))
    alphas = [s.alphabet for s in stream.specs]
    assert all(a is not None and len(a) == 6 for a in alphas)
    flat = [t for a in alphas for t in a]
    assert len(flat) == len(set(flat))
    assert sorted(flat) == list(stream.vocab.content_tokens)


def test_explicit_slice_width_matching_stride_is_default():
    a = build_stream(StreamConfig(n_train=10, n_eval=4))
    b = build_stream(StreamConfig(n_train=10, n_eval=4, slice_width=6))
    assert [s.alphabet for s in a.specs] == [s.alphabet for s in b.specs]


def test_wide_slices_overlap_neighbours_circularly():
    stream = build_stream(StreamConfig(n_train=10, n_eval=4, slice_width=9))
    alphas = [set(s.alphabet) for s in stream.specs]
    for i in range(8):
        assert len(alphas[i] & alphas[(i + 1) % 8]) == 3
    assert stream.specs[7].alphabet[-1] == stream.vocab.content_tokens[2]  # wraps


def test_slice_width_bounds():
    with pytest.raises(TaskError, match="slice_width"):
        build_stream(StreamConfig(n_train=10, n_eval=4, slice_width=1))
    with pytest.raises(TaskError, match="slice_width"):
        build_stream(StreamConfig(n_train=10, n_eval=4, slice_width=49))


def test_slices_disabled_uses_full_content_range():
    stream = build_stream(StreamConfig(n_train=10, n_eval=4, content_slices=False))
    assert all(s.alphabet is None for s in stream.specs)
    spec = stream.specs[0]
    toks = {t for p, _ in generate_task_dataset(spec, stream.vocab).train for t in p[1:]}
    assert toks <= set(stream.vocab.content_tokens)


def test_narrow_vocab_cannot_be_sliced():
    with pytest.raises(TaskError, match="slices"):
        build_stream(StreamConfig(vocab_size=26, n_train=5, n_eval=2))


def test_parity_token_lives_in_own_slice():
    stream = build_stream(StreamConfig(n_train=10, n_eval=4))
    parity = stream.specs[4]
    assert parity.parity_token in parity.alphabet


# ------------------------------------------------------------------ shared pool


def test_shared_pool_reserves_prefix_and_shrinks_slices():
    stream = build_stream(StreamConfig(n_train=10, n_eval=4,
                                       shared_tokens=8, shared_rate=0.25))
    alpha = stream.vocab.content_tokens
    for s in stream.specs:
        assert s.shared_alphabet == alpha[:8]
        assert s.shared_rate == 0.25
        assert len(s.alphabet) == 5
        assert not set(s.alphabet) & set(s.shared_alphabet)


def test_shared_pool_draws_mix_pool_and_slice():
    stream = build_stream(StreamConfig(n_train=300, n_eval=20,
                                       shared_tokens=8, shared_rate=0.5))
    spec = stream.specs[0]
    ds = generate_task_dataset(spec, stream.vocab)
    toks = [t for p, _ in ds.train for t in p[1:]]
    assert set(toks) <= set(spec.alphabet) | set(spec.shared_alphabet)
    frac = np.mean([t in spec.shared_alphabet for t in toks])
    assert 0.35 < frac < 0.65


def test_zero_shared_tokens_is_inert():
    a = build_stream(StreamConfig(n_train=10, n_eval=4))
    b = build_stream(StreamConfig(n_train=10, n_eval=4, shared_tokens=0, shared_rate=0.9))
    assert [s.alphabet for s in a.specs] == [s.alphabet for s in b.specs]
    assert all(s.shared_alphabet is None and s.shared_rate == 0.0 for s in b.specs)
    assert a.datasets()[0].train == b.datasets()[0].train


def test_shared_pool_validation():
    with pytest.raises(TaskError, match="shared_rate"):
        build_stream(StreamConfig(n_train=5, n_eval=2, shared_tokens=4, shared_rate=1.5))
    with pytest.raises(TaskError, match="shared_tokens"):
        build_stream(StreamConfig(n_train=5, n_eval=2, shared_tokens=-1))
    with pytest.raises(TaskError, match="content_slices"):
        build_stream(StreamConfig(n_train=5, n_eval=2, content_slices=False,
                                  shared_tokens=4, shared_rate=0.2))
    with pytest.raises(TaskError, match="slices"):
        # 8 tasks cannot fit in what the pool leaves behind
        build_stream(StreamConfig(n_train=5, n_eval=2, shared_tokens=40, shared_rate=0.2))


# ------------------------------------------------------------------ historical pool


def test_historical_pool_contents():
    stream = build_stream(StreamConfig(n_tasks=3, kinds=("copy", "sort", "reverse"),
                                       n_train=6, n_eval=2))
    pool = historical_pool(stream, 2)
    assert pool.task_ids == [0, 1]
    assert pool.counts() == [6, 6]
    train0 = [p for p, _ in stream.datasets()[0].train]
    assert pool.prompts[0] == train0
    assert [t for t, _ in pool.items()] == [0] * 6 + [1] * 6


def test_historical_pool_limit_and_bounds():
    stream = build_stream(StreamConfig(n_tasks=2, kinds=("copy", "sort"), n_train=6,
                                       n_eval=2))
    assert historical_pool(stream, 1, per_task_limit=3).counts() == [3]
    with pytest.raises(TaskError):
        historical_pool(stream, 0)
    with pytest.raises(TaskError):
        historical_pool(stream, 3)


# ------------------------------------------------------------------ serialization


def test_dataset_jsonl_round_trip(tmp_path):
    spec = spec_for("reverse", n_train=8, n_eval=3)
    ds = generate_task_dataset(spec, VOCAB)
    write_dataset_jsonl(tmp_path / "d.jsonl", ds)
    back = read_dataset_jsonl(tmp_path / "d.jsonl", spec)
    assert back.train == ds.train and back.eval == ds.eval


def test_dataset_jsonl_rejects_foreign_task(tmp_path):
    ds = generate_task_dataset(spec_for("copy"), VOCAB)
    write_dataset_jsonl(tmp_path / "d.jsonl", ds)
    other = spec_for("copy", task_id=1, marker=VOCAB.marker(1))
    with pytest.raises(TaskError, match="task_id"):
        read_dataset_jsonl(tmp_path / "d.jsonl", other)
