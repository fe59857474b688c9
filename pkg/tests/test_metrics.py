"""Tests for accuracy matrices, transfer metrics, and their CSV format.

The fixture matrices under tests/fixtures/ are frozen eight-task reference
runs with known backward-transfer arithmetic; the expected numbers below were
computed by hand from the final column and diagonal of each table.
"""

import numpy as np
import pytest
from pathlib import Path

from oprlab.metrics import (
    AccuracyMatrix,
    MetricsError,
    bwt,
    evaluate_task,
    load_matrix_csv,
    matrix_to_csv,
    overall_acc,
    per_task_delta,
    save_matrix_csv,
)
from oprlab.tasks import TaskSpec, Vocab

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_matrix(name):
    return load_matrix_csv(FIXTURES / name)


# ------------------------------------------------------------------ fixtures


class TestReferenceMatrices:
    """Frozen oracles over the shipped reference tables."""

    def test_sequential_bwt(self):
        # final minus diagonal sums to -79.16 over seven retained tasks
        m = fixture_matrix("ref_sequential.csv")
        assert bwt(m) == pytest.approx(-11.31, abs=0.005)

    def test_sequential_overall_acc(self):
        # final column sums to 461.42 over eight tasks
        m = fixture_matrix("ref_sequential.csv")
        assert overall_acc(m) == pytest.approx(57.68, abs=0.005)

    def test_random_replay_bwt(self):
        m = fixture_matrix("ref_random_replay.csv")
        assert bwt(m) == pytest.approx(-3.73, abs=0.005)

    def test_selected_replay_bwt(self):
        m = fixture_matrix("ref_rule_selected_replay.csv")
        assert bwt(m) == pytest.approx(-2.97, abs=0.005)

    def test_forgetting_magnitude_ordering(self):
        """No replay forgets most; random replay helps; selection helps more."""
        seq = abs(bwt(fixture_matrix("ref_sequential.csv")))
        random_replay = abs(bwt(fixture_matrix("ref_random_replay.csv")))
        rule = abs(bwt(fixture_matrix("ref_rule_selected_replay.csv")))
        conf = abs(bwt(fixture_matrix("ref_confidence_selected_replay.csv")))
        assert seq > random_replay > rule > conf

    def test_all_reference_runs_forget(self):
        for name in ("ref_sequential.csv", "ref_random_replay.csv",
                     "ref_rule_selected_replay.csv",
                     "ref_confidence_selected_replay.csv", "ref_distill.csv"):
            assert bwt(fixture_matrix(name)) < 0.0

    def test_replay_beats_no_replay_on_overall_acc(self):
        seq = overall_acc(fixture_matrix("ref_sequential.csv"))
        for name in ("ref_random_replay.csv", "ref_rule_selected_replay.csv",
                     "ref_confidence_selected_replay.csv"):
            assert overall_acc(fixture_matrix(name)) > seq

    def test_fixture_shape_is_lower_triangular(self):
        m = fixture_matrix("ref_sequential.csv")
        assert m.n_tasks == m.n_stages == 8
        for i in range(8):
            for j in range(8):
                assert np.isnan(m.values[i, j]) == (j < i)


# ------------------------------------------------------------------ matrix


class TestAccuracyMatrix:
    def test_empty_is_all_nan_and_square_by_default(self):
        m = AccuracyMatrix.empty(["a", "b", "c"])
        assert m.values.shape == (3, 3)
        assert np.isnan(m.values).all()

    def test_empty_with_explicit_stage_count(self):
        m = AccuracyMatrix.empty(["a", "b", "c"], n_stages=1)
        assert m.values.shape == (3, 1)

    def test_set_writes_one_cell(self):
        m = AccuracyMatrix.empty(["a", "b"])
        m.set(1, 0, 62.5)
        assert m.values[1, 0] == 62.5
        assert np.isnan(m.values[0, 0])

    def test_set_rejects_out_of_range(self):
        m = AccuracyMatrix.empty(["a"])
        with pytest.raises(MetricsError):
            m.set(0, 0, 100.5)
        with pytest.raises(MetricsError):
            m.set(0, 0, -0.1)

    def test_label_row_count_mismatch(self):
        with pytest.raises(MetricsError):
            AccuracyMatrix(["a", "b"], np.zeros((3, 3)))

    def test_final_column_requires_complete_last_stage(self):
        m = AccuracyMatrix.empty(["a", "b"])
        m.set(0, 1, 50.0)
        with pytest.raises(MetricsError):
            m.final_column()


class TestBwt:
    def test_two_task_arithmetic(self):
        m = AccuracyMatrix(["a", "b"], np.array([[80.0, 60.0], [np.nan, 90.0]]))
        assert bwt(m) == pytest.approx(-20.0)
        assert overall_acc(m) == pytest.approx(75.0)

    def test_none_for_single_task(self):
        m = AccuracyMatrix(["only"], np.array([[88.0]]))
        assert bwt(m) is None

    def test_none_for_single_checkpoint(self):
        # jointly trained runs evaluate once, so no diagonal exists
        m = AccuracyMatrix(["a", "b", "c"], np.array([[70.0], [80.0], [90.0]]))
        assert bwt(m) is None
        assert overall_acc(m) == pytest.approx(80.0)

    def test_incomplete_diagonal_raises(self):
        m = AccuracyMatrix.empty(["a", "b", "c"])
        for i in range(3):
            m.set(i, 2, 50.0)
        m.set(0, 0, 60.0)  # stage-1 diagonal entry for task b missing
        with pytest.raises(MetricsError):
            bwt(m)

    def test_zero_when_nothing_forgotten(self):
        vals = np.full((3, 3), np.nan)
        for j in range(3):
            for i in range(j + 1):
                vals[i, j] = 77.0
        m = AccuracyMatrix(["a", "b", "c"], vals)
        assert bwt(m) == pytest.approx(0.0)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_invariant_under_task_relabeling(self, seed):
        """Renumbering tasks (and their stages) leaves both metrics fixed.

        The final stage must stay last, since the final column anchors both
        definitions, but any shuffle of the earlier tasks is a pure renaming.
        """
        rng = np.random.default_rng(seed)
        n = 6
        vals = rng.uniform(0.0, 100.0, size=(n, n))
        labels = [f"t{i}" for i in range(n)]
        m = AccuracyMatrix(labels, vals)

        perm = np.concatenate([rng.permutation(n - 1), [n - 1]])
        shuffled = AccuracyMatrix([labels[p] for p in perm],
                                  vals[np.ix_(perm, perm)])
        assert bwt(shuffled) == pytest.approx(bwt(m))
        assert overall_acc(shuffled) == pytest.approx(overall_acc(m))


class TestPerTaskDelta:
    def test_mean_delta_matches_overall_gap(self):
        rng = np.random.default_rng(7)
        labels = ["a", "b", "c", "d"]
        a = AccuracyMatrix(labels, rng.uniform(0, 100, size=(4, 4)))
        b = AccuracyMatrix(labels, rng.uniform(0, 100, size=(4, 4)))
        delta = per_task_delta(a, b)
        assert delta.shape == (4,)
        assert np.mean(delta) == pytest.approx(overall_acc(a) - overall_acc(b))

    def test_reference_delta_sign(self):
        """Random replay recovers most of what sequential training loses."""
        replay = fixture_matrix("ref_random_replay.csv")
        seq = AccuracyMatrix(replay.task_labels,
                             fixture_matrix("ref_sequential.csv").values)
        delta = per_task_delta(replay, seq)
        assert np.sum(delta > 0) >= 6  # improves nearly every retained task

    def test_label_mismatch_raises(self):
        a = AccuracyMatrix(["a", "b"], np.zeros((2, 2)))
        b = AccuracyMatrix(["a", "c"], np.zeros((2, 2)))
        with pytest.raises(MetricsError):
            per_task_delta(a, b)


# ------------------------------------------------------------------ evaluate


def _copy_task(content_len=(1, 1)):
    vocab = Vocab(18)
    spec = TaskSpec(task_id=0, kind="copy", metric="exact-match",
                    marker=vocab.marker(0), n_train=4, n_eval=4,
                    content_len=content_len, seed=0)
    return spec, vocab


class TestEvaluateTask:
    def test_all_correct_scores_100(self, monkeypatch):
        spec, vocab = _copy_task(content_len=(2, 2))
        eval_set = [((spec.marker, 14, 15), (14, 15)),
                    ((spec.marker, 16, 17), (16, 17))]
        monkeypatch.setattr("oprlab.metrics.greedy_decode",
                            lambda arch, values, prompts, max_new:
                            [p[1:] + (vocab.eos_id,) for p in prompts])
        assert evaluate_task(None, None, spec, vocab, eval_set, 4) == 100.0

    def test_half_correct_scores_50(self, monkeypatch):
        spec, vocab = _copy_task()
        eval_set = [((spec.marker, c), (c,)) for c in (14, 15, 16, 17)]
        # first two decodes echo the content, last two miss
        fake = [(14,), (15,), (14,), (14,)]
        monkeypatch.setattr("oprlab.metrics.greedy_decode",
                            lambda arch, values, prompts, max_new: fake)
        assert evaluate_task(None, None, spec, vocab, eval_set, 4) == 50.0

    def test_trailing_eos_and_pad_do_not_count_against(self, monkeypatch):
        spec, vocab = _copy_task()
        eval_set = [((spec.marker, 15), (15,))]
        monkeypatch.setattr("oprlab.metrics.greedy_decode",
                            lambda arch, values, prompts, max_new:
                            [(15, vocab.eos_id, vocab.pad_id, vocab.pad_id)])
        assert evaluate_task(None, None, spec, vocab, eval_set, 8) == 100.0

    def test_empty_eval_set_raises(self):
        spec, vocab = _copy_task()
        with pytest.raises(MetricsError):
            evaluate_task(None, None, spec, vocab, [], 4)

    def test_uniform_guessing_matches_chance_rate(self, monkeypatch):
        """Guessing one of four content tokens must land near 25 percent."""
        spec, vocab = _copy_task()
        assert len(vocab.content_tokens) == 4
        rng = np.random.default_rng(11)
        eval_set = []
        for _ in range(2000):
            c = int(rng.choice(vocab.content_tokens))
            eval_set.append(((spec.marker, c), (c,)))
        guess_rng = np.random.default_rng(13)

        def guess(arch, values, prompts, max_new):
            return [(int(guess_rng.choice(vocab.content_tokens)),)
                    for _ in prompts]

        monkeypatch.setattr("oprlab.metrics.greedy_decode", guess)
        acc = evaluate_task(None, None, spec, vocab, eval_set, 4)
        assert acc == pytest.approx(25.0, abs=3.0)


# ------------------------------------------------------------------ csv io


class TestMatrixCsv:
    def test_round_trip_preserves_values_and_nans(self, tmp_path):
        rng = np.random.default_rng(3)
        vals = rng.uniform(0, 100, size=(4, 4))
        vals[np.triu_indices(4, k=1)] = np.nan
        vals = vals.T  # NaN strictly above the diagonal, task rows below
        m = AccuracyMatrix(["w", "x", "y", "z"], vals)
        path = tmp_path / "matrix.csv"
        save_matrix_csv(path, m)
        back = load_matrix_csv(path)
        assert back.task_labels == m.task_labels
        assert np.array_equal(back.values, m.values, equal_nan=True)

    def test_header_and_blank_cells(self):
        m = AccuracyMatrix.empty(["left", "right"])
        m.set(0, 0, 12.5)
        lines = matrix_to_csv(m).splitlines()
        assert lines[0] == "stage,left,right"
        assert lines[1] == "1,12.5,"
        assert lines[2] == "2,,"

    def test_stage_rows_are_one_indexed(self):
        m = fixture_matrix("ref_sequential.csv")
        lines = matrix_to_csv(m).splitlines()
        assert [row.split(",")[0] for row in lines[1:]] == [
            str(j) for j in range(1, 9)]

    def test_rejects_foreign_csv(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("step,loss\n1,0.5\n")
        with pytest.raises(MetricsError):
            load_matrix_csv(path)

    def test_fixture_round_trip(self, tmp_path):
        m = fixture_matrix("ref_sequential.csv")
        path = tmp_path / "again.csv"
        save_matrix_csv(path, m)
        back = load_matrix_csv(path)
        assert np.array_equal(back.values, m.values, equal_nan=True)
        assert bwt(back) == pytest.approx(-11.31, abs=0.005)
