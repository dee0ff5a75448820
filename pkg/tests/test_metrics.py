import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from l2i import metrics
from l2i.errors import ShapeError, UndefinedMetricError


def brute_auprc(scores, labels):
    """Enumerate every threshold, then integrate the interpolated precision over recall."""
    scores, labels = list(scores), list(labels)
    n_pos = sum(labels)
    pts = []
    for t in sorted(set(scores), reverse=True):
        pred = [s >= t for s in scores]
        tp = sum(1 for p, y in zip(pred, labels) if p and y)
        pts.append((tp / n_pos, tp / sum(pred)))
    area, prev = 0.0, 0.0
    for r in sorted({r for r, _ in pts}):
        best = max(p for rr, p in pts if rr >= r)
        area += (r - prev) * best
        prev = r
    return area


def brute_max_f1(scores, labels):
    best = 0.0
    for i in range(1, 100):
        t = i / 100
        tp = fp = fn = 0
        for s, y in zip(scores, labels):
            if s >= t and y:
                tp += 1
            elif s >= t:
                fp += 1
            elif y:
                fn += 1
        if tp + fp + fn:
            best = max(best, 2 * tp / (2 * tp + fp + fn))
    return best


labelled = st.integers(1, 12).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.5001, 0.75, 0.9, 1.0]) | st.floats(0, 1),
             min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda sl: sum(sl[1]) > 0)


@settings(max_examples=300)
@given(labelled)
def test_auprc_matches_brute_force(case):
    scores, labels = case
    assert metrics.auprc(scores, labels) == pytest.approx(brute_auprc(scores, labels), abs=1e-12)


@settings(max_examples=300)
@given(labelled)
def test_max_micro_f1_matches_brute_force(case):
    scores, labels = case
    assert metrics.max_micro_f1(scores, labels) == pytest.approx(brute_max_f1(scores, labels),
                                                                 abs=1e-12)


def test_auprc_examples():
    assert metrics.auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert metrics.auprc([0.5] * 8, [1, 0, 0, 1, 0, 0, 0, 1]) == pytest.approx(3 / 8)
    assert metrics.auprc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(
        brute_auprc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]))
    assert metrics.auprc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_auprc_without_positives():
    with pytest.raises(UndefinedMetricError):
        metrics.auprc([0.1, 0.2], [0, 0])


def test_topk_identity_and_uniform():
    f = np.random.default_rng(0).dirichlet(np.ones(4), size=50)
    assert metrics.topk_fidelity(f, f, [1])[1] == 1.0
    uniform = np.full_like(f, 0.25)
    expected = np.mean(f.argmax(axis=1) == 0)
    assert metrics.topk_fidelity(f, uniform, [1])[1] == pytest.approx(expected)


@given(st.integers(0, 10_000))
def test_topk_monotone(seed):
    r = np.random.default_rng(seed)
    f, g = r.dirichlet(np.ones(6), size=20), r.dirichlet(np.ones(6), size=20)
    vals = metrics.topk_fidelity(f, g, range(1, 7))
    assert all(vals[k] <= vals[k + 1] for k in range(1, 6)) and vals[6] == 1.0


def test_topk_length_mismatch():
    with pytest.raises(ShapeError):
        metrics.topk_fidelity(np.ones((3, 4)), np.ones((2, 4)))


def test_multilabel_identity():
    f = np.random.default_rng(1).uniform(size=(30, 3))
    rep = metrics.multilabel_fidelity(f, f)
    assert rep.macro_auprc == 1.0 and rep.micro_auprc == 1.0 and rep.max_micro_f1 == 1.0


def test_multilabel_chance_level():
    r = np.random.default_rng(2)
    f, g = r.uniform(size=(4000, 4)), r.uniform(size=(4000, 4))
    assert metrics.multilabel_fidelity(f, g).micro_auprc == pytest.approx(0.5, abs=0.03)


def test_multilabel_crafted_case():
    f = np.array([[0.9, 0.2, 0.6], [0.1, 0.7, 0.3], [0.8, 0.8, 0.1], [0.3, 0.1, 0.95]])
    g = np.array([[0.7, 0.4, 0.2], [0.6, 0.3, 0.5], [0.2, 0.9, 0.1], [0.4, 0.2, 0.8]])
    y = (f >= 0.5).astype(int)
    rep = metrics.multilabel_fidelity(f, g)
    assert rep.macro_auprc == pytest.approx(np.mean([brute_auprc(g[:, c], y[:, c]) for c in range(3)]))
    assert rep.micro_auprc == pytest.approx(brute_auprc(g.ravel(), y.ravel()))
    assert rep.max_micro_f1 == pytest.approx(brute_max_f1(g.ravel(), y.ravel()))
    assert rep.excluded_classes == []


def test_multilabel_excludes_empty_class():
    f = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.3]])
    rep = metrics.multilabel_fidelity(f, f)
    assert rep.excluded_classes == [1] and rep.macro_auprc == 1.0


def test_max_f1_dominates_single_threshold():
    r = np.random.default_rng(3)
    s, y = r.uniform(size=50), r.integers(0, 2, 50)
    best = metrics.max_micro_f1(s, y)
    assert all(best >= metrics.micro_f1(s, y, t) for t in (0.05, 0.33, 0.5, 0.77))


def test_median_rule_and_order_invariance():
    rows = [("a", 0.4, 1), ("b", 0.1, 2), ("c", 0.3, 0), ("d", 0.9, 3)]
    assert metrics.median_report(rows, 0.1).ff_median == pytest.approx(0.35)
    assert metrics.median_report(rows[::-1], 0.1).ff_median == pytest.approx(0.35)
    assert metrics.median_report(rows[:1], 0.1).ff_median == 0.4


def test_accuracy_and_macro_auprc():
    y = np.eye(4)[[0, 1, 2, 3, 0]]
    assert metrics.accuracy(y, y) == 1.0
    assert metrics.macro_auprc(y, y) == 1.0


def test_report_rendering(tmp_path):
    rep = metrics.FidelityReport(top_k={1: 0.5, 3: 1.0}, n_samples=4)
    text = metrics.format_report(rep)
    assert "top_k.1" in text and "0.5000" in text
    metrics.write_json(rep, tmp_path / "r.json")
    assert '"1": 0.5' in (tmp_path / "r.json").read_text()
