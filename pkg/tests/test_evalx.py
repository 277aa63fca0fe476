from contextlib import nullcontext
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperdiff import evalx
from hyperdiff.hsio import LabelMap


def loop_oracle(truth, pred, n_classes):
    """Confusion matrix and metrics from explicit loops and exact fractions."""
    cm = [[0] * n_classes for _ in range(n_classes)]
    for t, p in zip(truth, pred):
        cm[t - 1][p - 1] += 1
    n = sum(map(sum, cm))
    p_o = Fraction(sum(cm[i][i] for i in range(n_classes)), n)
    accs = []
    for i in range(n_classes):
        row = sum(cm[i])
        if row:
            accs.append(Fraction(cm[i][i], row))
    aa = sum(accs) / len(accs)
    p_e = sum(Fraction(sum(cm[i]) * sum(cm[j][i] for j in range(n_classes)), n * n) for i in range(n_classes))
    kappa = (p_o - p_e) / (1 - p_e) if p_e != 1 else Fraction(int(p_o == 1))
    return cm, float(p_o), float(aa), float(kappa)


def maps_from(truth, pred):
    n = len(truth)
    return LabelMap(np.asarray(pred).reshape(1, n)), LabelMap(np.asarray(truth).reshape(1, n)), np.arange(n)


def test_hand_case():
    rep = evalx.report_from_confusion(np.array([[2, 0], [1, 1]]))
    assert (rep.oa, rep.aa, rep.kappa) == (0.75, 0.75, 0.5)
    pred, truth, idx = maps_from([1, 1, 2, 2], [1, 1, 1, 2])
    rep2 = evalx.evaluate(pred, truth, idx)
    assert rep2.confusion == [[2, 0], [1, 1]]
    assert (rep2.oa, rep2.aa, rep2.kappa) == (0.75, 0.75, 0.5)


def test_perfect_predictions():
    pred, truth, idx = maps_from([1, 2, 3, 3, 2], [1, 2, 3, 3, 2])
    rep = evalx.evaluate(pred, truth, idx)
    assert rep.oa == rep.aa == rep.kappa == 1.0


def test_matches_loop_oracle_on_random_scenarios():
    rng = np.random.default_rng(42)
    for _ in range(100):
        c = int(rng.integers(2, 8))
        n = int(rng.integers(1, 10_000))
        truth = rng.integers(1, c + 1, n)
        pred = np.where(rng.random(n) < rng.random(), truth, rng.integers(1, c + 1, n))
        p_map, t_map, idx = maps_from(truth, pred)
        with pytest.warns(UserWarning) if len(np.unique(truth)) < c else nullcontext():
            rep = evalx.evaluate(p_map, t_map, idx, n_classes=c)
        cm, oa, aa, kappa = loop_oracle(truth.tolist(), pred.tolist(), c)
        assert rep.confusion == cm and rep.n_test == n
        assert abs(rep.oa - oa) <= 1e-12 and abs(rep.aa - aa) <= 1e-12 and abs(rep.kappa - kappa) <= 1e-12


def test_random_predictions_have_zero_kappa():
    rng = np.random.default_rng(7)
    truth, pred = rng.integers(1, 5, 10_000), rng.integers(1, 5, 10_000)
    assert abs(evalx.evaluate(*maps_from(truth, pred)).kappa) < 0.05


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=60))
def test_invariants(pairs):
    truth = [t for t, _ in pairs]
    pred = [p for _, p in pairs]
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = evalx.evaluate(*maps_from(truth, pred), n_classes=4)
    assert sum(map(sum, rep.confusion)) == rep.n_test == len(pairs)
    assert rep.oa == pytest.approx(np.trace(rep.confusion) / rep.n_test)
    present = [a for a in rep.per_class_accuracy if a is not None]
    assert rep.aa == pytest.approx(np.mean(present))
    assert -1 <= rep.kappa <= 1
    diagonal = all(rep.confusion[i][j] == 0 for i in range(4) for j in range(4) if i != j)
    assert (rep.kappa == 1.0) == diagonal


def test_absent_class_warns_and_is_skipped():
    with pytest.warns(UserWarning):
        rep = evalx.report_from_confusion(np.array([[3, 1, 0], [0, 0, 0], [0, 0, 2]]))
    assert rep.per_class_accuracy[1] is None
    assert rep.aa == pytest.approx((0.75 + 1.0) / 2)


def test_errors():
    pred, truth, _ = maps_from([1, 2], [1, 2])
    with pytest.raises(ValueError):
        evalx.evaluate(pred, truth, np.array([], dtype=int))
    bad, truth, idx = maps_from([1, 2], [1, 3])
    with pytest.raises(ValueError):
        evalx.evaluate(bad, truth, idx, n_classes=2)


def test_report_json_roundtrip(tmp_path):
    rep = evalx.report_from_confusion(np.array([[5, 1], [2, 7]]))
    rep.save(tmp_path / "r.json")
    assert evalx.EvalReport.load(tmp_path / "r.json") == rep
    table = evalx.format_table(rep, {1: "a", 2: "b"})
    assert "OA(%)" in table and "kappa*100" in table


class TestRender:
    def test_exact_colours(self, tmp_path):
        pal = {0: (0, 0, 0), 1: (10, 20, 30), 2: (200, 100, 50)}
        evalx.render_map(LabelMap(np.array([[1, 2], [2, 1]])), pal, tmp_path / "m.png")
        from PIL import Image

        rgb = np.asarray(Image.open(tmp_path / "m.png").convert("RGB"))
        assert rgb.shape == (2, 2, 3)
        assert tuple(rgb[0, 0]) == (10, 20, 30) and tuple(rgb[0, 1]) == (200, 100, 50)

    def test_roundtrip_and_black_unlabeled(self, tmp_path, rng):
        lab = LabelMap(rng.integers(0, 17, (20, 15)))
        pal = evalx.default_palette(16)
        assert pal[0] == (0, 0, 0) and len(set(pal.values())) == 17
        evalx.render_map(lab, pal, tmp_path / "m.png")
        back = evalx.decode_map(tmp_path / "m.png", pal)
        assert np.array_equal(back.labels, lab.labels)
        evalx.render_map(lab, pal, tmp_path / "n.png")
        assert (tmp_path / "m.png").read_bytes() == (tmp_path / "n.png").read_bytes()

    def test_missing_palette_entry(self, tmp_path):
        with pytest.raises(KeyError):
            evalx.render_map(LabelMap(np.array([[3]])), {0: (0, 0, 0)}, tmp_path / "m.png")

    def test_palette_override(self):
        pal = evalx.default_palette(2, {2: {"name": "x", "color": [1, 2, 3]}})
        assert pal[2] == (1, 2, 3)
