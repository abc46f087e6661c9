import hashlib
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from demorph.demorpher import DemorphOutput
from demorph.evalkit import (
    PAIR_FAMILIES,
    CurvePoints,
    MorphAttackDetector,
    curve_csv,
    disagreement,
    eer_threshold,
    export_report,
    mad_classify,
    mad_metrics,
    parse_curve_csv,
    restoration_accuracy,
    roc_det_points,
    similarity_histograms,
)
from demorph.morphops import IdentitySpec, MorphSample, default_comparator, morph, render_identity


@pytest.fixture(scope="module")
def comp():
    return default_comparator(32)


@pytest.fixture(scope="module")
def morph_set(comp):
    """Twelve morphs of identity pairs the comparator tells apart."""
    samples = []
    k = 0
    while len(samples) < 12:
        a = render_identity(IdentitySpec.from_seed(500 + 2 * k), 32)
        b = render_identity(IdentitySpec.from_seed(501 + 2 * k), 32)
        if not comp.compare(a, b).is_match:
            samples.append(MorphSample(morph(a, b, 0.5, 0.015, k), a, b, True, (2 * k, 2 * k + 1)))
        k += 1
    return samples


def bona_fide(seed):
    f = render_identity(IdentitySpec.from_seed(seed), 32)
    return MorphSample(f, f, f, False, (0, 0))


# -- restoration accuracy ---------------------------------------------------------


def test_perfect_restoration(comp, morph_set):
    outs = [(DemorphOutput(s.i1, s.i2), s) for s in morph_set]
    rep = restoration_accuracy(outs, comparator=comp)
    assert rep.acc_subject1 == rep.acc_subject2 == 1.0
    assert rep.n_samples == 12 and rep.tau == comp.tau


def test_echo_baseline_scores_zero(comp, morph_set):
    # keep only morphs the comparator matches to both parents
    echo = [s for s in morph_set if comp.compare(s.x, s.i1).is_match and comp.compare(s.x, s.i2).is_match]
    assert echo
    rep = restoration_accuracy([(DemorphOutput(s.x, s.x), s) for s in echo], comparator=comp)
    assert rep.acc_subject1 == rep.acc_subject2 == 0.0


def test_global_swap_invariance(comp, morph_set):
    rng = np.random.default_rng(0)
    outs = []
    for s in morph_set:
        # noisy partial reconstructions so some fail
        w = rng.uniform(0.3, 1.0)
        o1 = np.clip(w * s.i1 + (1 - w) * s.i2, 0, 1)
        o2 = np.clip(w * s.i2 + (1 - w) * s.i1, 0, 1)
        outs.append((DemorphOutput(o1, o2), s))
    a = restoration_accuracy(outs, comparator=comp)
    b = restoration_accuracy([(DemorphOutput(o.o2, o.o1), s) for o, s in outs], comparator=comp)
    assert (a.acc_subject1, a.acc_subject2) == (b.acc_subject1, b.acc_subject2)


def test_accuracy_is_count_over_n(comp, morph_set):
    outs = [(DemorphOutput(s.i1, s.x), s) for s in morph_set]
    rep = restoration_accuracy(outs, comparator=comp)
    assert rep.acc_subject1 == sum(r.restored1 for r in rep.records) / len(morph_set)
    assert rep.acc_subject2 == sum(r.restored2 for r in rep.records) / len(morph_set)


def test_restoration_rule_by_hand():
    """Scores fixed by a stub comparator; the rule is checked against a hand count."""

    class Stub:
        tau = 0.5

        def transform(self, X):
            # embeddings chosen so that the score matrix equals the tabled values
            return np.array([x[0, 0:3] for x in X])

    def img(vec):
        a = np.zeros((4, 4))
        a[0, 0:3] = vec
        return a

    i1, i2 = img([1, 0, 0]), img([0, 1, 0])
    cases = [
        (img([0.9, 0.1, 0]), img([0.1, 0.9, 0]), (True, True)),
        (img([0.9, 0.6, 0]), img([0.1, 0.9, 0]), (False, True)),  # O1 also matches I2
        (img([0.1, 0.9, 0]), img([0.9, 0.1, 0]), (True, True)),  # swapped pairing
        (img([0.4, 0.0, 0]), img([0.0, 0.4, 0]), (False, False)),  # below tau
    ]
    outs = [(DemorphOutput(o1, o2), MorphSample(np.zeros((4, 4)), np.clip(i1, 0, 1), np.clip(i2, 0, 1), True, (0, 1)))
            for o1, o2, _ in cases]
    rep = restoration_accuracy(outs, tau=0.5, comparator=Stub())
    assert [(r.restored1, r.restored2) for r in rep.records] == [c[2] for c in cases]
    assert rep.records[2].pairing == "swapped"
    assert rep.acc_subject1 == 0.5 and rep.acc_subject2 == 0.75


def test_restoration_rejects_bona_fide(comp):
    s = bona_fide(3)
    with pytest.raises(ValueError):
        restoration_accuracy([(DemorphOutput(s.x, s.x), s)], comparator=comp)


def test_empty_restoration(comp):
    rep = restoration_accuracy([], comparator=comp)
    assert rep.n_samples == 0 and not rep.defined and np.isnan(rep.acc_subject1)


# -- histograms -------------------------------------------------------------------


def test_histogram_mass_and_orderings(comp, morph_set):
    outs = [(DemorphOutput(s.i1, s.i2), s) for s in morph_set]
    bfs = [bona_fide(900 + k) for k in range(5)]
    outs += [(DemorphOutput(s.x, s.x), s) for s in bfs]
    h = similarity_histograms(outs, comparator=comp)
    for fam in PAIR_FAMILIES:
        assert h.counts["morph"][fam].sum() == 12
        assert h.counts["bonafide"][fam].sum() == 5
        assert h.mass_above("bonafide", fam, 0.8) == 1.0
    assert len(h.edges) == 21
    assert h.median("morph", "o1_o2") < h.median("morph", "o1_i1")
    assert h.median("morph", "o1_i1") == pytest.approx(1.0)


def test_histogram_separate_samples_argument(comp, morph_set):
    outs = [DemorphOutput(s.i2, s.i1) for s in morph_set[:3]]
    h = similarity_histograms(outs, morph_set[:3], comparator=comp, bins=5)
    assert len(h.edges) == 6
    # the pairing step undoes the swap
    assert h.median("morph", "o1_i1") == pytest.approx(1.0)


# -- MAD ----------------------------------------------------------------------------


def test_mad_hand_count():
    decisions = [(True, True)] * 3 + [(False, True)] + [(False, False)] * 4
    rep = mad_metrics(decisions, threshold=0.3)
    assert (rep.apcer, rep.bpcer, rep.acer) == (0.25, 0.0, 0.125)
    assert rep.n_attack == 4 and rep.n_bonafide == 4 and rep.threshold == 0.3


def test_mad_perfect():
    rep = mad_metrics([(True, True), (False, False)])
    assert (rep.apcer, rep.bpcer, rep.acer) == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("labels", [[True, True], [False, False]])
def test_mad_single_class(labels):
    with pytest.raises(ValueError, match="bona fide|attack"):
        mad_metrics([(True, y) for y in labels])


def test_mad_matches_confusion_counting():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 50))
        truth = rng.random(n) < 0.5
        truth[0], truth[1] = True, False
        pred = rng.random(n) < 0.5
        rep = mad_metrics(list(zip(pred, truth)))
        tp = sum(p and t for p, t in zip(pred, truth))
        fn = sum((not p) and t for p, t in zip(pred, truth))
        fp = sum(p and not t for p, t in zip(pred, truth))
        tn = sum((not p) and not t for p, t in zip(pred, truth))
        assert rep.apcer == fn / (tp + fn)
        assert rep.bpcer == fp / (fp + tn)
        assert rep.acer == (rep.apcer + rep.bpcer) / 2


def test_disagreement_of_distinct_identities(comp):
    a = render_identity(IdentitySpec.from_seed(10), 32)
    b = render_identity(IdentitySpec.from_seed(11), 32)
    d = disagreement(a, b, comp)
    assert d > 0
    assert disagreement(a, a, comp) == pytest.approx(0.0, abs=1e-12)


class _EchoNet:
    """Stands in for a trained model: returns fixed outputs."""

    def __init__(self, o1, o2):
        self.model_ = self
        self.o = (o1, o2)


def test_mad_classify_threshold_extremes(comp, monkeypatch):
    import demorph.demorpher as dm

    a = render_identity(IdentitySpec.from_seed(10), 32)
    b = render_identity(IdentitySpec.from_seed(11), 32)
    monkeypatch.setattr(dm, "demorph_direct", lambda net, x: DemorphOutput(*net.o))
    model = _EchoNet(a, b)
    flag, d = mad_classify(model, a, tau_mad=0.0, comparator=comp)
    assert flag and d == pytest.approx(disagreement(a, b, comp))
    assert mad_classify(model, a, tau_mad=d - 1e-9, comparator=comp)[0]
    # disagreement never exceeds 1 for nonnegative-score pairs, nor 2 at all
    assert not mad_classify(model, a, tau_mad=2.0, comparator=comp)[0]
    # identical outputs: disagreement 0 is flagged only below zero
    assert mad_classify(_EchoNet(a, a), a, tau_mad=np.nextafter(0.0, -1), comparator=comp)[0]
    assert not mad_classify(_EchoNet(a, a), a, tau_mad=1.0, comparator=comp)[0]


# -- curves ---------------------------------------------------------------------------


def brute_rates(scores, truth, th):
    att = [s for s, t in zip(scores, truth) if t]
    bf = [s for s, t in zip(scores, truth) if not t]
    apcer = sum(s <= th for s in att) / len(att)
    bpcer = sum(s > th for s in bf) / len(bf)
    return apcer, bpcer


@pytest.mark.parametrize("seed", range(20))
def test_curve_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 60))
    scores = np.round(rng.random(n), 2)  # ties on purpose
    truth = rng.random(n) < 0.5
    truth[0], truth[1] = True, False
    curve = roc_det_points(list(zip(scores, truth)))
    for th, a, b in curve.rows():
        assert (a, b) == brute_rates(scores, truth, th)
    assert np.all(np.diff(curve.thresholds) > 0)
    # attack iff score > threshold: raising the threshold misses more attacks
    assert np.all(np.diff(curve.apcer) >= 0)
    assert np.all(np.diff(curve.bpcer) <= 0)
    assert curve.apcer[0] == 0.0 and curve.bpcer[0] == 1.0
    assert curve.apcer[-1] == 1.0 and curve.bpcer[-1] == 0.0
    grid = roc_det_points(list(zip(scores, truth)), n_thresholds=7)
    assert len(grid.thresholds) == 8
    for th, a, b in grid.rows():
        assert (a, b) == brute_rates(scores, truth, th)


def test_auc_equals_rank_statistic():
    rng = np.random.default_rng(1)
    for _ in range(20):
        scores = np.round(rng.random(40), 1)
        truth = rng.random(40) < 0.5
        truth[0], truth[1] = True, False
        att, bf = scores[truth], scores[~truth]
        mw = np.mean([(a > b) + 0.5 * (a == b) for a in att for b in bf])
        assert roc_det_points(list(zip(scores, truth))).auc == pytest.approx(mw, abs=1e-12)


def test_separated_scores():
    d = [(0.1, False), (0.2, False), (0.8, True), (0.9, True)]
    curve = roc_det_points(d)
    assert curve.auc == 1.0
    assert any(a == 0 and b == 0 for _, a, b in curve.rows())
    th = eer_threshold(d)
    rep = mad_metrics([(s > th, t) for s, t in d], th)
    assert rep.acer == 0.0


def test_permutation_baseline():
    rng = np.random.default_rng(2)
    scores = rng.random(1000)
    truth = rng.permutation(np.arange(1000) < 500)
    assert abs(roc_det_points(list(zip(scores, truth))).auc - 0.5) <= 0.1


def test_curve_needs_both_classes():
    with pytest.raises(ValueError):
        roc_det_points([(0.1, True), (0.2, True)])
    with pytest.raises(ValueError):
        roc_det_points([])


def test_detector_estimator(comp):
    class Fixed:
        def transform(self, X):
            # odd rows disagree, even rows agree
            out = []
            for k, x in enumerate(X):
                other = render_identity(IdentitySpec.from_seed(777), 32) if k % 2 else x
                out.append(np.stack([x, other]))
            return np.stack(out)

    X = np.stack([render_identity(IdentitySpec.from_seed(s), 32) for s in range(8)])
    y = np.arange(8) % 2
    det = MorphAttackDetector(Fixed(), comp).fit(X, y)
    np.testing.assert_array_equal(det.predict(X), y)
    assert det.score(X, y) == 1.0


# -- export ---------------------------------------------------------------------------


def _fixture_curve():
    scores = [0.05, 0.1, 0.3, 0.35, 0.6, 0.7, 0.75, 0.9]
    truth = [False, False, True, False, True, False, True, True]
    return roc_det_points(list(zip(scores, truth)))


def test_curve_csv_round_trip():
    curve = roc_det_points([(float(s), bool(t)) for s, t in
                            zip(np.random.default_rng(3).random(30), np.arange(30) % 3 == 0)])
    text = curve_csv(curve)
    assert text.splitlines()[0] == "threshold,apcer,bpcer"
    back = parse_curve_csv(text, curve.auc)
    for f in ("thresholds", "apcer", "bpcer"):
        np.testing.assert_array_equal(getattr(back, f), getattr(curve, f))


def test_export_svg_parses_and_is_deterministic(tmp_path, comp, morph_set):
    rep = restoration_accuracy([(DemorphOutput(s.i1, s.x), s) for s in morph_set[:4]], comparator=comp)
    names = export_report(rep, {"mad": _fixture_curve()}, tmp_path / "a")
    export_report(rep, {"mad": _fixture_curve()}, tmp_path / "b")
    assert names == ["mad_curve.csv", "mad_det.svg", "mad_roc.svg", "restoration.csv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    for n in ("mad_det.svg", "mad_roc.svg"):
        root = ET.parse(tmp_path / "a" / n).getroot()
        assert root.get("viewBox") == "0 0 800 600"
        ns = "{http://www.w3.org/2000/svg}"
        assert root.findall(f"{ns}polyline")
        assert any(t.text for t in root.iter(f"{ns}text"))
    header = (tmp_path / "a" / "restoration.csv").read_text().splitlines()[0]
    assert header == "sample_id,score_o1_i1,score_o1_i2,score_o2_i1,score_o2_i2,pairing,restored1,restored2"


GOLDEN = {
    "mad_curve.csv": "c6d1e340c53ac1f51f4889cba6286fbe0ef0f40a1a46e9ee69b8eb6fc1e2caa4",
    "mad_det.svg": "334396b7d2b66ac5d70aefc4daafdaece1b2683bdfb4a9b7201eee3120f46568",
    "mad_roc.svg": "b9eaab19773dba02340ce0fafdadcb1c3c53f8e664176cb8a0f4c18d53819c4a",
}


def test_golden_hashes(tmp_path):
    export_report(None, {"mad": _fixture_curve()}, tmp_path)
    for name, want in GOLDEN.items():
        got = hashlib.sha256((tmp_path / name).read_bytes()).hexdigest()
        assert got == want, name


def test_export_error_has_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        export_report(None, {"mad": _fixture_curve()}, os.path.join(blocker, "sub"))
