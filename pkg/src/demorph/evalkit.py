"""Evaluation protocols for de-morphing outputs.

* restoration accuracy with the exclusive-match rule,
* similarity histograms for the five input/output pair families,
* a morph attack detector built on output disagreement, with APCER, BPCER,
  ACER and threshold sweeps for ROC/DET curves,
* CSV and SVG export with byte-stable formatting.
"""

import csv
import io
import os
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image_batch
from .morphops import default_comparator

# -- restoration accuracy ------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    score_o1_i1: float
    score_o1_i2: float
    score_o2_i1: float
    score_o2_i2: float
    pairing: str
    restored1: bool
    restored2: bool


@dataclass
class RestorationReport:
    acc_subject1: float
    acc_subject2: float
    n_samples: int
    tau: float
    records: list = field(default_factory=list)

    @property
    def defined(self):
        return self.n_samples > 0


def _score_matrix(comparator, o1, o2, i1, i2):
    e = comparator.transform(np.stack([o1, o2, i1, i2]))
    return e[:2] @ e[2:].T  # rows: outputs, cols: bona fides


def restoration_accuracy(outputs, tau=None, comparator=None):
    """Exclusive-match restoration rate per subject.

    ``outputs`` is a list of ``(DemorphOutput, MorphSample)``. Outputs are
    assigned to bona fides by whichever of the two pairings has the higher
    total similarity (ties keep the direct order). Output ``k`` is restored
    when it matches its assigned bona fide and does not match the other one.
    An empty list yields ``n_samples == 0`` and NaN accuracies.
    """
    if comparator is None and outputs:
        comparator = default_comparator(outputs[0][1].x.shape[0])
    if tau is None:
        tau = comparator.tau if comparator is not None else float("nan")
    records = []
    for k, (out, sample) in enumerate(outputs):
        if not sample.is_morph:
            raise ValueError(f"sample {k} is bona fide; restoration accuracy is defined on morphs only")
        s = _score_matrix(comparator, out.o1, out.o2, sample.i1, sample.i2)
        swapped = s[0, 1] + s[1, 0] > s[0, 0] + s[1, 1]
        # a_j: output assigned to bona fide j
        a1, a2 = (1, 0) if swapped else (0, 1)
        r1 = bool(s[a1, 0] > tau and not s[a1, 1] > tau)
        r2 = bool(s[a2, 1] > tau and not s[a2, 0] > tau)
        records.append(SampleRecord(k, float(s[0, 0]), float(s[0, 1]), float(s[1, 0]), float(s[1, 1]),
                                    "swapped" if swapped else "direct", r1, r2))
    n = len(records)
    if n == 0:
        return RestorationReport(float("nan"), float("nan"), 0, float(tau), records)
    acc1 = sum(r.restored1 for r in records) / n
    acc2 = sum(r.restored2 for r in records) / n
    return RestorationReport(acc1, acc2, n, float(tau), records)


# -- similarity distributions --------------------------------------------------

PAIR_FAMILIES = ("x_o1", "x_o2", "o1_o2", "o1_i1", "o2_i2")


@dataclass
class SimilarityHistograms:
    edges: np.ndarray
    # subset ("morph" / "bonafide") -> family -> scores / counts
    scores: dict
    counts: dict

    def median(self, subset, family):
        vals = self.scores[subset][family]
        return float(np.median(vals)) if len(vals) else float("nan")

    def mass_above(self, subset, family, level):
        vals = np.asarray(self.scores[subset][family])
        return float(np.mean(vals > level)) if len(vals) else float("nan")


def similarity_histograms(outputs, samples=None, comparator=None, bins=20):
    """Score distributions for (X,O1), (X,O2), (O1,O2), (O1,I1), (O2,I2).

    ``outputs`` is either a list of ``(DemorphOutput, MorphSample)`` or a
    list of outputs with ``samples`` given separately. (Oi, Ii) uses the
    pairing that maximizes total similarity, as in restoration accuracy.
    """
    pairs = list(outputs) if samples is None else list(zip(outputs, samples))
    if comparator is None and pairs:
        comparator = default_comparator(pairs[0][1].x.shape[0])
    scores = {s: {f: [] for f in PAIR_FAMILIES} for s in ("morph", "bonafide")}
    for out, sample in pairs:
        e = comparator.transform(np.stack([sample.x, out.o1, out.o2, sample.i1, sample.i2]))
        x, o1, o2, i1, i2 = e
        if o1 @ i2 + o2 @ i1 > o1 @ i1 + o2 @ i2:
            o1, o2 = o2, o1
        fam = scores["morph" if sample.is_morph else "bonafide"]
        for name, val in zip(PAIR_FAMILIES, (x @ o1, x @ o2, o1 @ o2, o1 @ i1, o2 @ i2)):
            fam[name].append(float(val))
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = {}
    for subset, fams in scores.items():
        counts[subset] = {}
        for name, vals in fams.items():
            # scores below 0 land in the first bin, exact 1.0 in the last
            c, _ = np.histogram(np.clip(vals, 0.0, 1.0), bins=edges)
            counts[subset][name] = c
    return SimilarityHistograms(edges, scores, counts)


# -- morph attack detection ----------------------------------------------------


def disagreement(o1, o2, comparator):
    return 1.0 - float(comparator.score(o1, o2))


def mad_classify(model, x, tau_mad, comparator=None):
    """Flag ``x`` as a morph when the two outputs do not agree.

    ``model`` is a fitted :class:`~demorph.demorpher.BranchedDemorpher` or a
    raw :class:`~demorph.demorpher.BranchedUNet`. Returns
    ``(is_attack, disagreement)`` with ``disagreement = 1 - score(O1, O2)``.
    """
    from .demorpher import BranchedUNet, demorph_direct

    x = np.asarray(x, dtype=np.float64)
    comparator = comparator or default_comparator(x.shape[0])
    net = model if isinstance(model, BranchedUNet) else model.model_
    out = demorph_direct(net, x)
    d = disagreement(out.o1, out.o2, comparator)
    return d > tau_mad, d


@dataclass(frozen=True)
class MadReport:
    apcer: float
    bpcer: float
    acer: float
    threshold: float
    n_attack: int
    n_bonafide: int


def _check_classes(labels):
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        raise ValueError("no attack (morph) samples present")
    if labels.all():
        raise ValueError("no bona fide samples present")
    return labels


def mad_metrics(decisions, threshold=float("nan")):
    """Error rates from ``(is_attack, true_is_attack)`` pairs."""
    if not decisions:
        raise ValueError("no decisions given")
    pred = np.array([bool(d[0]) for d in decisions])
    truth = _check_classes([d[1] for d in decisions])
    n_att = int(truth.sum())
    n_bf = int((~truth).sum())
    apcer = int((truth & ~pred).sum()) / n_att
    bpcer = int((~truth & pred).sum()) / n_bf
    return MadReport(apcer, bpcer, (apcer + bpcer) / 2, float(threshold), n_att, n_bf)


@dataclass
class CurvePoints:
    thresholds: np.ndarray
    apcer: np.ndarray
    bpcer: np.ndarray
    auc: float

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.apcer.tolist(), self.bpcer.tolist()))

    def roc(self):
        """(false positive rate, true positive rate) = (BPCER, 1 - APCER)."""
        return self.bpcer, 1.0 - self.apcer


def _rates(scores, truth, thresholds):
    # attack iff score > threshold
    att = np.sort(scores[truth])
    bf = np.sort(scores[~truth])
    apcer = np.searchsorted(att, thresholds, side="right") / len(att)
    bpcer = (len(bf) - np.searchsorted(bf, thresholds, side="right")) / len(bf)
    return apcer, bpcer


def _full_sweep(scores):
    lo = np.nextafter(scores.min(), -np.inf)
    return np.concatenate([[lo], np.unique(scores)])


def _auc(scores, truth):
    apcer, bpcer = _rates(scores, truth, _full_sweep(scores))
    fpr, tpr = bpcer[::-1], (1.0 - apcer)[::-1]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_det_points(disagreements, n_thresholds=None):
    """Threshold sweep over the observed disagreement range.

    ``disagreements`` holds ``(score, true_is_attack)`` pairs. With
    ``n_thresholds=None`` every distinct observed score is a threshold;
    otherwise an even grid of that many points spans the observed range. A
    point just below the minimum (everything flagged) always leads. Along the
    increasing thresholds APCER is nondecreasing and BPCER nonincreasing. The
    AUC is the trapezoid area under ROC taken over every distinct score.
    """
    if not disagreements:
        raise ValueError("no scores given")
    scores = np.array([float(d[0]) for d in disagreements])
    truth = _check_classes([d[1] for d in disagreements])
    if n_thresholds is None:
        th = _full_sweep(scores)
    else:
        if n_thresholds < 2:
            raise ValueError("n_thresholds must be at least 2")
        grid = np.linspace(scores.min(), scores.max(), n_thresholds)
        th = np.concatenate([[np.nextafter(scores.min(), -np.inf)], grid])
    apcer, bpcer = _rates(scores, truth, th)
    return CurvePoints(th, apcer, bpcer, _auc(scores, truth))


def eer_threshold(disagreements):
    """Observed threshold where APCER and BPCER are closest (no interpolation)."""
    curve = roc_det_points(disagreements)
    gap = np.abs(curve.apcer - curve.bpcer)
    worst = np.maximum(curve.apcer, curve.bpcer)
    k = np.lexsort((worst, gap))[0]
    return float(curve.thresholds[k])


class MorphAttackDetector(ClassifierMixin, BaseEstimator):
    """Disagreement-based morph detector on top of a fitted de-morpher.

    ``fit(X, y)`` places the threshold at the equal-error point of the
    calibration images ``X`` (labels ``y``: 1 = morph). ``predict`` returns
    1 for images whose two outputs disagree by more than the threshold.
    """

    def __init__(self, demorpher=None, comparator=None, threshold=None):
        self.demorpher = demorpher
        self.comparator = comparator
        self.threshold = threshold

    def _comparator(self, size):
        return self.comparator if self.comparator is not None else default_comparator(size)

    def decision_function(self, X):
        X = check_image_batch(X)
        comp = self._comparator(X.shape[1])
        out = self.demorpher.transform(X)
        e1, e2 = comp.transform(out[:, 0]), comp.transform(out[:, 1])
        return 1.0 - np.einsum("ij,ij->i", e1, e2)

    def fit(self, X, y):
        y = np.asarray(y).astype(bool)
        d = self.decision_function(X)
        if self.threshold is None:
            self.threshold_ = eer_threshold(list(zip(d, y)))
        else:
            self.threshold_ = float(self.threshold)
        self.classes_ = np.array([0, 1])
        return self

    def predict(self, X):
        check_is_fitted(self, "threshold_")
        return (self.decision_function(X) > self.threshold_).astype(int)


# -- export --------------------------------------------------------------------

_FMT = "{:.10g}"


def _num(v):
    return _FMT.format(float(v))


def curve_csv(curve):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "apcer", "bpcer"])
    for th, a, b in curve.rows():
        w.writerow([repr(th), repr(a), repr(b)])
    return buf.getvalue()


def parse_curve_csv(text, auc=float("nan")):
    rows = list(csv.DictReader(io.StringIO(text)))
    return CurvePoints(np.array([float(r["threshold"]) for r in rows]),
                       np.array([float(r["apcer"]) for r in rows]),
                       np.array([float(r["bpcer"]) for r in rows]), auc)


def restoration_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "score_o1_i1", "score_o1_i2", "score_o2_i1", "score_o2_i2",
                "pairing", "restored1", "restored2"])
    for r in report.records:
        w.writerow([r.sample_id, _num(r.score_o1_i1), _num(r.score_o1_i2), _num(r.score_o2_i1),
                    _num(r.score_o2_i2), r.pairing, int(r.restored1), int(r.restored2)])
    return buf.getvalue()


SVG_W, SVG_H = 800, 600
_MARGIN = (70, 30, 40, 60)  # left, right, top, bottom
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def svg_line_plot(series, title, xlabel, ylabel, xlim=None, ylim=(0.0, 1.0)):
    """Standalone SVG with one polyline per ``(label, xs, ys)`` series."""
    left, right, top, bottom = _MARGIN
    pw, ph = SVG_W - left - right, SVG_H - top - bottom
    xs_all = np.concatenate([np.asarray(s[1], dtype=float) for s in series]) if series else np.zeros(1)
    if xlim is None:
        xlim = (float(xs_all.min()), float(xs_all.max()))
    x0, x1 = xlim
    if x1 <= x0:
        x1 = x0 + 1.0
    y0, y1 = ylim

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" '
           f'viewBox="0 0 {SVG_W} {SVG_H}">',
           f'<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{SVG_W / 2:.1f}" y="{top - 12}" text-anchor="middle" font-size="16">{escape(title)}</text>',
           f'<text x="{SVG_W / 2:.1f}" y="{SVG_H - 15}" text-anchor="middle" font-size="14">{escape(xlabel)}</text>',
           f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="14" '
           f'transform="rotate(-90 18 {top + ph / 2:.1f})">{escape(ylabel)}</text>']
    for k in range(6):
        fx = x0 + (x1 - x0) * k / 5
        fy = y0 + (y1 - y0) * k / 5
        out.append(f'<text x="{px(fx):.1f}" y="{top + ph + 18}" text-anchor="middle" font-size="11">{fx:.2f}</text>')
        out.append(f'<text x="{left - 8}" y="{py(fy) + 4:.1f}" text-anchor="end" font-size="11">{fy:.2f}</text>')
    for idx, (label, xs, ys) in enumerate(series):
        color = _COLORS[idx % len(_COLORS)]
        pts = " ".join(f"{px(float(a)):.2f},{py(float(b)):.2f}" for a, b in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 20 + 18 * idx
        out.append(f'<line x1="{left + pw - 150}" y1="{ly}" x2="{left + pw - 125}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 118}" y="{ly + 4}" font-size="12">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_svgs(name, curve):
    """DET-style rates-vs-threshold plot and the ROC plot for one curve."""
    det = svg_line_plot([("APCER", curve.thresholds, curve.apcer), ("BPCER", curve.thresholds, curve.bpcer)],
                        f"{name}: error rates vs threshold", "disagreement threshold", "error rate")
    fpr, tpr = curve.roc()
    order = np.argsort(fpr, kind="stable")
    roc = svg_line_plot([(f"ROC (AUC {curve.auc:.3f})", fpr[order], tpr[order]), ("chance", [0, 1], [0, 1])],
                        f"{name}: ROC", "BPCER (bona fide flagged)", "1 - APCER (morph caught)", xlim=(0.0, 1.0))
    return {f"{name}_det.svg": det, f"{name}_roc.svg": roc}


def histogram_csv(hists):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subset", "family", "bin_low", "bin_high", "count"])
    for subset in ("morph", "bonafide"):
        for fam in PAIR_FAMILIES:
            for k, c in enumerate(hists.counts[subset][fam]):
                w.writerow([subset, fam, _num(hists.edges[k]), _num(hists.edges[k + 1]), int(c)])
    return buf.getvalue()


def export_report(report, curves, path, hists=None):
    """Write CSV and SVG files under directory ``path``; returns the file names.

    ``report`` is a :class:`RestorationReport` (or None), ``curves`` a
    ``name -> CurvePoints`` mapping.
    """
    files = {}
    if report is not None:
        files["restoration.csv"] = restoration_csv(report)
    for name in sorted(curves):
        files[f"{name}_curve.csv"] = curve_csv(curves[name])
        files.update(curve_svgs(name, curves[name]))
    if hists is not None:
        files["similarity_hist.csv"] = histogram_csv(hists)
    try:
        os.makedirs(path, exist_ok=True)
        for fname in sorted(files):
            with open(os.path.join(path, fname), "w", encoding="utf-8", newline="") as fh:
                fh.write(files[fname])
    except OSError as exc:
        raise OSError(f"cannot write report under {path}: {exc}") from exc
    return sorted(files)
