"""Synthetic identities, the morph operator, dataset construction and a local comparator.

Faces are drawn in normalized coordinates ``(u, v)`` in ``[-1, 1]^2`` with ``v``
pointing down, supersampled and box-filtered for anti-aliasing.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigurationError, check_image, check_image_batch, check_same_shape

logger = logging.getLogger(__name__)

SUPPORTED_SIZES = (16, 32, 64)
SUPERSAMPLE = 4

# (low, high) for every procedural face parameter
PARAM_RANGES = {
    "face_w": (0.68, 0.70),
    "face_h": (0.84, 0.86),
    "eye_spacing": (0.27, 0.29),
    "eye_size": (0.085, 0.095),
    "brow_angle": (-0.05, 0.05),
    "mouth_curve": (-0.02, 0.02),
    "mouth_width": (0.24, 0.26),
    "nose_length": (0.19, 0.21),
    "skin_tone": (0.59, 0.61),
    "hair_height": (0.31, 0.33),
}

# Skin marks (moles, freckle patches, scars): cone-shaped intensity bumps that
# carry most of the identity signal. Centres are drawn inside the face oval.
N_MARKS = 10
MARK_RADIUS = (0.11, 0.13)
MARK_DEPTH = (0.20, 0.24)

# Re-capture nuisance for ``variation`` renders: shift (normalized units),
# brightness offset and mouth-curvature jitter.
NUISANCE_SHIFT = 0.01
NUISANCE_GAIN = 0.02
NUISANCE_MOUTH = 0.01

# Pixels touched by the mouth stroke, in normalized coordinates (u0, v0, u1, v1).
MOUTH_BOX = (-0.42, 0.23, 0.42, 0.67)

BACKGROUND = 0.88
HAIR = 0.12
SCLERA = 0.96
PUPIL = 0.06
BROW = 0.18
MOUTH = 0.22
EYE_V = -0.12
MOUTH_V = 0.45
NOSE_TOP = -0.08
FACE_CV = 0.05


@dataclass(frozen=True)
class IdentitySpec:
    """Parameters of one procedural face. ``seed`` only records provenance."""

    seed: int
    face_w: float
    face_h: float
    eye_spacing: float
    eye_size: float
    brow_angle: float
    mouth_curve: float
    mouth_width: float
    nose_length: float
    skin_tone: float
    hair_height: float
    # (u, v, radius, signed depth) per mark
    marks: tuple = ()

    @classmethod
    def from_seed(cls, seed):
        rng = np.random.default_rng([int(seed), 0x1D])
        values = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES.items()}
        return cls(seed=int(seed), marks=_draw_marks(rng), **values)

    def params(self):
        return {k: getattr(self, k) for k in PARAM_RANGES}

    def clamped(self):
        """Return a copy with every parameter inside its documented range."""
        changes = {}
        for k, (lo, hi) in PARAM_RANGES.items():
            v = getattr(self, k)
            if not lo <= v <= hi:
                logger.warning("identity %d: %s=%.4f clamped to [%.3f, %.3f]", self.seed, k, v, lo, hi)
                changes[k] = min(max(v, lo), hi)
        return dataclasses.replace(self, **changes) if changes else self


def _draw_marks(rng):
    marks = []
    while len(marks) < N_MARKS:
        u, v = rng.uniform(-0.55, 0.55), rng.uniform(-0.45, 0.75)
        if (u / 0.6) ** 2 + ((v - 0.05) / 0.8) ** 2 > 0.8:
            continue
        r = rng.uniform(*MARK_RADIUS)
        d = rng.choice([-1.0, 1.0]) * rng.uniform(*MARK_DEPTH)
        marks.append((float(u), float(v), float(r), float(d)))
    return tuple(marks)


def _grid(size):
    n = size * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v, 2.0 / n


def _coverage(sdist, px):
    # signed distance (negative inside) to a soft one-subpixel edge
    return np.clip(0.5 - sdist / px, 0.0, 1.0)


def _ellipse_sd(u, v, cu, cv, au, av):
    # approximate signed distance, exact for circles
    r = np.sqrt(((u - cu) / au) ** 2 + ((v - cv) / av) ** 2)
    return (r - 1.0) * min(au, av)


def _segment_sd(u, v, p0, p1, half_width):
    pu, pv = u - p0[0], v - p0[1]
    du, dv = p1[0] - p0[0], p1[1] - p0[1]
    h = np.clip((pu * du + pv * dv) / (du * du + dv * dv), 0.0, 1.0)
    return np.hypot(pu - h * du, pv - h * dv) - half_width


def _paint(canvas, alpha, value):
    canvas *= 1.0 - alpha
    canvas += alpha * value


def render_identity(spec, size=32, variation=None):
    """Render ``spec`` as a (size, size) grayscale image in [0, 1].

    ``variation`` seeds a small nuisance change (sub-pixel shift, brightness,
    expression) standing in for a second capture of the same person; ``None``
    gives the canonical rendering.
    """
    if size not in SUPPORTED_SIZES:
        raise ConfigurationError(f"size must be one of {SUPPORTED_SIZES}, got {size}")
    spec = spec.clamped()
    p = spec.params()
    shift_u = shift_v = gain = 0.0
    if variation is not None:
        rng = np.random.default_rng([int(spec.seed), int(variation), 0x5A])
        shift_u, shift_v = rng.uniform(-NUISANCE_SHIFT, NUISANCE_SHIFT, size=2)
        gain = rng.uniform(-NUISANCE_GAIN, NUISANCE_GAIN)
        lo, hi = PARAM_RANGES["mouth_curve"]
        p["mouth_curve"] = float(np.clip(p["mouth_curve"] + rng.uniform(-NUISANCE_MOUTH, NUISANCE_MOUTH), lo, hi))
    u, v, px = _grid(size)
    u = u - shift_u
    v = v - shift_v
    img = np.full(u.shape, BACKGROUND)
    fw, fh = p["face_w"], p["face_h"]
    # hair: slightly larger oval, cut at the hair line
    hair_line = FACE_CV - fh + p["hair_height"]
    hair = _coverage(_ellipse_sd(u, v, 0.0, FACE_CV, fw + 0.07, fh + 0.07), px)
    hair *= _coverage(v - hair_line, px)
    _paint(img, hair, HAIR)
    skin = _coverage(_ellipse_sd(u, v, 0.0, FACE_CV, fw, fh), px)
    skin *= _coverage(hair_line - v, px)
    _paint(img, skin, p["skin_tone"])
    es = p["eye_size"]
    for sgn in (-1.0, 1.0):
        cu = sgn * p["eye_spacing"]
        _paint(img, _coverage(_ellipse_sd(u, v, cu, EYE_V, es * 1.4, es), px), SCLERA)
        _paint(img, _coverage(_ellipse_sd(u, v, cu, EYE_V, es * 0.55, es * 0.55), px), PUPIL)
        bv = EYE_V - es - 0.09
        half = 0.11
        dv = np.tan(p["brow_angle"]) * half
        p0 = (cu - half, bv + sgn * dv)
        p1 = (cu + half, bv - sgn * dv)
        _paint(img, _coverage(_segment_sd(u, v, p0, p1, 0.022), px), BROW)
    nose = _coverage(_segment_sd(u, v, (0.0, NOSE_TOP), (0.0, NOSE_TOP + p["nose_length"]), 0.02), px)
    _paint(img, nose, 0.65 * p["skin_tone"])
    w, c = p["mouth_width"], p["mouth_curve"]
    xs = np.linspace(-w, w, 13)
    ys = MOUTH_V - c * (1.0 - (xs / w) ** 2)
    mouth = np.zeros_like(img)
    for i in range(len(xs) - 1):
        seg = _coverage(_segment_sd(u, v, (xs[i], ys[i]), (xs[i + 1], ys[i + 1]), 0.028), px)
        np.maximum(mouth, seg, out=mouth)
    _paint(img, mouth, MOUTH)
    for cu, cv, r, d in spec.marks:
        img += d * np.clip(1.0 - np.hypot(u - cu, v - cv) / r, 0.0, 1.0)
    img = img + gain
    img = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def mouth_pixel_box(size, margin=1):
    """Pixel bounds ``(r0, r1, c0, c1)`` (half-open) containing every mouth pixel."""
    u0, v0, u1, v1 = MOUTH_BOX

    def to_px(x):
        return (x + 1.0) / 2.0 * size

    r0 = int(np.floor(to_px(v0))) - margin
    r1 = int(np.ceil(to_px(v1))) + margin
    c0 = int(np.floor(to_px(u0))) - margin
    c1 = int(np.ceil(to_px(u1))) + margin
    return max(r0, 0), min(r1, size), max(c0, 0), min(c1, size)


def _smooth_field(shape, seed, n_modes=3):
    """Low-frequency displacement field (2, H, W) with peak magnitude 1."""
    h, w = shape
    rng = np.random.default_rng([int(seed), 0xF1E1D])
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    field = np.zeros((2, h, w))
    for comp in range(2):
        for _ in range(n_modes):
            ky, kx = rng.uniform(0.25, 1.25, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.normal()
            field[comp] += amp * np.sin(2 * np.pi * (ky * yy + kx * xx) + phase)
    peak = np.sqrt((field ** 2).sum(axis=0)).max()
    return field / peak if peak > 0 else field


def _warp(img, disp):
    h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    coords = np.stack([yy + disp[0], xx + disp[1]])
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def morph(i1, i2, blend=0.5, warp_strength=0.015, seed=0):
    """Blend two faces after pulling them toward a common midpoint geometry.

    A seeded low-frequency field ``D`` with peak ``warp_strength * width``
    pixels plays the role of the correspondence between the two faces;
    ``i1`` moves ``(1 - blend) * D`` and ``i2`` moves ``-blend * D`` so both
    land on the same intermediate geometry before the pixel blend.
    """
    i1 = check_image(i1, "i1")
    i2 = check_image(i2, "i2")
    check_same_shape(i1, i2, names=("i1", "i2"))
    if not 0.0 <= blend <= 1.0:
        raise ConfigurationError(f"blend must lie in [0, 1], got {blend}")
    if warp_strength > 0:
        disp = _smooth_field(i1.shape, seed) * warp_strength * i1.shape[1]
        w1 = _warp(i1, (1.0 - blend) * disp)
        w2 = _warp(i2, -blend * disp)
    else:
        w1, w2 = i1, i2
    return np.clip(blend * w1 + (1.0 - blend) * w2, 0.0, 1.0)


# -- comparator ---------------------------------------------------------------

EMBED_GRID = 8
N_ORIENT = 8
EMBED_DIM = EMBED_GRID * EMBED_GRID + 4 * N_ORIENT
GRADIENT_WEIGHT = 0.05
# gradients are taken on a Gaussian-smoothed copy so pixel noise does not dominate
GRADIENT_SIGMA = 2.0


def raw_features(img):
    """Unnormalized 96-d descriptor: centred 8x8 thumbnail plus quadrant gradient histograms."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h % EMBED_GRID or w % EMBED_GRID:
        raise ConfigurationError(f"image sides must be multiples of {EMBED_GRID}")
    thumb = img.reshape(EMBED_GRID, h // EMBED_GRID, EMBED_GRID, w // EMBED_GRID).mean(axis=(1, 3))
    thumb = (thumb - thumb.mean()).ravel()
    gy, gx = np.gradient(ndimage.gaussian_filter(img, GRADIENT_SIGMA, mode="nearest"))
    mag = np.hypot(gx, gy)
    # unsigned orientation in [0, pi)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((ang / np.pi * N_ORIENT).astype(int), N_ORIENT - 1)
    hists = []
    for rows in (slice(0, h // 2), slice(h // 2, h)):
        for cols in (slice(0, w // 2), slice(w // 2, w)):
            hists.append(np.bincount(bins[rows, cols].ravel(), weights=mag[rows, cols].ravel(), minlength=N_ORIENT))
    hist = np.concatenate(hists)
    tn = np.linalg.norm(thumb)
    hn = np.linalg.norm(hist)
    thumb = thumb / tn if tn > 0 else thumb
    hist = hist / hn if hn > 0 else hist
    return np.concatenate([thumb, GRADIENT_WEIGHT * hist])


def _unit(vec):
    n = np.linalg.norm(vec)
    return vec / n if n > 0 else np.zeros_like(vec)


class FaceComparator(TransformerMixin, BaseEstimator):
    """Handcrafted face embedding with cosine scoring.

    ``fit`` learns the population mean descriptor from gallery images so that
    scores measure identity-specific structure rather than the shared face
    layout. ``tau`` is the match threshold; see :meth:`calibrate`.
    """

    def __init__(self, tau=0.5):
        self.tau = tau

    def fit(self, X, y=None):
        X = check_image_batch(X)
        feats = np.stack([raw_features(img) for img in X])
        self.mean_ = feats.mean(axis=0)
        self.n_features_in_ = EMBED_DIM
        return self

    def embed(self, img):
        check_is_fitted(self, "mean_")
        img = np.asarray(img, dtype=np.float64)
        if not np.any(img):
            return np.zeros(EMBED_DIM)
        return _unit(raw_features(img) - self.mean_)

    def transform(self, X):
        X = check_image_batch(X)
        return np.stack([self.embed(img) for img in X])

    def score(self, a, b):
        """Cosine similarity in [-1, 1]; 0 when either embedding is the zero vector."""
        return float(np.clip(self.embed(a) @ self.embed(b), -1.0, 1.0))

    def compare(self, a, b):
        return ComparatorScore(self.score(a, b), self.tau)

    def calibrate(self, impostor_scores, fmr=0.05):
        """Set ``tau`` so that a fraction ``fmr`` of impostor scores exceed it."""
        scores = np.sort(np.asarray(impostor_scores, dtype=np.float64))
        self.tau = float(np.quantile(scores, 1.0 - fmr))
        return self.tau


@dataclass(frozen=True)
class ComparatorScore:
    score: float
    tau: float

    @property
    def is_match(self):
        return self.score > self.tau


def is_match(s):
    return s.is_match


def identity_seeds(n, base):
    return [base + i for i in range(n)]


@lru_cache(maxsize=None)
def default_comparator(size):
    """Comparator fitted on 256 reference identities and calibrated at 5% FMR.

    Reference and calibration identities use seed ranges disjoint from the
    dataset generator, so the comparator never sees evaluation identities.
    """
    ref = [render_identity(IdentitySpec.from_seed(s), size) for s in identity_seeds(256, 1_000_000)]
    comp = FaceComparator().fit(ref)
    comp.calibrate(impostor_scores(comp, size, n_pairs=1000))
    return comp


def impostor_scores(comp, size, n_pairs=1000, seed=7, base=2_000_000):
    """Scores of ``n_pairs`` distinct-identity pairs drawn from a calibration population."""
    rng = np.random.default_rng(seed)
    n_ids = 200
    imgs = [render_identity(IdentitySpec.from_seed(s), size) for s in identity_seeds(n_ids, base)]
    emb = np.stack([comp.embed(im) for im in imgs])
    out = []
    seen = set()
    while len(out) < n_pairs:
        a, b = sorted(rng.choice(n_ids, size=2, replace=False).tolist())
        if (a, b) in seen:
            continue
        seen.add((a, b))
        out.append(float(emb[a] @ emb[b]))
    return np.array(out)


def genuine_scores(comp, size, n_ids=200, base=2_000_000):
    """Scores between two nuisance re-renders of the same identity."""
    out = []
    for s in identity_seeds(n_ids, base):
        spec = IdentitySpec.from_seed(s)
        out.append(comp.score(render_identity(spec, size, variation=1), render_identity(spec, size, variation=2)))
    return np.array(out)


# -- dataset ------------------------------------------------------------------


@dataclass
class MorphSample:
    x: np.ndarray
    i1: np.ndarray
    i2: np.ndarray
    is_morph: bool
    ids: tuple

    def __post_init__(self):
        for name in ("x", "i1", "i2"):
            arr = getattr(self, name)
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} outside [0, 1]")
        if not self.is_morph and not (np.array_equal(self.x, self.i1) and np.array_equal(self.x, self.i2)):
            raise ValueError("bona fide samples need x == i1 == i2")


@dataclass
class DatasetManifest:
    train: list
    test: list
    seed: int
    size: int
    n_ids: int
    identities: list = field(default_factory=list)

    @property
    def counts(self):
        return {
            "train_morph": sum(s.is_morph for s in self.train),
            "train_bonafide": sum(not s.is_morph for s in self.train),
            "test_morph": sum(s.is_morph for s in self.test),
            "test_bonafide": sum(not s.is_morph for s in self.test),
        }

    def check_split(self):
        train_pairs = {frozenset(s.ids) for s in self.train if s.is_morph}
        test_pairs = {frozenset(s.ids) for s in self.test if s.is_morph}
        if train_pairs & test_pairs:
            raise AssertionError(f"identity pairs in both splits: {sorted(map(sorted, train_pairs & test_pairs))}")

    def digest(self):
        """SHA-256 over labels, identity indices and pixel bytes."""
        h = hashlib.sha256()
        h.update(json.dumps({"seed": self.seed, "size": self.size, "n_ids": self.n_ids}).encode())
        for split in (self.train, self.test):
            h.update(b"|split|")
            for s in split:
                h.update(json.dumps([bool(s.is_morph), list(s.ids)]).encode())
                for arr in (s.x, s.i1, s.i2):
                    h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def arrays(self, split="train", morphs_only=False):
        """Stack a split into ``X`` (n, H, W) and ``Y`` (n, 2, H, W)."""
        samples = [s for s in getattr(self, split) if s.is_morph or not morphs_only]
        X = np.stack([s.x for s in samples])
        Y = np.stack([np.stack([s.i1, s.i2]) for s in samples])
        return X, Y


def _quantize(img):
    return np.round(img * 255.0) / 255.0


def make_dataset(n_ids, n_morphs, size=32, seed=0, warp_strength=0.015, blend=0.5, train_fraction=0.8):
    """Render identities, sample distinct morph pairs and split them 80/20.

    The test split also gets one bona fide sample (``X = I1 = I2``) for every
    identity that appears in a held-out morph.
    """
    if n_ids < 4:
        raise ConfigurationError(f"need at least 4 identities, got {n_ids}")
    capacity = n_ids * (n_ids - 1) // 2
    if not 1 <= n_morphs <= capacity:
        raise ConfigurationError(f"n_morphs={n_morphs} infeasible for {n_ids} identities (max {capacity})")
    rng = np.random.default_rng([int(seed), 0xDA7A])
    id_seeds = rng.integers(0, 2**31, size=n_ids).tolist()
    specs = [IdentitySpec.from_seed(s) for s in id_seeds]
    # stored at 8-bit precision so the PGM files reproduce the arrays exactly
    faces = [_quantize(render_identity(sp, size)) for sp in specs]
    all_pairs = [(a, b) for a in range(n_ids) for b in range(a + 1, n_ids)]
    chosen = rng.choice(len(all_pairs), size=n_morphs, replace=False)
    warp_seeds = rng.integers(0, 2**31, size=n_morphs)
    samples = []
    for k, idx in enumerate(chosen):
        a, b = all_pairs[idx]
        if rng.random() < 0.5:
            a, b = b, a
        x = _quantize(morph(faces[a], faces[b], blend, warp_strength, int(warp_seeds[k])))
        samples.append(MorphSample(x, faces[a], faces[b], True, (a, b)))
    n_train = int(round(train_fraction * n_morphs))
    train, test = samples[:n_train], samples[n_train:]
    held_out = sorted({i for s in test for i in s.ids})
    for i in held_out:
        f = faces[i]
        test.append(MorphSample(f, f, f, False, (i, i)))
    manifest = DatasetManifest(train, test, int(seed), size, n_ids, identities=specs)
    manifest.check_split()
    return manifest
