"""Branched UNet de-morpher: one encoder, two decoders sharing latent and skips.

The network maps a noisy morph ``X^t`` and its step ``t`` to estimates of the
two noisy bona fides ``I1^t, I2^t``. Training minimizes the cross-road L1 loss,
which scores both output orderings and keeps the cheaper one.
"""

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint as ckpt
from . import tensorcore as tc
from ._validation import ConfigurationError, DimensionError, check_image_batch, check_pair_batch, check_same_shape
from .schedule import NoiseDraw, build_linear_schedule, q_sample, q_sample_batch

logger = logging.getLogger(__name__)

N_STAGES = 3


@dataclass
class TrainConfig:
    T: int = 300
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 16
    img_size: int = 32
    seed: int = 0
    time_embed_dim: int = 32
    base_width: int = 32
    activation: str = "silu"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # training steps are uniform on [t_min, T] ...
    t_min: int = 1
    # ... except this fraction, drawn at t = 0 (the step inference runs at)
    clean_fraction: float = 0.0

    def validate(self):
        if self.img_size % (2 ** N_STAGES):
            raise ConfigurationError(f"img_size must be divisible by {2 ** N_STAGES}, got {self.img_size}")
        if self.activation not in tc.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.time_embed_dim % 2:
            raise ConfigurationError("time_embed_dim must be even")
        if self.batch_size < 1 or self.epochs < 0 or self.base_width < 1:
            raise ConfigurationError("batch_size, epochs and base_width must be positive")
        if self.t_min not in (0, 1):
            raise ConfigurationError("t_min must be 0 or 1")
        if not 0.0 <= self.clean_fraction <= 1.0:
            raise ConfigurationError("clean_fraction must lie in [0, 1]")
        return self


def _stage_widths(w):
    # encoder output widths at 1/1, 1/2, 1/4, 1/8 resolution
    return [w, 2 * w, 4 * w, 4 * w]


def _decoder_shapes(w):
    c = _stage_widths(w)
    shapes = {}
    # up3: latent (c3) -> 1/4 res, concat skip c2; up2 -> 1/2 res, concat c1; up1 -> full res, concat c0
    plan = [("up3", c[3], c[2]), ("up2", c[2], c[1]), ("up1", c[1], c[0])]
    for name, cin, cout in plan:
        shapes[f"{name}.up"] = (cin, cout, 2, 2)
        shapes[f"{name}.bn_up.gamma"] = (cout,)
        shapes[f"{name}.bn_up.beta"] = (cout,)
        shapes[f"{name}.refine"] = (2 * cout, cout, 3, 3)
        shapes[f"{name}.bn_refine.gamma"] = (cout,)
        shapes[f"{name}.bn_refine.beta"] = (cout,)
    shapes["head.w"] = (1, c[0], 1, 1)
    shapes["head.b"] = (1,)
    return shapes


def param_shapes(cfg):
    """Ordered ``name -> shape`` for every learnable array."""
    w = cfg.base_width
    c = _stage_widths(w)
    hidden = 4 * w
    shapes = {
        "time.w": (cfg.time_embed_dim, hidden),
        "time.b": (hidden,),
    }
    enc_in = [1, c[0], c[1], c[2]]
    for i in range(4):
        shapes[f"enc{i}.conv"] = (c[i], enc_in[i], 3, 3)
        shapes[f"enc{i}.bn.gamma"] = (c[i],)
        shapes[f"enc{i}.bn.beta"] = (c[i],)
    shapes["latent.conv"] = (c[3], c[3], 3, 3)
    shapes["latent.bn.gamma"] = (c[3],)
    shapes["latent.bn.beta"] = (c[3],)
    # time projections: encoder stages and latent, then each decoder up-block
    for name, ch in [("enc0", c[0]), ("enc1", c[1]), ("enc2", c[2]), ("enc3", c[3]), ("latent", c[3])]:
        shapes[f"tproj.{name}.w"] = (hidden, ch)
        shapes[f"tproj.{name}.b"] = (ch,)
    for dec in ("dec1", "dec2"):
        for name, ch in [("up3", c[2]), ("up2", c[1]), ("up1", c[0])]:
            shapes[f"{dec}.tproj.{name}.w"] = (hidden, ch)
            shapes[f"{dec}.tproj.{name}.b"] = (ch,)
        for k, shp in _decoder_shapes(w).items():
            shapes[f"{dec}.{k}"] = shp
    return shapes


def bn_names(cfg):
    return [k[: -len(".gamma")] for k in param_shapes(cfg) if k.endswith(".gamma")]


def _fan_in(name, shape):
    if name.endswith(".up"):
        # transposed (C_in, F, 2, 2) at stride 2: one tap per input channel
        return shape[0]
    if name.endswith(".refine"):
        return shape[0] * shape[2] * shape[3]
    return shape[1] * shape[2] * shape[3]


def init_params(cfg, rng, tied_decoders=False):
    """Kaiming-normal convolutions, unit BN scale, zero BN shift and biases."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "time.w" or ".tproj." in name or name.startswith("tproj."):
            arr = rng.normal(0.0, np.sqrt(1.0 / shape[0]), size=shape)
        else:
            arr = tc.kaiming_normal(rng, shape, _fan_in(name, shape))
        params[name] = arr
    if tied_decoders:
        for name in list(params):
            if name.startswith("dec2."):
                params[name] = params["dec1." + name[len("dec2."):]].copy()
    return {k: tc.Tensor(v, requires_grad=True) for k, v in params.items()}


class BranchedUNet:
    """Parameters, batch-norm running statistics and the forward pass."""

    def __init__(self, cfg, params=None, bn_stats=None, tied_decoders=False):
        self.cfg = cfg.validate()
        if params is None:
            params = init_params(cfg, np.random.default_rng([cfg.seed, 0x1417]), tied_decoders)
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise DimensionError(f"parameter set mismatch; missing={missing[:5]} extra={extra[:5]}")
        for k, shp in expected.items():
            if params[k].shape != shp:
                raise DimensionError(f"{k}: expected shape {shp}, got {params[k].shape}")
        for k in expected:
            if k.startswith("dec1.") and expected["dec2." + k[5:]] != expected[k]:
                raise DimensionError("decoder branches must have identical shapes")
        self.params = {k: params[k] for k in expected}
        if bn_stats is None:
            bn_stats = {n: tc.RunningStats.fresh(expected[n + ".gamma"][0]) for n in bn_names(cfg)}
        self.bn_stats = bn_stats
        self._act = tc.ACTIVATIONS[cfg.activation]

    def copy(self):
        return BranchedUNet(self.cfg, dict(self.params), copy.deepcopy(self.bn_stats))

    def _bn(self, x, name, mode):
        p = self.params
        return tc.batch_norm(x, p[name + ".gamma"], p[name + ".beta"], self.bn_stats[name], mode)

    def _tproj(self, temb, name):
        p = self.params
        return tc.linear(temb, p[name + ".w"], p[name + ".b"])

    def _decode(self, dec, z, skips, temb, mode):
        p = self.params
        act = self._act
        h = z
        for name, skip in zip(("up3", "up2", "up1"), skips):
            pre = f"{dec}.{name}"
            h = tc.conv_transpose2d(h, p[pre + ".up"], stride=2, pad=0)
            h = act(self._bn(h, pre + ".bn_up", mode))
            h = tc.add_channel_bias(h, self._tproj(temb, f"{dec}.tproj.{name}"))
            h = tc.concat([h, skip], axis=1)
            h = tc.conv_transpose2d(h, p[pre + ".refine"], stride=1, pad=1)
            h = act(self._bn(h, pre + ".bn_refine", mode))
        out = tc.conv2d(h, p[f"{dec}.head.w"], stride=1, pad=0)
        return tc.add(out, tc.reshape(p[f"{dec}.head.b"], (1, 1, 1, 1)))

    def forward(self, x, t, train=False):
        """Run both branches on ``x[B, 1, H, W]`` at steps ``t`` (int or length-B array)."""
        x = tc.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.cfg.img_size, self.cfg.img_size):
            raise DimensionError(f"expected input (B, 1, {self.cfg.img_size}, {self.cfg.img_size}), got {x.shape}")
        b = x.shape[0]
        ts = np.broadcast_to(np.asarray(t), (b,))
        if np.any(ts < 0) or np.any(ts > self.cfg.T):
            raise IndexError(f"step outside [0, {self.cfg.T}]")
        mode = "train" if train else "eval"
        p = self.params
        act = self._act
        temb = tc.sinusoidal_time_embedding(ts, self.cfg.time_embed_dim)
        temb = act(tc.linear(temb, p["time.w"], p["time.b"]))
        h = x
        skips = []
        for i in range(4):
            h = tc.conv2d(h, p[f"enc{i}.conv"], stride=1 if i == 0 else 2, pad=1)
            h = act(self._bn(h, f"enc{i}.bn", mode))
            h = tc.add_channel_bias(h, self._tproj(temb, f"tproj.enc{i}"))
            skips.append(h)
        z = tc.conv2d(h, p["latent.conv"], stride=1, pad=1)
        z = act(self._bn(z, "latent.bn", mode))
        z = tc.add_channel_bias(z, self._tproj(temb, "tproj.latent"))
        dec_skips = [skips[2], skips[1], skips[0]]
        return self._decode("dec1", z, dec_skips, temb, mode), self._decode("dec2", z, dec_skips, temb, mode)


def unet_forward(model, x_t, t):
    """Evaluate both branches on a single image ``x_t`` (H, W) at step ``t``."""
    x = np.asarray(x_t, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"x_t must be 2-D, got shape {x.shape}")
    o1, o2 = model.forward(x[None, None], t, train=False)
    return o1.data[0, 0].copy(), o2.data[0, 0].copy()


# -- loss -----------------------------------------------------------------------

DIRECT = "direct"
SWAPPED = "swapped"


def crossroad_loss(i1_t, i2_t, o1_t, o2_t):
    """Cross-road L1 on one quadruple of images; returns ``(loss, pairing)``.

    Ties go to the direct pairing.
    """
    arrs = [np.asarray(a, dtype=np.float64) for a in (i1_t, i2_t, o1_t, o2_t)]
    check_same_shape(*arrs, names=("i1_t", "i2_t", "o1_t", "o2_t"))
    i1, i2, o1, o2 = arrs
    direct = np.abs(i1 - o1).mean() + np.abs(i2 - o2).mean()
    swapped = np.abs(i1 - o2).mean() + np.abs(i2 - o1).mean()
    if swapped < direct:
        return float(swapped), SWAPPED
    return float(direct), DIRECT


def crossroad_loss_batch(i1, i2, o1, o2):
    """Differentiable batch version: mean over samples of the per-sample minimum.

    ``i1``/``i2`` are arrays (targets), ``o1``/``o2`` tensors. Returns the
    loss tensor and a boolean array marking swapped samples.
    """
    if not (np.shape(i1) == np.shape(i2) == o1.shape == o2.shape):
        raise DimensionError(f"cross-road shapes differ: {np.shape(i1)}, {np.shape(i2)}, {o1.shape}, {o2.shape}")
    direct = tc.add(tc.per_sample_l1(o1, i1), tc.per_sample_l1(o2, i2))
    swapped = tc.add(tc.per_sample_l1(o2, i1), tc.per_sample_l1(o1, i2))
    use_swap = swapped.data < direct.data
    w_swap = use_swap.astype(np.float64)
    # selecting a branch per sample: the min's gradient is the chosen branch's gradient
    picked = tc.add(tc.mul(direct, 1.0 - w_swap), tc.mul(swapped, w_swap))
    return tc.mean(picked), use_swap


# -- training -------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    flip_rate: float
    n_samples: int
    losses: list = field(default_factory=list)


class TrainingDiverged(ArithmeticError):
    def __init__(self, msg, epoch, step):
        super().__init__(msg)
        self.epoch = epoch
        self.step = step


def epoch_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 0xE90C]))


def train_epoch(model, X, Y, sched, cfg, rng, adam, epoch=0):
    """One pass over the morph training set.

    Per sample: a step ``t`` uniform on ``[t_min, T]`` (or ``t = 0`` with
    probability ``clean_fraction``), three independent
    noise draws, closed-form noising of the morph and both bona fides, a
    forward pass on the noisy morph and the cross-road loss against the noisy
    bona fides. Parameters on ``model`` are replaced after every successful
    Adam step, so on divergence the model holds the last good state.
    """
    n = len(X)
    if n == 0:
        raise ConfigurationError("training split is empty")
    order = rng.permutation(n)
    losses, flips = [], 0
    names = list(model.params)
    for step, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        b = len(idx)
        ts = rng.integers(cfg.t_min, sched.T + 1, size=b)
        if cfg.clean_fraction > 0:
            ts[rng.random(b) < cfg.clean_fraction] = 0
        x0 = X[idx][:, None]
        y0 = Y[idx]
        eps_x = rng.standard_normal(x0.shape)
        eps_1 = rng.standard_normal((b, 1) + y0.shape[2:])
        eps_2 = rng.standard_normal((b, 1) + y0.shape[2:])
        x_t = q_sample_batch(x0, ts, eps_x, sched)
        i1_t = q_sample_batch(y0[:, 0:1], ts, eps_1, sched)
        i2_t = q_sample_batch(y0[:, 1:2], ts, eps_2, sched)
        try:
            with tc.Tape():
                o1, o2 = model.forward(x_t, ts, train=True)
                loss, swapped = crossroad_loss_batch(i1_t, i2_t, o1, o2)
            grads = tc.backward(loss)
            model.params = tc.adam_step(model.params, {k: grads.of(model.params[k]) for k in names}, adam)
        except tc.NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", epoch, step) from exc
        losses.append(loss.item() * b)
        flips += int(swapped.sum())
    return EpochStats(epoch, float(np.sum(losses) / n), flips / n, n, [l / 1.0 for l in losses])


# -- inference ------------------------------------------------------------------


@dataclass
class DemorphOutput:
    o1: np.ndarray
    o2: np.ndarray
    pairing: str = None
    per_output_losses: tuple = None
    trajectory: list = None


def _clamp(a):
    return np.clip(a, 0.0, 1.0)


def demorph_direct(model, x):
    """Single pass at ``t = 0`` on the clean input."""
    o1, o2 = unet_forward(model, x, 0)
    return DemorphOutput(_clamp(o1), _clamp(o2))


def demorph_iterative(model, x, sched, seed=0, zero_noise=False, record=False):
    """Follow the noisy-input chain from ``t = T`` down to ``t = 0``.

    The input trajectory is ``x^t = q_sample(x, t)`` with one fixed noise
    draw. Branch predictions at each ``t`` are the model's estimates of the
    noisy bona fides; the ``t = 0`` pass produces the final output, so a
    zero-noise trajectory reproduces :func:`demorph_direct` exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    draw = NoiseDraw.zeros(x.shape) if zero_noise else NoiseDraw.from_seed(seed, x.shape)
    traj = []
    if record:
        for t in range(sched.T, 0, -1):
            o1, o2 = unet_forward(model, q_sample(x, t, draw, sched), t)
            traj.append((t, o1, o2))
    o1, o2 = unet_forward(model, q_sample(x, 0, draw, sched), 0)
    traj.append((0, o1, o2))
    return DemorphOutput(_clamp(o1), _clamp(o2), trajectory=traj if record else None)


def predict_pairs(model, X, t=0, batch_size=64):
    """Batched eval-mode forward at a fixed step; returns (n, 2, H, W) unclamped."""
    out = []
    for s in range(0, len(X), batch_size):
        xb = X[s:s + batch_size][:, None]
        o1, o2 = model.forward(xb, t, train=False)
        out.append(np.concatenate([o1.data, o2.data], axis=1))
    return np.concatenate(out, axis=0)


class BranchedDemorpher(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around :class:`BranchedUNet`.

    ``fit(X, Y)`` takes morphs ``X`` of shape (n, H, W) and bona fide pairs
    ``Y`` of shape (n, 2, H, W); ``transform(X)`` returns (n, 2, H, W)
    reconstructions clamped to [0, 1].
    """

    def __init__(self, T=300, epochs=300, lr=1e-3, batch_size=16, base_width=32, time_embed_dim=32,
                 activation="silu", beta_start=1e-4, beta_end=0.02, t_min=1, clean_fraction=0.0, inference="direct",
                 seed=0, verbose=0):
        self.T = T
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.base_width = base_width
        self.time_embed_dim = time_embed_dim
        self.activation = activation
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.t_min = t_min
        self.clean_fraction = clean_fraction
        self.inference = inference
        self.seed = seed
        self.verbose = verbose

    def _config(self, img_size):
        return TrainConfig(T=self.T, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           img_size=img_size, seed=self.seed, time_embed_dim=self.time_embed_dim,
                           base_width=self.base_width, activation=self.activation,
                           beta_start=self.beta_start, beta_end=self.beta_end, t_min=self.t_min,
                           clean_fraction=self.clean_fraction).validate()

    def initialize(self, img_size):
        """Fresh, untrained state; ``fit`` calls this before the first epoch."""
        if self.inference not in ("direct", "iterative"):
            raise ConfigurationError(f"inference must be 'direct' or 'iterative', got {self.inference!r}")
        self.config_ = self._config(img_size)
        self.schedule_ = build_linear_schedule(self.T, self.beta_start, self.beta_end)
        self.model_ = BranchedUNet(self.config_)
        self.adam_ = tc.AdamState(lr=self.lr)
        self.history_ = []
        self.epochs_done_ = 0
        return self

    def fit(self, X, Y, callback=None):
        X = check_image_batch(X)
        Y = check_pair_batch(Y, len(X))
        self.initialize(X.shape[1])
        return self.resume(X, Y, callback)

    def resume(self, X, Y, callback=None):
        """Continue training from ``epochs_done_`` up to ``epochs``."""
        check_is_fitted(self, "model_")
        X = check_image_batch(X, size=self.config_.img_size)
        Y = check_pair_batch(Y, len(X))
        for epoch in range(self.epochs_done_, self.epochs):
            stats = train_epoch(self.model_, X, Y, self.schedule_, self.config_,
                                epoch_rng(self.seed, epoch), self.adam_, epoch)
            self.history_.append(stats)
            self.epochs_done_ = epoch + 1
            if self.verbose:
                logger.info("epoch %d loss %.5f flip %.3f", epoch + 1, stats.mean_loss, stats.flip_rate)
            if callback is not None:
                callback(self, stats)
        self.n_features_in_ = self.config_.img_size ** 2
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_image_batch(X, size=self.config_.img_size)
        # the iterative chain ends with the same t = 0 pass
        return _clamp(predict_pairs(self.model_, X, t=0))

    def demorph(self, x, seed=0):
        check_is_fitted(self, "model_")
        if self.inference == "iterative":
            return demorph_iterative(self.model_, x, self.schedule_, seed)
        return demorph_direct(self.model_, x)

    # -- persistence --------------------------------------------------------

    def save(self, path, extra=None):
        """Write parameters, BN statistics, Adam state and progress to ``path``."""
        check_is_fitted(self, "model_")
        config = {
            "estimator": self.get_params(),
            "img_size": self.config_.img_size,
            "epochs_done": self.epochs_done_,
            "adam": ckpt.adam_hyper(self.adam_),
            "history": [[s.epoch, s.mean_loss, s.flip_rate, s.n_samples] for s in self.history_],
            "extra": extra or {},
        }
        ckpt.save(path, config, ckpt.pack_state(self.model_, self.adam_))

    @classmethod
    def load(cls, path):
        """Rebuild a fitted estimator from :meth:`save` output."""
        config, arrays = ckpt.load(path)
        try:
            est = cls(**config["estimator"])
            est.initialize(int(config["img_size"]))
            params, stats, adam = ckpt.unpack_state(arrays, config["adam"])
            est.model_ = BranchedUNet(est.config_, params, stats)
        except (KeyError, TypeError, DimensionError, ConfigurationError) as exc:
            raise ckpt.CheckpointError(f"checkpoint {path} does not match this model: {exc}") from exc
        est.adam_ = adam
        est.epochs_done_ = int(config["epochs_done"])
        est.history_ = [EpochStats(int(e), float(l), float(f), int(n)) for e, l, f, n in config["history"]]
        est.n_features_in_ = est.config_.img_size ** 2
        est.checkpoint_extra_ = config.get("extra", {})
        return est
