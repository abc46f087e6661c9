"""Variance schedule and the closed-form Gaussian distributions of the diffusion chain.

Step indices ``t`` run ``1..T`` in every public function; tables are stored
0-based so ``betas[t - 1]`` is the variance added at step ``t``.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from ._validation import ConfigurationError, check_step

PAPER_T = 300
PAPER_BETA_START = 1e-4
PAPER_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    tilde_betas: np.ndarray
    # "tilde" (posterior variance) or "beta" for the reverse-step variance
    reverse_variance: str = "tilde"

    @property
    def T(self):
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas, reverse_variance="tilde"):
        betas = np.asarray(betas, dtype=np.float64).copy()
        if betas.ndim != 1 or len(betas) < 1:
            raise ConfigurationError("betas must be a non-empty 1-D array")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ConfigurationError("betas must lie in [0, 1)")
        if reverse_variance not in ("tilde", "beta"):
            raise ConfigurationError(f"reverse_variance must be 'tilde' or 'beta', got {reverse_variance!r}")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        tilde = betas.copy()
        denom = 1.0 - alpha_bars
        ok = denom > 0
        tilde[ok] = (1.0 - prev[ok]) / denom[ok] * betas[ok]
        tilde[0] = betas[0]
        for arr in (betas, alphas, alpha_bars, tilde):
            arr.flags.writeable = False
        return cls(betas, alphas, alpha_bars, tilde, reverse_variance)

    def alpha_bar(self, t):
        """``alpha_bar`` at step ``t`` with ``alpha_bar(0) == 1``."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def to_csv(self):
        """Schedule dump with header ``t,beta,alpha,alpha_bar,tilde_beta``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "beta", "alpha", "alpha_bar", "tilde_beta"])
        for i in range(self.T):
            w.writerow([i + 1] + [repr(float(a[i])) for a in (self.betas, self.alphas, self.alpha_bars, self.tilde_betas)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls.from_betas([float(r["beta"]) for r in rows])


def build_linear_schedule(T=PAPER_T, beta_start=PAPER_BETA_START, beta_end=PAPER_BETA_END, reverse_variance="tilde"):
    if T < 2:
        raise ConfigurationError(f"T must be at least 2, got {T}")
    if not 0 < beta_start < beta_end < 1:
        raise ConfigurationError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    i = np.arange(T, dtype=np.float64)
    betas = beta_start + i * (beta_end - beta_start) / (T - 1)
    betas[-1] = beta_end
    return NoiseSchedule.from_betas(betas, reverse_variance)


@dataclass(frozen=True)
class NoiseDraw:
    eps: np.ndarray
    seed: int

    @classmethod
    def from_seed(cls, seed, shape):
        eps = np.random.default_rng(int(seed)).standard_normal(shape)
        eps.flags.writeable = False
        return cls(eps, int(seed))

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), -1)


def _eps(draw, shape):
    eps = draw.eps if isinstance(draw, NoiseDraw) else np.asarray(draw, dtype=np.float64)
    if eps.shape != tuple(shape):
        raise ValueError(f"noise shape {eps.shape} does not match image shape {tuple(shape)}")
    return eps


def forward_step(x_prev, t, draw, sched):
    """One transition ``x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps``."""
    t = check_step(t, sched.T)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    beta = sched.betas[t - 1]
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * _eps(draw, x_prev.shape)


def q_sample(x0, t, draw, sched):
    """Closed-form diffusion ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t = 0`` returns ``x0`` unchanged (no noise has been added yet).
    """
    t = check_step(t, sched.T, low=0)
    x0 = np.asarray(x0, dtype=np.float64)
    if t == 0:
        return x0.copy()
    ab = sched.alpha_bars[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * _eps(draw, x0.shape)


def q_sample_batch(x0, ts, eps, sched):
    """Vectorized :func:`q_sample` over a leading batch axis; ``ts`` may contain 0."""
    x0 = np.asarray(x0, dtype=np.float64)
    ts = np.asarray(ts)
    ab = np.concatenate([[1.0], sched.alpha_bars])[ts]
    ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_coefficients(t, sched):
    """Weights ``(c_x0, c_xt)`` of the posterior mean and its variance at step ``t >= 2``."""
    t = check_step(t, sched.T, low=2)
    ab = sched.alpha_bars[t - 1]
    ab_prev = sched.alpha_bars[t - 2]
    beta = sched.betas[t - 1]
    c_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    c_xt = np.sqrt(sched.alphas[t - 1]) * (1.0 - ab_prev) / (1.0 - ab)
    return float(c_x0), float(c_xt), float(sched.tilde_betas[t - 1])


def posterior_params(x_t, x0, t, sched):
    """Mean and variance of ``q(x_{t-1} | x_t, x0)``.

    At ``t = 1`` the previous state is ``x0`` itself: returns ``(x0, 0.0)``.
    """
    t = check_step(t, sched.T)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if t == 1:
        return x0.copy(), 0.0
    c_x0, c_xt, var = posterior_coefficients(t, sched)
    return c_x0 * x0 + c_xt * x_t, var


def reverse_step(x_t, x0_hat, t, draw, sched):
    """Sample ``x_{t-1}`` given the model's clean-image estimate ``x0_hat``.

    The mean is the posterior mean evaluated at ``x0_hat``; the variance is the
    posterior variance (or ``beta_t`` when the schedule is configured with
    ``reverse_variance="beta"``). Step 1 returns ``x0_hat`` without noise.
    """
    t = check_step(t, sched.T)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if t == 1:
        return x0_hat.copy()
    mu, var = posterior_params(x_t, x0_hat, t, sched)
    if sched.reverse_variance == "beta":
        var = float(sched.betas[t - 1])
    return mu + np.sqrt(var) * _eps(draw, mu.shape)
