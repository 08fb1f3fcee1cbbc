"""Denoising diffusion: schedules, forward noising, losses, respaced sampling, training.

Timesteps are 1-based throughout: ``t = 1..T`` indexes ``betas[t - 1]``, and
``alpha_bar_0 = 1`` by convention. A respaced schedule keeps the original
training timesteps in ``timesteps`` so the denoiser always sees the ``t``
it was trained on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, TrainingDivergedError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    timesteps: np.ndarray = None
    kind: str = "linear"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float)
        if betas.ndim != 1 or betas.size < 1 or np.any(betas <= 0) or np.any(betas >= 1):
            raise InvalidInputError("betas must be a 1D sequence in (0, 1)")
        object.__setattr__(self, "betas", betas)
        ts = np.arange(1, betas.size + 1) if self.timesteps is None else np.asarray(self.timesteps, dtype=np.int64)
        if ts.shape != betas.shape:
            raise InvalidInputError("timesteps must match betas")
        object.__setattr__(self, "timesteps", ts)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "alpha_bars_prev", alpha_bars_prev)
        object.__setattr__(self, "posterior_variances", betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars))

    @property
    def T(self):
        return self.betas.size

    def descriptor(self):
        return {"kind": self.kind, "betas": self.betas.tolist(), "timesteps": self.timesteps.tolist()}

    @classmethod
    def from_descriptor(cls, d):
        return cls(np.asarray(d["betas"]), np.asarray(d["timesteps"]), d.get("kind", "linear"))

    def _at(self, arr, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise InvalidInputError(f"timestep out of range 1..{self.T}")
        return arr[t - 1]


def make_schedule(T, kind="linear"):
    """Linear betas from 1e-4 to 2e-2 at T = 1000, endpoints scaled by 1000/T otherwise."""
    if int(T) != T or T < 2:
        raise InvalidInputError("T must be an integer >= 2")
    if kind != "linear":
        raise InvalidInputError(f"unsupported schedule kind {kind!r}")
    scale = 1000.0 / T
    betas = np.linspace(scale * 1e-4, scale * 2e-2, int(T))
    return NoiseSchedule(np.minimum(betas, 0.999), kind=kind)


def respace(schedule, steps):
    """Evenly strided subsequence of ``steps`` timesteps with alpha-bar-consistent betas."""
    if int(steps) != steps or not 1 <= steps <= schedule.T:
        raise InvalidInputError(f"steps must be in 1..{schedule.T}")
    if steps == schedule.T:
        return schedule
    if steps == 1:
        keep = np.array([schedule.T])
    else:
        keep = np.round(np.arange(steps) * (schedule.T - 1) / (steps - 1)).astype(np.int64) + 1
    ab = schedule.alpha_bars[keep - 1]
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    betas = 1.0 - ab / ab_prev
    return NoiseSchedule(betas, schedule.timesteps[keep - 1], kind=schedule.kind)


def _bcast(v, like):
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def q_sample(x0, t, eps, schedule):
    """``z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` scalar or per-batch, ``t = 0`` gives ``x0``."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise InvalidInputError(f"timestep out of range 0..{schedule.T}")
    ab = _bcast(np.concatenate([[1.0], schedule.alpha_bars])[t], x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_mean(z_t, x0, t, schedule):
    """Mean of ``q(z_{t-1} | z_t, x0)``."""
    b = _bcast(schedule._at(schedule.betas, t), z_t)
    a = _bcast(schedule._at(schedule.alphas, t), z_t)
    ab = _bcast(schedule._at(schedule.alpha_bars, t), z_t)
    ab_prev = _bcast(schedule._at(schedule.alpha_bars_prev, t), z_t)
    c0 = np.sqrt(ab_prev) * b / (1 - ab)
    ct = np.sqrt(a) * (1 - ab_prev) / (1 - ab)
    # at t = 1 the coefficients are exactly (1, 0); 1 - (1 - beta) can miss beta by an ulp
    first = ab_prev == 1.0
    return np.where(first, 1.0, c0) * x0 + np.where(first, 0.0, ct) * z_t


def predict_x0(z_t, eps, t, schedule):
    ab = _bcast(schedule._at(schedule.alpha_bars, t), z_t)
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def elbo_weight(beta, alpha, alpha_bar, sigma2):
    """Per-timestep ELBO weight ``beta^2 / (2 sigma^2 alpha (1 - alpha_bar))``."""
    return beta**2 / (2.0 * sigma2 * alpha * (1.0 - alpha_bar))


def reverse_variance(schedule, t, kind="posterior"):
    if kind == "posterior":
        return schedule._at(schedule.posterior_variances, t)
    if kind == "beta":
        return schedule._at(schedule.betas, t)
    raise InvalidInputError(f"unknown variance kind {kind!r}")


def _model_t(schedule, t, n):
    return np.full(n, schedule.timesteps[t - 1], dtype=np.int64)


def loss_eps(denoiser, x0, t, eps, conditioning, schedule, weighting="uniform", variance="posterior"):
    """Noise-prediction loss: mean squared error over elements, averaged over the batch.

    ``x0`` and ``eps`` are ``(N, H, W)``; ``t`` is an int or an ``(N,)`` array.
    With ``weighting="w_t"`` each sample is scaled by :func:`elbo_weight`.
    """
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise InvalidInputError("x0 and eps shapes differ")
    t = np.broadcast_to(np.asarray(t), x0.shape[:1])
    z = q_sample(x0, t, eps, schedule)
    pred = denoiser(z, schedule.timesteps[t - 1], conditioning)
    if pred.shape != eps.shape:
        raise InvalidInputError(f"denoiser output shape {pred.shape} != {eps.shape}")
    per_sample = ((pred - eps) ** 2).reshape(len(x0), -1).mean(axis=1)
    if weighting == "uniform":
        w = 1.0
    elif weighting == "w_t":
        sigma2 = reverse_variance(schedule, t, variance)
        w = elbo_weight(schedule.betas[t - 1], schedule.alphas[t - 1], schedule.alpha_bars[t - 1], sigma2)
    else:
        raise InvalidInputError(f"unknown weighting {weighting!r}")
    return float(np.mean(w * per_sample))


@dataclass
class GuidanceTerms:
    """Additive shifts of the reverse-process mean."""

    g_c: np.ndarray | None = None
    g_fm: np.ndarray | None = None
    scale_c: float = 1.0
    scale_fm: float = 1.0

    def shift(self, like):
        out = np.zeros_like(like)
        if self.g_c is not None:
            out = out + self.scale_c * self.g_c
        if self.g_fm is not None:
            out = out + self.scale_fm * self.g_fm
        return out

    @property
    def active(self):
        return (self.g_c is not None and self.scale_c != 0) or (self.g_fm is not None and self.scale_fm != 0)


def _reverse_step(eps, z_t, t, schedule, noise, shift=None, variance="posterior"):
    b = schedule.betas[t - 1]
    a = schedule.alphas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    mean = (z_t - b / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)
    if shift is not None:
        mean = mean + shift
    sigma = np.sqrt(reverse_variance(schedule, t, variance))
    return mean + sigma * noise


def p_sample_step(denoiser, z_t, t, conditioning, guidance, noise, schedule, variance="posterior"):
    """One ancestral step ``z_t -> z_{t-1}`` with an optional guided mean shift."""
    eps = denoiser(z_t, _model_t(schedule, t, len(z_t)), conditioning)
    shift = guidance.shift(z_t) if guidance is not None and guidance.active else None
    return _reverse_step(eps, z_t, t, schedule, noise, shift, variance)


def sample(
    denoiser,
    conditioning,
    steps,
    schedule,
    guidance=None,
    rng_seed=0,
    shape=None,
    variance="posterior",
    clip=True,
):
    """Run the reverse chain over ``steps`` respaced timesteps.

    ``conditioning`` is ``(N, C, H, W)`` (or ``None`` with an explicit
    ``shape``). ``guidance`` is any object with a ``terms(z_t, t, cond, x0_hat)``
    method returning :class:`GuidanceTerms`, or ``None``.
    """
    sched = respace(schedule, steps)
    if shape is None:
        if conditioning is None:
            raise InvalidInputError("shape is required without conditioning")
        c = np.asarray(conditioning)
        shape = (c.shape[0],) + c.shape[2:]
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal(shape)
    guided = guidance is not None and getattr(guidance, "enabled", True)
    for t in range(sched.T, 0, -1):
        noise = rng.standard_normal(shape) if t > 1 else np.zeros(shape)
        eps = denoiser(z, _model_t(sched, t, shape[0]), conditioning)
        shift = None
        if guided:
            x0_hat = np.clip(predict_x0(z, eps, t, sched), 0.0, 1.0)
            terms = guidance.terms(z, t, conditioning, x0_hat)
            if terms.active:
                shift = terms.shift(z)
                if not np.all(np.isfinite(shift)):
                    raise FloatingPointError(f"non-finite guidance at step {t}")
        z = _reverse_step(eps, z, t, sched, noise, shift, variance)
    return np.clip(z, 0.0, 1.0) if clip else z


@dataclass
class TrainConfig:
    n_steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    log_every: int = 0
    extra: dict = field(default_factory=dict)


def train(denoiser, topologies, conditioning, schedule, config=TrainConfig()):
    """Adam on the uniform-weighted noise-prediction loss.

    ``denoiser`` must expose a flat ``params`` vector and
    ``loss_and_grad(params, z, t, cond, eps)``. Returns ``(params, losses)``;
    the denoiser's parameters are updated in place as well.
    """
    x = np.asarray(topologies, dtype=float)
    if x.ndim != 3 or len(x) == 0:
        raise InvalidInputError("topologies must be a non-empty (N, H, W) array")
    cond = None if conditioning is None else np.asarray(conditioning, dtype=float)
    rng = np.random.default_rng(config.seed)
    params = denoiser.params.copy()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    b1, b2 = config.adam_betas
    losses = np.empty(config.n_steps)
    bs = min(config.batch_size, len(x))
    for step in range(config.n_steps):
        idx = rng.choice(len(x), size=bs, replace=len(x) < bs)
        t = rng.integers(1, schedule.T + 1, size=bs)
        eps = rng.standard_normal((bs,) + x.shape[1:])
        z = q_sample(x[idx], t, eps, schedule)
        loss, grad = denoiser.loss_and_grad(params, z, schedule.timesteps[t - 1], None if cond is None else cond[idx], eps)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(step, loss)
        losses[step] = loss
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad**2
        mhat = m / (1 - b1 ** (step + 1))
        vhat = v / (1 - b2 ** (step + 1))
        params = params - config.lr * mhat / (np.sqrt(vhat) + config.adam_eps)
        if config.log_every and step % config.log_every == 0:
            logger.info("step %d loss %.4f", step, loss)
    denoiser.params = params
    return params, losses
