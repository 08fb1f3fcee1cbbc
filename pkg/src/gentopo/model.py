"""Conditional diffusion generator with a scikit-learn style interface.

``fit(C, Y)`` takes conditioning stacks ``(N, C, H, W)`` and target
topologies ``(N, H, W)``; ``predict(C)`` runs the reverse chain. It composes
with :class:`~gentopo.kernels.KernelConditioner` in a ``Pipeline``::

    make_pipeline(KernelConditioner("topodiff-ff"), DiffusionModel()).fit(problems, topologies)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .denoiser import ConvDenoiser
from .diffusion import NoiseSchedule, TrainConfig, make_schedule, sample, train
from .exceptions import InvalidConfigurationError, InvalidInputError
from .io import load_tensors, save_tensors
from .kernels import channel_names


def _check_xy(C, Y=None):
    C = np.asarray(C, dtype=float)
    if C.ndim != 4:
        raise InvalidInputError(f"conditioning must be (N, C, H, W), got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise InvalidInputError("conditioning contains non-finite values")
    if Y is None:
        return C
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (C.shape[0],) + C.shape[2:]:
        raise InvalidInputError(f"topologies shape {Y.shape} does not match conditioning {C.shape}")
    if Y.min() < 0 or Y.max() > 1:
        raise InvalidInputError("topologies must lie in [0, 1]")
    return C, Y


class DiffusionModel(BaseEstimator):
    def __init__(
        self,
        variant="topodiff-ff",
        hidden=16,
        n_layers=3,
        t_dim=16,
        T=1000,
        n_steps=2000,
        batch_size=16,
        lr=2e-3,
        sample_steps=100,
        seed=0,
    ):
        self.variant = variant
        self.hidden = hidden
        self.n_layers = n_layers
        self.t_dim = t_dim
        self.T = T
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.sample_steps = sample_steps
        self.seed = seed

    def _init_denoiser(self, n_cond):
        return ConvDenoiser(n_cond, self.hidden, self.n_layers, self.t_dim, seed=self.seed)

    def fit(self, C, Y):
        C, Y = _check_xy(C, Y)
        names = channel_names(self.variant)
        if C.shape[1] != len(names):
            raise InvalidConfigurationError(f"variant {self.variant!r} expects {len(names)} channels, got {C.shape[1]}")
        self.channel_names_ = names
        self.schedule_ = make_schedule(self.T)
        self.denoiser_ = self._init_denoiser(C.shape[1])
        cfg = TrainConfig(n_steps=self.n_steps, batch_size=self.batch_size, lr=self.lr, seed=self.seed)
        _, self.loss_curve_ = train(self.denoiser_, Y, C, self.schedule_, cfg)
        self.n_features_in_ = C.shape[1]
        self.grid_shape_ = Y.shape[1:]
        return self

    def sample(self, C, steps=None, seed=None, guidance=None):
        check_is_fitted(self, "denoiser_")
        C = _check_xy(C)
        if C.shape[1] != self.n_features_in_:
            raise InvalidConfigurationError(f"model expects {self.n_features_in_} conditioning channels, got {C.shape[1]}")
        steps = self.sample_steps if steps is None else steps
        seed = self.seed if seed is None else seed
        return sample(self.denoiser_, C, steps, self.schedule_, guidance=guidance, rng_seed=seed)

    def predict(self, C):
        return self.sample(C)

    def save(self, path):
        check_is_fitted(self, "denoiser_")
        meta = {
            "estimator": self.get_params(),
            "denoiser": self.denoiser_.config(),
            "schedule": self.schedule_.descriptor(),
            "channels": list(self.channel_names_),
            "grid_shape": list(self.grid_shape_),
        }
        save_tensors(path, {"params": self.denoiser_.params, "loss_curve": np.asarray(self.loss_curve_)}, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = load_tensors(path)
        model = cls(**meta["estimator"])
        model.denoiser_ = ConvDenoiser(**meta["denoiser"])
        if tensors["params"].shape != (model.denoiser_.n_params,):
            raise InvalidConfigurationError("checkpoint parameter count does not match its architecture")
        model.denoiser_.params = tensors["params"]
        model.schedule_ = NoiseSchedule.from_descriptor(meta["schedule"])
        model.channel_names_ = tuple(meta["channels"])
        model.n_features_in_ = len(model.channel_names_)
        model.grid_shape_ = tuple(meta["grid_shape"])
        model.loss_curve_ = tensors.get("loss_curve")
        return model

    @classmethod
    def untrained(cls, variant="topodiff-ff", grid_shape=(16, 16), **params):
        """A seeded, untrained model (useful for smoke tests and timing)."""
        model = cls(variant=variant, **params)
        names = channel_names(variant)
        model.channel_names_ = names
        model.schedule_ = make_schedule(model.T)
        model.denoiser_ = model._init_denoiser(len(names))
        model.n_features_in_ = len(names)
        model.grid_shape_ = tuple(grid_shape)
        model.loss_curve_ = np.zeros(0)
        return model
