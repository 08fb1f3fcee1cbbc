"""A small fully-convolutional noise predictor with a hand-written backward pass.

Architecture: ``n_layers`` 3x3 'same' convolutions. The input is the noisy
latent concatenated with the conditioning channels; every hidden layer gets a
per-channel bias from a linear map of sinusoidal timestep features and a
SiLU activation. The last layer maps to one output channel.

All activations are kept channels-last (``N, H, W, C``).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import InvalidInputError


def timestep_features(t, dim, max_period=10000.0):
    """Sinusoidal features ``[sin(t w_k), cos(t w_k)]``, shape ``(len(t), dim)``."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    args = np.asarray(t, dtype=float)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _im2col(a):
    n, h, w, c = a.shape
    pad = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(pad, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return cols.reshape(n, h, w, c * 9)


def _col2im(dcols, c):
    n, h, w, _ = dcols.shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dpad = np.zeros((n, h + 2, w + 2, c))
    for ki in range(3):
        for kj in range(3):
            dpad[:, ki : ki + h, kj : kj + w, :] += d[..., ki, kj]
    return dpad[:, 1:-1, 1:-1, :]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ConvDenoiser:
    """``eps_theta(z_t, t, cond)`` for ``z_t`` of shape ``(N, H, W)``.

    Parameters live in one flat vector ``params``; :meth:`unpack` gives views.
    """

    def __init__(self, n_cond, hidden=32, n_layers=3, t_dim=16, seed=0):
        if n_layers < 2:
            raise InvalidInputError("need at least two layers")
        self.n_cond = int(n_cond)
        self.hidden = int(hidden)
        self.n_layers = int(n_layers)
        self.t_dim = int(t_dim)
        self._layout = []
        cin = 1 + self.n_cond
        for layer in range(self.n_layers):
            cout = 1 if layer == self.n_layers - 1 else self.hidden
            self._layout.append((f"w{layer}", (cout, cin, 3, 3)))
            self._layout.append((f"b{layer}", (cout,)))
            if layer < self.n_layers - 1:
                self._layout.append((f"wt{layer}", (cout, self.t_dim)))
            cin = cout
        self.n_params = sum(int(np.prod(s)) for _, s in self._layout)
        self.params = self.init_params(seed)

    def config(self):
        return {"n_cond": self.n_cond, "hidden": self.hidden, "n_layers": self.n_layers, "t_dim": self.t_dim}

    def init_params(self, seed=0):
        rng = np.random.default_rng(seed)
        parts = []
        for name, shape in self._layout:
            if name.startswith("w") and not name.startswith("wt"):
                fan_in = shape[1] * 9
                scale = np.sqrt(2.0 / fan_in)
                if name == f"w{self.n_layers - 1}":
                    scale *= 0.1
                parts.append(rng.normal(0.0, scale, shape).ravel())
            elif name.startswith("wt"):
                parts.append(rng.normal(0.0, 0.1, shape).ravel())
            else:
                parts.append(np.zeros(int(np.prod(shape))))
        return np.concatenate(parts)

    def unpack(self, params):
        out, i = {}, 0
        for name, shape in self._layout:
            size = int(np.prod(shape))
            out[name] = params[i : i + size].reshape(shape)
            i += size
        return out

    def _inputs(self, z, cond):
        z = np.asarray(z, dtype=float)
        if z.ndim != 3:
            raise InvalidInputError(f"latent must be (N, H, W), got {z.shape}")
        x = z[..., None]
        if self.n_cond:
            if cond is None:
                raise InvalidInputError("denoiser expects conditioning channels")
            c = np.asarray(cond, dtype=float)
            if c.ndim == 3:
                c = np.broadcast_to(c, (len(z),) + c.shape)
            if c.shape != (len(z), self.n_cond) + z.shape[1:]:
                raise InvalidInputError(f"conditioning shape {c.shape} incompatible with latent {z.shape}")
            x = np.concatenate([x, np.moveaxis(c, 1, -1)], axis=-1)
        return x

    def _forward(self, params, z, t, cond, keep=False):
        p = self.unpack(params)
        a = self._inputs(z, cond)
        temb = timestep_features(np.broadcast_to(np.asarray(t), (len(a),)), self.t_dim)
        cache = []
        for layer in range(self.n_layers):
            w = p[f"w{layer}"]
            cols = _im2col(a)
            pre = cols @ w.reshape(w.shape[0], -1).T + p[f"b{layer}"]
            last = layer == self.n_layers - 1
            if not last:
                pre = pre + (temb @ p[f"wt{layer}"].T)[:, None, None, :]
                s = _sigmoid(pre)
                out = pre * s
            else:
                s = None
                out = pre
            if keep:
                cache.append((cols, pre, s, a.shape[-1]))
            a = out
        return a[..., 0], (cache, temb)

    def __call__(self, z, t, cond=None):
        return self._forward(self.params, z, t, cond)[0]

    def forward(self, params, z, t, cond=None):
        return self._forward(params, z, t, cond)[0]

    def loss(self, params, z, t, cond, eps):
        pred = self.forward(params, z, t, cond)
        return float(np.mean((pred - eps) ** 2))

    def loss_and_grad(self, params, z, t, cond, eps):
        """Mean squared noise-prediction error and its gradient w.r.t. ``params``."""
        pred, (cache, temb) = self._forward(params, z, t, cond, keep=True)
        diff = pred - eps
        loss = float(np.mean(diff**2))
        p = self.unpack(params)
        grads = {}
        d = (2.0 / diff.size) * diff[..., None]
        for layer in range(self.n_layers - 1, -1, -1):
            cols, pre, s, cin = cache[layer]
            if s is not None:
                d = d * (s + pre * s * (1.0 - s))
                grads[f"wt{layer}"] = d.sum(axis=(1, 2)).T @ temb
            w = p[f"w{layer}"]
            cout = w.shape[0]
            d2 = d.reshape(-1, cout)
            grads[f"w{layer}"] = (d2.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
            grads[f"b{layer}"] = d2.sum(axis=0)
            if layer:
                d = _col2im(d @ w.reshape(cout, -1), cin)
        flat = np.concatenate([grads[name].ravel() for name, _ in self._layout])
        return loss, flat
