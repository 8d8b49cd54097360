"""Layer building blocks on top of the tape primitives.

A layer object is a shape-and-name holder: ``init(rng)`` returns the
layer's parameters as ``{qualified_name: Tensor}`` and ``__call__``
reads them back out of whatever dict the caller passes.  Keeping the
parameters outside the layer keeps optimizer updates functional.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import BnStats, Tensor

__all__ = [
    "Linear",
    "Lstm",
    "Conv2d",
    "ConvTranspose2d",
    "BatchNorm",
    "xavier_uniform",
    "orthogonal",
    "params_to_arrays",
    "arrays_to_params",
]


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Orthogonal n x n matrix from QR, sign-fixed for reproducibility."""
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def arrays_to_params(arrays: dict[str, np.ndarray],
                     requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


class Linear:
    def __init__(self, name: str, in_dim: int, out_dim: int):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim

    def init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        w = xavier_uniform(rng, (self.in_dim, self.out_dim), self.in_dim, self.out_dim)
        return {
            f"{self.name}.w": Tensor(w, requires_grad=True),
            f"{self.name}.b": Tensor(np.zeros(self.out_dim), requires_grad=True),
        }

    def __call__(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, params[f"{self.name}.w"]), params[f"{self.name}.b"])


class Lstm:
    """Single LSTM cell stepped explicitly.  Gate order: input, forget,
    cell candidate, output.  Forget-gate bias starts at 1.0 so early
    training does not wash out state."""

    def __init__(self, name: str, in_dim: int, hidden: int):
        self.name = name
        self.in_dim = in_dim
        self.hidden = hidden

    def init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        h = self.hidden
        wx = xavier_uniform(rng, (self.in_dim, 4 * h), self.in_dim, h)
        wh = np.concatenate([orthogonal(rng, h) for _ in range(4)], axis=1)
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0
        return {
            f"{self.name}.wx": Tensor(wx, requires_grad=True),
            f"{self.name}.wh": Tensor(wh, requires_grad=True),
            f"{self.name}.b": Tensor(b, requires_grad=True),
        }

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden))
        return Tensor(z), Tensor(z)

    def __call__(self, params: dict[str, Tensor], x: Tensor,
                 state: tuple[Tensor, Tensor]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        h_prev, c_prev = state
        hid = self.hidden
        z = ad.add(
            ad.add(ad.matmul(x, params[f"{self.name}.wx"]),
                   ad.matmul(h_prev, params[f"{self.name}.wh"])),
            params[f"{self.name}.b"],
        )
        i = ad.sigmoid(ad.narrow(z, 1, 0, hid))
        f = ad.sigmoid(ad.narrow(z, 1, hid, hid))
        g = ad.tanh(ad.narrow(z, 1, 2 * hid, hid))
        o = ad.sigmoid(ad.narrow(z, 1, 3 * hid, hid))
        c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        return h, (h, c)


class Conv2d:
    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int = 3,
                 stride: int = 2, padding: int = 1):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        k = self.kernel
        w = xavier_uniform(rng, (self.out_ch, self.in_ch, k, k),
                           self.in_ch * k * k, self.out_ch * k * k)
        return {
            f"{self.name}.w": Tensor(w, requires_grad=True),
            f"{self.name}.b": Tensor(np.zeros(self.out_ch), requires_grad=True),
        }

    def __call__(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        y = ad.conv2d(x, params[f"{self.name}.w"], self.stride, self.padding)
        b = ad.reshape(params[f"{self.name}.b"], (1, self.out_ch, 1, 1))
        return ad.add(y, b)


class ConvTranspose2d:
    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int = 3,
                 stride: int = 2, padding: int = 1):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        k = self.kernel
        w = xavier_uniform(rng, (self.in_ch, self.out_ch, k, k),
                           self.in_ch * k * k, self.out_ch * k * k)
        return {
            f"{self.name}.w": Tensor(w, requires_grad=True),
            f"{self.name}.b": Tensor(np.zeros(self.out_ch), requires_grad=True),
        }

    def __call__(self, params: dict[str, Tensor], x: Tensor,
                 out_hw: tuple[int, int]) -> Tensor:
        y = ad.conv2d_transpose(x, params[f"{self.name}.w"], out_hw,
                                self.stride, self.padding)
        b = ad.reshape(params[f"{self.name}.b"], (1, self.out_ch, 1, 1))
        return ad.add(y, b)


class BatchNorm:
    """Owns running statistics; scale and shift live in the params dict."""

    def __init__(self, name: str, dim: int, momentum: float = 0.99):
        self.name = name
        self.dim = dim
        self.stats = BnStats(dim, momentum)

    def init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        return {
            f"{self.name}.gamma": Tensor(np.ones(self.dim), requires_grad=True),
            f"{self.name}.beta": Tensor(np.zeros(self.dim), requires_grad=True),
        }

    def __call__(self, params: dict[str, Tensor], x: Tensor, training: bool) -> Tensor:
        return ad.batch_norm(x, params[f"{self.name}.gamma"],
                             params[f"{self.name}.beta"], self.stats, training)

    def stats_arrays(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.stats.mean.copy(),
                f"{self.name}.running_var": self.stats.var.copy()}

    def load_stats(self, arrays: dict[str, np.ndarray]) -> None:
        self.stats.mean = arrays[f"{self.name}.running_mean"].copy()
        self.stats.var = arrays[f"{self.name}.running_var"].copy()
