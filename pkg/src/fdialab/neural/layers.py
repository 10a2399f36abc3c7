"""Differentiable layers over numpy arrays.

Activations flow as (batch, channels, length) tensors.  Each layer exposes
``forward(x, train) -> (y, ctx)`` and ``backward(ctx, dy) -> (dx, grads)``
where ``grads`` maps parameter names to arrays of matching shape.  The
context object carries exactly the tensors the backward pass needs, so the
layers themselves stay stateless between calls (batch-norm running statistics
are the one deliberate exception, and they only move in train mode).
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError


class Conv1d:
    """1-D convolution, stride 1, same padding (left (k-1)//2, remainder right)."""

    def __init__(self, kernel: int, in_channels: int, out_channels: int):
        self.kernel = kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = np.zeros((out_channels, in_channels, kernel))
        self.bias = np.zeros(out_channels)

    def init_params(self, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.in_channels * self.kernel)
        self.weight = rng.uniform(-bound, bound, self.weight.shape)
        self.bias = rng.uniform(-bound, bound, self.bias.shape)

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def _pad(self, x: np.ndarray) -> np.ndarray:
        left = (self.kernel - 1) // 2
        right = self.kernel - 1 - left
        return np.pad(x, ((0, 0), (0, 0), (left, right)))

    def forward(self, x: np.ndarray, train: bool):
        if x.shape[1] != self.in_channels:
            raise ContractError(
                f"conv expects {self.in_channels} input channels, got {x.shape[1]}")
        xp = self._pad(x)
        windows = np.lib.stride_tricks.sliding_window_view(xp, self.kernel, axis=2)
        # windows: (B, C_in, L, k)
        y = np.tensordot(windows, self.weight, axes=([1, 3], [1, 2]))
        y = np.ascontiguousarray(y.transpose(0, 2, 1)) + self.bias[None, :, None]
        return y, windows

    def backward(self, ctx, dy: np.ndarray):
        windows = ctx
        batch, _, length = dy.shape
        db = dy.sum(axis=(0, 2))
        dw = np.tensordot(dy, windows, axes=([0, 2], [0, 2]))
        # d(windows): (B, L, C_in, k)
        dwin = np.tensordot(dy, self.weight, axes=([1], [0]))
        dwin = dwin.transpose(0, 2, 1, 3)  # (B, C_in, L, k)
        left = (self.kernel - 1) // 2
        dxp = np.zeros((batch, self.in_channels, length + self.kernel - 1))
        for j in range(self.kernel):
            dxp[:, :, j:j + length] += dwin[:, :, :, j]
        dx = dxp[:, :, left:left + length]
        return dx, {"weight": dw, "bias": db}


class BatchNorm1d:
    """Per-channel normalization over (batch, length); biased variance both for
    batch statistics and the running estimates."""

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def init_params(self, rng: np.random.Generator) -> None:
        pass  # gamma=1, beta=0 start

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x: np.ndarray, train: bool):
        if train:
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = (x - mean[None, :, None]) * inv_std[None, :, None]
        y = self.gamma[None, :, None] * x_hat + self.beta[None, :, None]
        return y, (x_hat, inv_std, train)

    def backward(self, ctx, dy: np.ndarray):
        x_hat, inv_std, train = ctx
        dgamma = (dy * x_hat).sum(axis=(0, 2))
        dbeta = dy.sum(axis=(0, 2))
        scale = (self.gamma * inv_std)[None, :, None]
        if not train:
            dx = dy * scale
        else:
            n = dy.shape[0] * dy.shape[2]
            dx = scale / n * (n * dy
                              - dbeta[None, :, None]
                              - x_hat * dgamma[None, :, None])
        return dx, {"gamma": dgamma, "beta": dbeta}


class LeakyReLU:
    def __init__(self, slope: float = 0.01):
        self.slope = slope

    def init_params(self, rng) -> None:
        pass

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, train: bool):
        mask = x > 0
        return np.where(mask, x, self.slope * x), mask

    def backward(self, ctx, dy: np.ndarray):
        mask = ctx
        return np.where(mask, dy, self.slope * dy), {}


class Flatten:
    def init_params(self, rng) -> None:
        pass

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, train: bool):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, ctx, dy: np.ndarray):
        return dy.reshape(ctx), {}


class Linear:
    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features))
        self.bias = np.zeros(out_features)

    def init_params(self, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.in_features)
        self.weight = rng.uniform(-bound, bound, self.weight.shape)
        self.bias = rng.uniform(-bound, bound, self.bias.shape)

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray, train: bool):
        if x.shape[1] != self.in_features:
            raise ContractError(
                f"linear expects {self.in_features} features, got {x.shape[1]}")
        return x @ self.weight.T + self.bias, x

    def backward(self, ctx, dy: np.ndarray):
        x = ctx
        return dy @ self.weight, {"weight": dy.T @ x, "bias": dy.sum(axis=0)}


def sigmoid(u: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(u, dtype=float)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over all elements, straight from logits.

    Returns (loss, d loss / d logits).
    """
    u = logits
    y = targets
    per_elem = np.maximum(u, 0.0) - u * y + np.log1p(np.exp(-np.abs(u)))
    loss = float(per_elem.mean())
    dlogits = (sigmoid(u) - y) / u.size
    return loss, dlogits
