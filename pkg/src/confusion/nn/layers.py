"""Fully connected networks and diagonal Gaussian heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, value

VAR_OFFSET = 1e-8


class ConfigurationError(ValueError):
    pass


@dataclass
class MlpParams:
    """Ordered ``(W, b)`` pairs, ``W`` shaped ``[out, in]``.  Hidden layers use tanh.

    Entries may be numpy arrays or tensors (when differentiating).
    """

    layers: list

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> "MlpParams":
        layers = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            layers.append((rng.uniform(-bound, bound, size=(n_out, n_in)),
                           rng.uniform(-bound, bound, size=n_out)))
        return cls(layers)

    @property
    def sizes(self) -> list[int]:
        return [value(self.layers[0][0]).shape[1]] + [value(w).shape[0] for w, _ in self.layers]

    def validate(self):
        prev = None
        for k, (w, b) in enumerate(self.layers):
            w, b = value(w), value(b)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if prev is not None and w.shape[1] != prev:
                raise ConfigurationError(f"layer {k} expects {w.shape[1]} inputs, previous gives {prev}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigurationError(f"layer {k} has non-finite entries")
            prev = w.shape[0]

    def to_dict(self, prefix: str) -> dict:
        out = {}
        for k, (w, b) in enumerate(self.layers, start=1):
            out[f"{prefix}.w{k}"] = w
            out[f"{prefix}.b{k}"] = b
        return out

    @classmethod
    def from_dict(cls, d, prefix: str) -> "MlpParams":
        layers = []
        k = 1
        while f"{prefix}.w{k}" in d:
            layers.append((d[f"{prefix}.w{k}"], d[f"{prefix}.b{k}"]))
            k += 1
        if not layers:
            raise ConfigurationError(f"no layers with prefix {prefix!r}")
        return cls(layers)


def mlp_forward(params: MlpParams, x):
    """``x`` is ``[in]`` or ``[B, in]``; returns a tensor of matching rank."""
    h = as_tensor(x)
    n_in = value(params.layers[0][0]).shape[1]
    if h.shape[-1] != n_in:
        raise ConfigurationError(f"input width {h.shape[-1]} != first layer width {n_in}")
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        h = h @ as_tensor(w).T + b
        if k < last:
            h = h.tanh()
    return h


@dataclass
class DiagGaussian:
    """Diagonal Gaussian; ``std`` is kept alongside ``variance`` for sampling."""

    mean: object
    variance: object
    std: object = None

    def __post_init__(self):
        if np.shape(value(self.mean)) != np.shape(value(self.variance)):
            raise ConfigurationError("mean and variance shapes differ")
        if self.std is None:
            self.std = as_tensor(self.variance).sqrt()

    @property
    def dim(self) -> int:
        return np.shape(value(self.mean))[-1]


def gaussian_head(raw_mean, raw_logvar) -> DiagGaussian:
    """``variance = (softplus(raw_logvar) + 1e-8) ** 2``."""
    raw_logvar = as_tensor(raw_logvar)
    if not np.all(np.isfinite(raw_logvar.data)) or not np.all(np.isfinite(value(raw_mean))):
        raise FloatingPointError("non-finite input to gaussian head")
    std = raw_logvar.softplus() + VAR_OFFSET
    return DiagGaussian(as_tensor(raw_mean), std * std, std)


def split_head(raw) -> DiagGaussian:
    d = raw.shape[-1] // 2
    return gaussian_head(raw[..., :d], raw[..., d:])


def reparameterized_sample(g: DiagGaussian, noise):
    return as_tensor(g.mean) + as_tensor(g.std) * np.asarray(noise, dtype=float)


def kl_diag_gaussian(p: DiagGaussian, q: DiagGaussian):
    """KL(p || q), summed over the last axis."""
    if p.dim != q.dim:
        raise ConfigurationError(f"dimension mismatch: {p.dim} vs {q.dim}")
    pv, qv = as_tensor(p.variance), as_tensor(q.variance)
    diff = as_tensor(p.mean) - q.mean
    terms = qv.log() - pv.log() + (pv + diff * diff) / qv - 1.0
    return 0.5 * terms.sum(axis=-1)


def kl_to_standard_normal(q: DiagGaussian):
    """KL(q || N(0, I)), summed over the last axis."""
    m, v = as_tensor(q.mean), as_tensor(q.variance)
    return 0.5 * (v + m * m - 1.0 - v.log()).sum(axis=-1)
