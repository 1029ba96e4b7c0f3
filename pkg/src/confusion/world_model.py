"""VAE world model: encoder q(z|s), latent dynamics p(z'|z,a), decoder z' -> delta s."""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import (
    AdamState,
    MlpParams,
    Tape,
    adam_step,
    concat,
    kl_to_standard_normal,
    leaves,
    mlp_forward,
    reparameterized_sample,
    split_head,
    value,
)

log = logging.getLogger(__name__)

STATE_DIM = 4
ACTION_DIM = 2
CKPT_MAGIC = b"WMCK"

ENCODER, DYNAMICS, DECODER = "enc", "dyn", "dec"


@dataclass
class WorldModelParams:
    """All model arrays under canonical names (``enc.w1``, ``dyn.b3``, ...)."""

    d_z: int
    arrays: dict

    @classmethod
    def init(cls, d_z: int, rng: np.random.Generator, hidden: int = 64) -> "WorldModelParams":
        arrays = {}
        for prefix, sizes in (
            (ENCODER, [STATE_DIM, hidden, hidden, 2 * d_z]),
            (DYNAMICS, [d_z + ACTION_DIM, hidden, hidden, 2 * d_z]),
            (DECODER, [d_z, hidden, hidden, STATE_DIM]),
        ):
            arrays.update(MlpParams.init(sizes, rng).to_dict(prefix))
        return cls(d_z, {k: arrays[k] for k in sorted(arrays)})

    def mlp(self, prefix: str) -> MlpParams:
        return MlpParams.from_dict(self.arrays, prefix)

    def subset(self, prefix: str) -> dict:
        return {k: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}

    def copy(self) -> "WorldModelParams":
        return WorldModelParams(self.d_z, {k: np.array(value(v)) for k, v in self.arrays.items()})

    def with_arrays(self, **updates) -> "WorldModelParams":
        merged = dict(self.arrays)
        merged.update(updates)
        return WorldModelParams(self.d_z, merged)

    def validate(self):
        d = self.d_z
        for prefix, n_in, n_out in ((ENCODER, STATE_DIM, 2 * d), (DYNAMICS, d + ACTION_DIM, 2 * d),
                                    (DECODER, d, STATE_DIM)):
            mlp = self.mlp(prefix)
            mlp.validate()
            sizes = mlp.sizes
            if sizes[0] != n_in or sizes[-1] != n_out:
                raise ValueError(f"{prefix}: sizes {sizes} inconsistent with d_z={d}")


def encode(phi: MlpParams, s, mode: str = "deterministic", noise=None, rng=None):
    """Return ``(z, q)``.  Stochastic mode draws ``z = mean + std * noise``."""
    q = split_head(mlp_forward(phi, s))
    if mode == "deterministic":
        return q.mean, q
    if mode != "stochastic":
        raise ValueError(f"unknown encode mode {mode!r}")
    if noise is None:
        if rng is None:
            raise ValueError("stochastic encode needs noise or rng")
        noise = rng.standard_normal(q.mean.shape)
    return reparameterized_sample(q, noise), q


def dynamics_step(psi: MlpParams, z, a):
    return split_head(mlp_forward(psi, concat([z, a], axis=-1)))


def decode(xi: MlpParams, z):
    return mlp_forward(xi, z)


def training_loss(params, s, a, ds, noise_enc, noise_dyn, kl_weight: float = 0.01):
    """Reconstruction of delta s through encode -> dynamics -> decode, plus weighted encoder KL.

    ``params`` is a dict of arrays or tensors.  Returns ``(loss, recon, kl)``.
    """
    z, q = encode(MlpParams.from_dict(params, ENCODER), s, "stochastic", noise_enc)
    p = dynamics_step(MlpParams.from_dict(params, DYNAMICS), z, a)
    z_next = reparameterized_sample(p, noise_dyn)
    ds_hat = decode(MlpParams.from_dict(params, DECODER), z_next)
    err = ds_hat - ds
    recon = (err * err).sum(axis=-1).mean()
    kl = kl_to_standard_normal(q).mean()
    return recon + kl_weight * kl, recon, kl


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 500
    batch: int = 256
    lr: float = 1e-3
    kl_weight: float = 0.01
    checkpoint_epochs: tuple = (100, 200, 300, 400, 500)
    seed: int = 0
    d_z: int = 32
    hidden: int = 64

    def __post_init__(self):
        self.checkpoint_epochs = tuple(sorted(int(e) for e in self.checkpoint_epochs))
        bad = [e for e in self.checkpoint_epochs if not 1 <= e <= self.epochs]
        if bad:
            raise ValueError(f"checkpoint epochs {bad} outside [1, {self.epochs}]")


@dataclass
class TrainResult:
    checkpoints: dict = field(default_factory=dict)  # epoch -> WorldModelParams
    loss_log: list = field(default_factory=list)  # rows (epoch, loss, recon, kl)


def standardizer(data: np.ndarray):
    """Per-column mean and std of states and state deltas (std floored at 1e-6)."""
    s_mean, s_std = data[:, :4].mean(axis=0), np.maximum(data[:, :4].std(axis=0), 1e-6)
    d_mean, d_std = data[:, 6:].mean(axis=0), np.maximum(data[:, 6:].std(axis=0), 1e-6)
    return s_mean, s_std, d_mean, d_std


def fold_standardization(model: WorldModelParams, s_mean, s_std, d_mean, d_std) -> WorldModelParams:
    """Absorb input/output standardization into the first encoder and last decoder layer.

    A model trained on ``(s - s_mean) / s_std -> (ds - d_mean) / d_std`` becomes
    one that maps raw states to raw deltas.
    """
    out = model.copy()
    a = out.arrays
    w, b = a["enc.w1"], a["enc.b1"]
    a["enc.w1"] = w / s_std
    a["enc.b1"] = b - (w / s_std) @ s_mean
    last = len(model.mlp(DECODER).layers)
    w, b = a[f"dec.w{last}"], a[f"dec.b{last}"]
    a[f"dec.w{last}"] = d_std[:, None] * w
    a[f"dec.b{last}"] = d_std * b + d_mean
    return out


def train(dataset: np.ndarray, config: TrainConfig, on_checkpoint=None) -> TrainResult:
    """Fit the world model with Adam on shuffled minibatches.

    ``dataset`` rows are ``s[4], a[2], delta_s[4]``.  Training runs on
    standardized states and deltas; checkpoints have the standardization folded
    back in, so they consume raw states and emit raw deltas.
    ``on_checkpoint(epoch, params)`` is called at each configured checkpoint epoch.
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != 10:
        raise ValueError("dataset must be a non-empty (n, 10) array")
    bad = np.flatnonzero(~np.isfinite(data).all(axis=1))
    if bad.size:
        raise TrainingError(f"dataset row {bad[0]} has non-finite values")
    stats = standardizer(data)
    data = data.copy()
    data[:, :4] = (data[:, :4] - stats[0]) / stats[1]
    data[:, 6:] = (data[:, 6:] - stats[2]) / stats[3]
    rng = np.random.default_rng(config.seed)
    model = WorldModelParams.init(config.d_z, rng, config.hidden)
    arrays = model.arrays
    opt = AdamState()
    result = TrainResult()
    n = data.shape[0]
    d_z = config.d_z
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        totals = np.zeros(3)
        for b, start in enumerate(range(0, n, config.batch)):
            rows = data[order[start:start + config.batch]]
            eps = rng.standard_normal((2, len(rows), d_z))
            params = leaves(arrays)
            with Tape() as tape:
                try:
                    loss, recon, kl = training_loss(params, rows[:, :4], rows[:, 4:6], rows[:, 6:],
                                                    eps[0], eps[1], config.kl_weight)
                except FloatingPointError as exc:
                    raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
                grads = tape.gradient(loss, params)
            if not np.isfinite(loss.data):
                raise TrainingError(f"epoch {epoch}, batch {b}: non-finite loss")
            adam_step(opt, arrays, grads, config.lr)
            totals += len(rows) * np.array([loss.data, recon.data, kl.data], dtype=float)
        loss_m, recon_m, kl_m = totals / n
        result.loss_log.append((epoch, float(loss_m), float(recon_m), float(kl_m)))
        log.debug("epoch %d loss %.5f recon %.5f kl %.4f", epoch, loss_m, recon_m, kl_m)
        if epoch in config.checkpoint_epochs:
            ckpt = fold_standardization(model, *stats)
            result.checkpoints[epoch] = ckpt
            if on_checkpoint is not None:
                on_checkpoint(epoch, ckpt)
    return result


# checkpoint files -------------------------------------------------------------

def checkpoint_bytes(model: WorldModelParams, iteration: int | None = None) -> bytes:
    """Serialize; ``iteration`` switches to the snapshot header (version 2)."""
    buf = io.BytesIO()
    names = sorted(model.arrays)
    version = 1 if iteration is None else 2
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<III", version, model.d_z, len(names)))
    if iteration is not None:
        buf.write(struct.pack("<Q", iteration))
    for name in names:
        arr = np.ascontiguousarray(value(model.arrays[name]), dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def parse_checkpoint(raw: bytes):
    """Return ``(model, iteration)``; iteration is None for plain checkpoints."""
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    version, d_z, count = struct.unpack_from("<III", raw, 4)
    off = 16
    iteration = None
    if version == 2:
        (iteration,) = struct.unpack_from("<Q", raw, off)
        off += 8
    elif version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(dims).astype(float)
        off += 8 * size
    if off != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    model = WorldModelParams(d_z, arrays)
    model.validate()
    return model, iteration


def save_checkpoint(path, model: WorldModelParams, iteration: int | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, iteration))


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
