"""Flat ``key = value`` run configuration, config hashing and seed derivation.

Every key has a typed default.  A config file may override any subset; an
unknown key or an unparsable value is a hard error.  Lists are comma-separated.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .maze import MAZES, Physics
from .search import SearchConfig
from .world_model import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # environment
    maze: str = "original"
    dt: float = 0.2
    damping: float = 0.6
    gain: float = 2.0
    v_max: float = 4.0
    # policies
    kp: float = 2.0
    kd: float = 0.3
    policy_sigma: float = 1.0
    # data collection
    trajectories: int = 500
    traj_len: int = 200
    repeat_max: int = 4
    # world model
    d_z: int = 32
    hidden: int = 64
    epochs: int = 500
    batch: int = 256
    train_lr: float = 1e-3
    kl_weight: float = 0.01
    checkpoints: tuple = (100, 200, 300, 400, 500)
    # search
    iterations: int = 2500
    samples: int = 128
    horizon: int = 50
    lr_start: float = 5e-4
    lr_end: float = 1e-4
    grad_clip: float = 1.0
    lambda0: float = 1.0
    dual_step: float = 0.1
    snapshot_interval: int = 100
    search_seeds: int = 1
    require_order: bool = True
    # analysis
    bins: int = 50
    density_episodes: int = 500
    density_steps: int = 200
    ratio_floor: float = 1e-6
    snapshot_rollouts: int = 8
    # oracle
    oracle_problems: int = 50
    oracle_iterations: int = 2000
    oracle_lr: float = 1e-2
    oracle_resolution: int = 100_000
    oracle_tol: float = 5e-3

    def __post_init__(self):
        if self.maze not in MAZES:
            raise ConfigError(f"unknown maze {self.maze!r}; choose from {sorted(MAZES)}")
        # building the module configs runs their own validation
        try:
            self.train_config()
            self.search_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("trajectories", "traj_len", "repeat_max", "search_seeds", "bins",
                     "density_episodes", "density_steps", "snapshot_rollouts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def physics(self) -> Physics:
        return Physics(self.dt, self.damping, self.gain, self.v_max)

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch=self.batch, lr=self.train_lr, kl_weight=self.kl_weight,
                           checkpoint_epochs=self.checkpoints, seed=seed, d_z=self.d_z, hidden=self.hidden)

    def search_config(self, seed: int = 0) -> SearchConfig:
        return SearchConfig(iterations=self.iterations, samples=self.samples, horizon=self.horizon,
                            lr_start=self.lr_start, lr_end=self.lr_end, grad_clip=self.grad_clip,
                            lambda0=self.lambda0, dual_step=self.dual_step,
                            snapshot_interval=self.snapshot_interval, seed=seed)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        """Stable 16-hex-digit digest of the canonical text form."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "RunConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)


# scaled-down setting that runs on one CPU core in well under half an hour
DESK = dict(
    d_z=16, trajectories=200, traj_len=50, epochs=200, checkpoints=(40, 80, 120, 160, 200),
    iterations=800, samples=32, horizon=30, lr_start=1e-4, lr_end=2e-5, search_seeds=3,
    require_order=False, density_episodes=200, oracle_problems=50,
)

PRESETS = {"full": {}, "desk": DESK}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines on top of ``base`` (default: full-size settings).

    ``preset = desk`` as the first key loads a preset before the remaining lines.
    """
    cfg = base or RunConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "preset":
            if updates:
                raise ConfigError(f"line {lineno}: preset must come before other keys")
            if raw not in PRESETS:
                raise ConfigError(f"line {lineno}: unknown preset {raw!r}")
            cfg = cfg.with_overrides(**PRESETS[raw])
            continue
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in updates:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        updates[key] = _parse(_TYPES[key], raw, key)
    return cfg.with_overrides(**updates)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return RunConfig().with_overrides(**PRESETS[name])


def derive_seed(master: int, module: str, index: int = 0) -> int:
    """64-bit seed from ``(master, module, index)``; streams are independent by name."""
    digest = hashlib.sha256(f"{int(master)}/{module}/{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
