"""Run configuration dataclasses, validation, and canonical hashing.

Every run directory gets the fully resolved config as JSON, plus its sha256
hash inside the metrics, so any reported number can be traced to the exact
settings that produced it.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

MODES = ("single", "vanilla", "geometry-aware")
GOAL_MODES = ("z-axis", "so3")


@dataclass
class PretrainConfig:
    """Encoder pretraining settings."""
    steps: int = 5000
    batch: int = 32
    n_points: int = 128
    alpha: float = 1.0            # weight of the rotation loss term
    lr: float = 1e-3
    lr_final: float = 1e-5        # cosine-decayed to by the last step
    widths: tuple = (64, 256, 512)
    seed: int = 0
    eval_every: int = 500
    val_batches: int = 4
    log_every: int = 50

    def validate(self):
        if self.steps < 1 or self.batch < 1 or self.n_points < 1:
            raise ConfigError("steps, batch, and n_points must be positive")
        if self.n_points < 5:
            raise ConfigError("n_points must be >= 5")
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be 3 positive ints, got {self.widths}")
        if self.alpha < 0 or self.lr <= 0:
            raise ConfigError("alpha must be >= 0 and lr > 0")
        if self.lr_final <= 0 or self.lr_final > self.lr:
            raise ConfigError("lr_final must be in (0, lr]")
        if self.eval_every < 1 or self.val_batches < 1 or self.log_every < 1:
            raise ConfigError("eval_every, val_batches, log_every must be positive")
        return self


@dataclass
class RunConfig:
    """One training run (single-task, vanilla multi-task, or geometry-aware
    multi-task)."""
    mode: str = "vanilla"
    objects: tuple = ()           # training object names, registry order
    heldout: tuple = ()           # zero-shot evaluation object names
    goal_mode: str = "z-axis"
    # the desk budget: 1000 episodes per object, structured as many short
    # epochs so the once-per-epoch target soft update tracks the online nets
    epochs: int = 500
    rollouts_per_epoch: int = 2   # per object
    updates_per_epoch: int = 10
    batch: int = 256              # per object
    eval_episodes: int = 20       # per object per eval pass
    eval_every: int = 10          # epochs between eval passes; final always runs
    seed: int = 0
    encoder_path: str = ""        # geometry-aware mode only
    finetune_encoder: bool = False
    finetune_lr: float = 1e-4
    # replay
    relabel_k: float = 4.0
    capacity: int = 1000          # episodes per object
    # agent
    gamma: float = 0.98
    tau: float = 0.05
    eps_random: float = 0.3
    noise_sigma: float = 0.2
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    action_l2: float = 0.3        # quadratic penalty on pre-squash actor output
    hidden: tuple = (256, 256, 256)
    # environment
    cloud_n: int = 128
    episode_len: int = 50
    dt: float = 0.04              # 25 Hz control
    tau_max: float = 2e-3         # N*m torque clamp per axis
    damping: float = 8e-4         # N*m*s viscous coefficient
    # bookkeeping
    checkpoint_every: int = 0     # epochs; 0 = final checkpoint only
    diag_goal_is_start: bool = False   # diagnostic: goal forced to initial orientation

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.goal_mode not in GOAL_MODES:
            raise ConfigError(f"goal_mode must be one of {GOAL_MODES}, got {self.goal_mode!r}")
        if not self.objects:
            raise ConfigError("objects must be non-empty")
        if self.mode == "single" and len(self.objects) != 1:
            raise ConfigError("single mode takes exactly one object")
        if self.mode == "geometry-aware" and not self.encoder_path:
            raise ConfigError("geometry-aware mode needs encoder_path")
        if self.mode != "geometry-aware" and self.finetune_encoder:
            raise ConfigError("finetune_encoder requires geometry-aware mode")
        for name, lo in (("epochs", 1), ("rollouts_per_epoch", 1), ("updates_per_epoch", 0),
                         ("batch", 1), ("eval_episodes", 1), ("capacity", 1),
                         ("episode_len", 1), ("cloud_n", 5), ("eval_every", 1)):
            if getattr(self, name) < lo:
                raise ConfigError(f"{name} must be >= {lo}")
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError("gamma must be in (0, 1)")
        if not (0.0 < self.tau <= 1.0):
            raise ConfigError("tau must be in (0, 1]")
        if not (0.0 <= self.eps_random <= 1.0):
            raise ConfigError("eps_random must be in [0, 1]")
        if self.relabel_k < 0:
            raise ConfigError("relabel_k must be >= 0")
        if self.dt <= 0 or self.tau_max <= 0 or self.damping < 0:
            raise ConfigError("dt and tau_max must be positive, damping >= 0")
        if min(self.noise_sigma, self.lr_actor, self.lr_critic) < 0 or self.action_l2 < 0:
            raise ConfigError("noise_sigma, lrs, and action_l2 must be >= 0")
        dup = set(self.objects) & set(self.heldout)
        if dup:
            raise ConfigError(f"objects also listed as heldout: {sorted(dup)}")
        return self


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def config_dict(cfg):
    return {f.name: _plain(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def config_json(cfg):
    return json.dumps(config_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(config_json(cfg).encode("utf-8")).hexdigest()[:16]


def config_from_dict(cls, data):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            if isinstance(f.default, tuple) and isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
    return cls(**kwargs)
