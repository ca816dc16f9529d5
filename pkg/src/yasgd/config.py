"""Run configuration: a flat TOML file of ``key = value`` lines.

Every field of :class:`RunConfig` is a valid key; unknown keys are an
error so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .comm.collectives import ALGORITHMS
from .model import BN_EPSILON, BN_MOMENTUM, ModelSpec
from .optim import DECAYS
from .scheduler import DEFAULT_THRESHOLD, SCHEDULING_MODES

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_SEED = 100000


@dataclass(frozen=True)
class RunConfig:
    # model and data
    layer_dims: tuple[int, ...] = (32, 64, 64, 10)
    batchnorm: bool = False
    n_train: int = 20_000
    n_eval: int = 4_000
    data_seed: int = 7
    data_noise: float = 1.0
    data_spread: float = 1.0
    clusters_per_class: int = 3
    # run shape
    world_size: int = 1
    batch_per_rank: int = 256
    microbatches: int = 0
    epochs: int = 8
    eval_period: int = 4
    eval_offset: int = 1
    seed: int = DEFAULT_SEED
    target_accuracy: float | None = None
    # optimizer
    base_lr: float = 0.1
    warmup_epochs: float = 0.0
    decay: str = "polynomial"
    decay_power: float = 2.0
    decay_milestones: tuple[float, ...] = ()
    decay_gamma: float = 0.1
    momentum: float = 0.9
    lars: bool = True
    lars_eta: float = 0.001
    lars_epsilon: float = 0.0
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    bn_momentum: float = BN_MOMENTUM
    bn_epsilon: float = BN_EPSILON
    # communication
    transport: str = "loopback"
    rendezvous: str = ""
    timeout: float = 30.0
    allreduce: str = "halving_doubling"
    fp16_comm: bool = False
    bucket_bytes: float = DEFAULT_THRESHOLD
    scheduling: str = "static"
    # logging
    model_name: str = "resnet"
    description: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        object.__setattr__(self, "decay_milestones", tuple(float(m) for m in self.decay_milestones))
        ModelSpec(self.layer_dims)  # validates the dims
        if self.world_size < 1 or self.batch_per_rank < 1:
            raise ValueError("world_size and batch_per_rank must be >= 1")
        if self.microbatches < 0:
            raise ValueError("microbatches must be >= 0 (0 means one per rank)")
        if self.microbatches and self.microbatches % self.world_size:
            raise ValueError(f"microbatches ({self.microbatches}) must be a multiple of world_size "
                             f"({self.world_size})")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.eval_offset < self.eval_period:
            raise ValueError("need 0 <= eval_offset < eval_period")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("dataset sizes must be >= 1")
        if self.decay not in DECAYS:
            raise ValueError(f"decay must be one of {DECAYS}")
        if self.transport not in ("loopback", "tcp"):
            raise ValueError("transport must be loopback or tcp")
        if self.allreduce not in ALGORITHMS:
            raise ValueError(f"allreduce must be one of {ALGORITHMS}")
        if self.scheduling not in SCHEDULING_MODES:
            raise ValueError(f"scheduling must be one of {SCHEDULING_MODES}")
        if not self.bucket_bytes > 0:
            raise ValueError("bucket_bytes must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")

    @property
    def global_batch(self) -> int:
        return self.world_size * self.batch_per_rank

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.layer_dims, self.batchnorm)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name for f in fields(RunConfig)}


def config_from_dict(d: dict) -> RunConfig:
    unknown = sorted(set(d) - _FIELDS)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    d = dict(d)
    if isinstance(d.get("bucket_bytes"), str) and d["bucket_bytes"].lower() in ("inf", "infinity"):
        d["bucket_bytes"] = math.inf
    return RunConfig(**d)


def load_toml(path) -> dict:
    with open(path, "rb") as fp:
        return tomllib.load(fp)


def load_config(path) -> RunConfig:
    return config_from_dict(load_toml(path))
