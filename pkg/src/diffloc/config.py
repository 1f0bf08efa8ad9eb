"""Run configuration: one JSON file plus command-line overrides.

Defaults carry the published hyper-parameters (M=64, tau=10px / 10cm,
beta=5/tau, alpha=100/|Y|, gamma=100, refinement cap 100, learning rates 1e-4
and 1e-6, 1M / 100k iterations). Desk-scale runs override the budgets.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import LossConfig
from .robust import EstimatorConfig
from .solvers import Mode

MODES = ("rgbd", "rgb-model", "rgb-only")
CONFIG_FORMAT = "diffloc-config"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class SceneSection:
    n_points: int = 2000
    extent: float = 2.0
    descriptor_dim: int = 16
    seed: int = 0
    file: str | None = None


@dataclass
class ViewSection:
    n_train: int = 64
    n_test: int = 32
    seed: int = 1
    pixels_per_view: int = 500
    grid: tuple = (640, 480)
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    descriptor_jitter: float = 0.05
    pixel_sigma: float = 0.0
    point_sigma: float = 0.0
    trajectory_file: str | None = None


@dataclass
class EstimatorSection:
    M: int = 64
    M_train: int = 16
    tau: float | None = None
    beta: float | None = None
    alpha: float | None = None
    max_refine_iters: int = 100
    max_resample_attempts: int = 1000
    lm_max_iters: int = 100
    hard_test_score: bool = False


@dataclass
class TrainSection:
    init_iters: int = 1_000_000
    e2e_iters: int = 100_000
    init_lr: float = 1e-4
    e2e_lr: float = 1e-6
    checkpoint_every: int = 10_000
    feature_jitter: float = 0.05
    preset: str = "default"


@dataclass
class EvalSection:
    thresholds: list = field(default_factory=lambda: [[5.0, 5.0], [2.0, 2.0], [1.0, 1.0]])
    oracle: bool = False


@dataclass
class GradcheckSection:
    instances: int = 100
    corrupt: bool = False


@dataclass
class RunConfig:
    mode: str = "rgbd"
    seed: int = 0
    workers: int = 1
    out: str = "runs/default"
    scene: SceneSection = field(default_factory=SceneSection)
    views: ViewSection = field(default_factory=ViewSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    @property
    def estimator_mode(self) -> Mode:
        return Mode.RGBD if self.mode == "rgbd" else Mode.RGB

    def estimator_config(self, train: bool = False) -> EstimatorConfig:
        e = self.estimator
        return EstimatorConfig(
            mode=self.estimator_mode,
            M=e.M_train if train else e.M,
            tau=e.tau,
            beta=e.beta,
            alpha=e.alpha,
            max_refine_iters=e.max_refine_iters,
            max_resample_attempts=e.max_resample_attempts,
            lm_max_iters=e.lm_max_iters,
            hard_test_score=e.hard_test_score,
        )

    def validate(self) -> RunConfig:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        tau = self.estimator.tau
        # tau is meters for rgbd and pixels otherwise; reject obvious unit mix-ups
        if tau is not None:
            if not tau > 0:
                raise ConfigError("estimator.tau must be positive")
            if self.mode == "rgbd" and tau > 1.0:
                raise ConfigError(f"rgbd tau is in meters; {tau} looks like pixels")
            if self.mode != "rgbd" and tau < 1.0:
                raise ConfigError(f"{self.mode} tau is in pixels; {tau} looks like meters")
        if not self.scene.extent > 0:
            raise ConfigError("scene.extent must be positive")
        if self.scene.n_points < 10:
            raise ConfigError("scene.n_points must be >= 10")
        if self.estimator.M < 1 or self.estimator.M_train < 1:
            raise ConfigError("hypothesis counts must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.estimator_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["views"]["grid"] = list(self.views.grid)
        return {"format": CONFIG_FORMAT, "version": CONFIG_VERSION, **d}


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}
_SECTION_TYPES = {
    "scene": SceneSection,
    "views": ViewSection,
    "estimator": EstimatorSection,
    "loss": LossConfig,
    "train": TrainSection,
    "eval": EvalSection,
    "gradcheck": GradcheckSection,
}


def _build_section(cls, data: dict, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        obj = cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad section {name!r}: {exc}") from exc
    if cls is ViewSection:
        obj.grid = tuple(obj.grid)
    return obj


def config_from_dict(data: dict) -> RunConfig:
    data = copy.deepcopy(data)
    fmt = data.pop("format", CONFIG_FORMAT)
    ver = data.pop("version", CONFIG_VERSION)
    if fmt != CONFIG_FORMAT or ver != CONFIG_VERSION:
        raise ConfigError(f"unsupported config {fmt!r} v{ver!r}")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            kw[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kw[key] = value
    return RunConfig(**kw).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(data)


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``section.key=value`` (value parsed as JSON, else kept as a string)."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside non-section {p!r}")
    node[parts[-1]] = value
