"""Flat ``section.key = value`` run configuration shared by the CLI.

Every tunable default of the library is exposed under one dotted key.  A
config file holds one ``key = value`` pair per line (``#`` starts a
comment); command-line flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Tuple

from .augmentation import DDAugConfig, JitterConfig
from .confidence import ConfidencePolicy
from .geometry import CameraIntrinsics, PerturbationConfig
from .pose_solver import RansacConfig
from .retrieval import DEFAULT_RANGE
from .simulator import (
    DEFAULT_INTRINSICS,
    LumenConfig,
    PredictorNoiseModel,
    RenderConfig,
    SimulationConfig,
    TrajectoryConfig,
)


class ConfigError(ValueError):
    """Unknown key, unparsable value or a value violating a module invariant."""


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    kind: str  # int | float | bool | str | floats | ints | pairs | optint
    help: str


_L, _T, _N, _R, _A = LumenConfig(), TrajectoryConfig(), PredictorNoiseModel(), RansacConfig(), DDAugConfig()
_P, _C = PerturbationConfig(), ConfidencePolicy()

KEYS: Tuple[Key, ...] = (
    Key("seed", 0, "int", "master seed for simulation and sampling"),
    Key("camera.fx", DEFAULT_INTRINSICS.fx, "float", "focal length x (px)"),
    Key("camera.fy", DEFAULT_INTRINSICS.fy, "float", "focal length y (px)"),
    Key("camera.cx", DEFAULT_INTRINSICS.cx, "float", "principal point x (px)"),
    Key("camera.cy", DEFAULT_INTRINSICS.cy, "float", "principal point y (px)"),
    Key("camera.width", DEFAULT_INTRINSICS.width, "int", "image width (px)"),
    Key("camera.height", DEFAULT_INTRINSICS.height, "int", "image height (px)"),
    Key("ransac.inlier_threshold", _R.inlier_threshold, "float", "inlier reprojection threshold (px)"),
    Key("ransac.max_iterations", _R.max_iterations, "int", "hypothesis budget per frame"),
    Key("ransac.confidence_stop", _R.confidence_stop, "float", "early-termination confidence"),
    Key("ransac.refine", _R.refine, "bool", "run Levenberg-Marquardt on the inliers"),
    Key("confidence.buffer_capacity", _C.buffer_capacity, "int", "confidence buffer length (frames)"),
    Key("confidence.sigma_multiplier", _C.sigma_multiplier, "float", "k in mu - k*sigma"),
    Key("confidence.uncertain_trigger", _C.uncertain_trigger, "int", "retrain once more than this many frames are uncertain"),
    Key("confidence.warmup_min", _C.warmup_min, "int", "buffer size before the gate is applied"),
    Key("confidence.counting", _C.counting, "str", "cumulative or consecutive uncertain counting"),
    Key("confidence.clear_on_retrain", _C.clear_on_retrain, "bool", "empty the buffer after each retrain"),
    Key("confidence.confident_at_mean", _C.confident_at_mean, "bool", "a count equal to the buffer mean is confident"),
    Key("retrieval.range", DEFAULT_RANGE, "int", "virtual buffer window R (entries R+1)"),
    Key("retrieval.descriptor_dim", 256, "int", "descriptor dimension"),
    Key("retrieval.descriptor_noise", 0.05, "float", "descriptor noise sigma"),
    Key("retrieval.virtual_frames_per_mm", 2.0, "float", "virtual database sampling density"),
    Key("noise.sigma", _N.sigma, "float", "scene-coordinate Gaussian noise (mm)"),
    Key("noise.outlier_fraction", _N.outlier_fraction, "float", "fraction of cells replaced by outliers"),
    Key("noise.outlier_box", (), "floats", "outlier box x0,y0,z0,x1,y1,z1 (empty: clean bbox)"),
    Key("noise.drift_schedule", (), "pairs", "sigma multipliers as frame:mult,frame:mult"),
    Key("augmentation.jitter", _A.jitter, "bool", "color jitter"),
    Key("augmentation.mixup", _A.mixup, "bool", "fractal noise mixup"),
    Key("augmentation.warp", _A.warp, "bool", "camera perturbation warp"),
    Key("augmentation.jitter_range", JitterConfig().brightness, "floats", "brightness/contrast/saturation range lo,hi"),
    Key("augmentation.mixup_range", _A.mixup_range, "floats", "mixup blend factor range lo,hi"),
    Key("augmentation.noise_octaves", _A.noise_octaves, "int", "fractal noise octaves"),
    Key("augmentation.max_angle", _P.max_angle, "float", "perturbation Euler angle bound (rad)"),
    Key("augmentation.max_intrinsic_scale", _P.max_intrinsic_scale, "float", "perturbation intrinsic scale bound"),
    Key("simulator.generations", _L.generations, "int", "branching generations of the lumen tree"),
    Key("simulator.radius", _L.radius, "float", "root radius (mm)"),
    Key("simulator.taper", _L.taper, "float", "child/parent radius ratio"),
    Key("simulator.root_length", _L.root_length, "floats", "root segment length range lo,hi (mm)"),
    Key("simulator.segment_length", _L.segment_length, "floats", "child segment length range lo,hi (mm)"),
    Key("simulator.branch_angle", _L.branch_angle, "floats", "branch angle range lo,hi (deg)"),
    Key("simulator.path", (), "ints", "branch choices per junction (empty: always branch 0)"),
    Key("simulator.frames_per_mm", _T.frames_per_mm, "float", "trajectory sampling density"),
    Key("simulator.max_offset", _T.max_offset, "float", "lateral wander bound (mm)"),
    Key("simulator.roll_amplitude", _T.roll_amplitude, "float", "roll bound (rad)"),
    Key("simulator.stride", RenderConfig().stride, "int", "scene-coordinate grid stride (px)"),
    Key("simulator.fps", 30.0, "float", "frame rate used for timestamps"),
    Key("simulator.images", False, "bool", "render shaded images and depth maps"),
    Key("simulator.max_frames", None, "optint", "truncate the trajectory (empty: no limit)"),
)
KEY_INDEX: Dict[str, Key] = {k.name: k for k in KEYS}


def _floats(text: str) -> Tuple[float, ...]:
    text = text.strip()
    return tuple(float(x) for x in text.split(",")) if text else ()


def parse_value(key: Key, raw) -> Any:
    """Parse a textual (or already typed) value for ``key``."""
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if key.kind == "int":
            return int(s)
        if key.kind == "float":
            return float(s)
        if key.kind == "bool":
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {s!r}")
        if key.kind == "str":
            return s
        if key.kind == "floats":
            return _floats(s)
        if key.kind == "ints":
            return tuple(int(x) for x in s.split(",")) if s else ()
        if key.kind == "optint":
            return None if s in ("", "none", "None") else int(s)
        if key.kind == "pairs":
            out = []
            for item in filter(None, (x.strip() for x in s.split(","))):
                frame, mult = item.split(":")
                out.append((int(frame), float(mult)))
            return tuple(out)
    except ValueError as exc:
        raise ConfigError(f"{key.name}: cannot parse {raw!r} ({exc})") from None
    raise AssertionError(key.kind)


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{b}" for a, b in value)
        return ",".join(str(a) for a in value)
    return str(value)


def _pair(value, name: str) -> Tuple[float, float]:
    if len(value) != 2:
        raise ConfigError(f"{name}: expected two values lo,hi")
    return float(value[0]), float(value[1])


class RunConfig:
    """Validated flat configuration.  Construction builds every module
    config once so invalid values fail at load time."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        merged = {k.name: k.default for k in KEYS}
        for name, raw in (values or {}).items():
            if name not in KEY_INDEX:
                raise ConfigError(f"unknown configuration key {name!r}")
            merged[name] = parse_value(KEY_INDEX[name], raw)
        self.values = merged
        try:
            self._build()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def __getitem__(self, name: str):
        return self.values[name]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    def _build(self):
        v = self.values
        self.intrinsics = CameraIntrinsics(
            v["camera.fx"], v["camera.fy"], v["camera.cx"], v["camera.cy"], v["camera.width"], v["camera.height"]
        )
        self.ransac = RansacConfig(
            v["ransac.inlier_threshold"], v["ransac.max_iterations"], v["ransac.confidence_stop"], v["seed"], v["ransac.refine"]
        )
        self.policy = ConfidencePolicy(
            v["confidence.buffer_capacity"],
            v["confidence.sigma_multiplier"],
            v["confidence.uncertain_trigger"],
            v["confidence.warmup_min"],
            v["confidence.counting"],
            v["confidence.clear_on_retrain"],
            v["confidence.confident_at_mean"],
        )
        if v["retrieval.range"] < 0:
            raise ConfigError("retrieval.range must be non-negative")
        self.retrieval_range = v["retrieval.range"]
        box = v["noise.outlier_box"]
        if box and len(box) != 6:
            raise ConfigError("noise.outlier_box needs six values")
        self.noise = PredictorNoiseModel(
            v["noise.sigma"],
            v["noise.outlier_fraction"],
            (tuple(box[:3]), tuple(box[3:])) if box else None,
            v["noise.drift_schedule"],
        )
        jr = _pair(v["augmentation.jitter_range"], "augmentation.jitter_range")
        self.augmentation = DDAugConfig(
            v["augmentation.jitter"],
            v["augmentation.mixup"],
            v["augmentation.warp"],
            JitterConfig(jr, jr, jr),
            _pair(v["augmentation.mixup_range"], "augmentation.mixup_range"),
            v["augmentation.noise_octaves"],
            PerturbationConfig(v["augmentation.max_angle"], v["augmentation.max_intrinsic_scale"]),
        )
        if v["simulator.generations"] < 1:
            raise ConfigError("simulator.generations must be >= 1")
        if v["simulator.max_frames"] is not None and v["simulator.max_frames"] < 1:
            raise ConfigError("simulator.max_frames must be >= 1 (empty for no limit)")
        if v["simulator.stride"] < 1 or v["simulator.fps"] <= 0:
            raise ConfigError("simulator.stride and simulator.fps must be positive")
        if v["retrieval.descriptor_dim"] < 7 or v["retrieval.virtual_frames_per_mm"] <= 0:
            raise ConfigError("descriptor_dim must be >= 7 and virtual_frames_per_mm positive")
        lumen = LumenConfig(
            generations=v["simulator.generations"],
            radius=v["simulator.radius"],
            taper=v["simulator.taper"],
            root_length=_pair(v["simulator.root_length"], "simulator.root_length"),
            segment_length=_pair(v["simulator.segment_length"], "simulator.segment_length"),
            branch_angle=_pair(v["simulator.branch_angle"], "simulator.branch_angle"),
        )
        path = v["simulator.path"]
        if path and len(path) != lumen.generations - 1:
            raise ConfigError(f"simulator.path needs {lumen.generations - 1} choices")
        traj = TrajectoryConfig(
            frames_per_mm=v["simulator.frames_per_mm"],
            max_offset=v["simulator.max_offset"],
            roll_amplitude=v["simulator.roll_amplitude"],
        )
        self.simulation = SimulationConfig(
            seed=v["seed"],
            lumen=lumen,
            path=tuple(path) if path else None,
            trajectory=traj,
            intrinsics=self.intrinsics,
            render=RenderConfig(stride=v["simulator.stride"]),
            noise=self.noise,
            descriptor_dim=v["retrieval.descriptor_dim"],
            descriptor_noise=v["retrieval.descriptor_noise"],
            virtual_frames_per_mm=v["retrieval.virtual_frames_per_mm"],
            fps=v["simulator.fps"],
            images=v["simulator.images"],
            max_frames=v["simulator.max_frames"],
        )

    def updated(self, overrides: Mapping[str, Any]) -> "RunConfig":
        vals = dict(self.values)
        for name, raw in overrides.items():
            if name not in KEY_INDEX:
                raise ConfigError(f"unknown configuration key {name!r}")
            vals[name] = raw
        return RunConfig(vals)

    def to_text(self) -> str:
        return "".join(f"{k.name} = {format_value(self.values[k.name])}\n" for k in KEYS)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEY_INDEX:
            raise ConfigError(f"{source}: line {lineno}: unknown configuration key {key!r}")
        out[key] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """File values first, then ``overrides`` (command-line flags win)."""
    values: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(path)))
    values.update(overrides or {})
    return RunConfig(values)
