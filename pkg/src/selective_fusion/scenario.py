"""Scenes, contexts and simulated detector branches.

Each branch stands in for a sensor-subset detector. Its behaviour in a scene
is an :class:`ErrorProfile` chosen from the scene context using a qualitative
sensor/context matrix (camera good in clear city-like driving, radar good in
bad weather and at night, lidar good in fog and at night). Early-fusion
branches improve on their members when every member is healthy and fall to
the average of their members otherwise.

Scenes also carry a stem feature vector: one block per modality holding a
noisy copy of the context descriptor and a noisy health flag. The learned
gates read only these features.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from selective_fusion.boxfusion import Detection
from selective_fusion.errors import ConfigError, GenerationError, ParseError, SchemaError
from selective_fusion.geometry import CLASS_NAMES, BoundingBox, iou_matrix
from selective_fusion.scoring import GroundTruth

CONTEXTS = ("city", "motorway", "junction", "rural", "snow", "fog", "night")
MODALITIES = ("radar", "lidar", "camera_left", "camera_right")
CLASSES = tuple(sorted(CLASS_NAMES))

# Which modalities detect well in each context.
_CLEAR = {"radar": False, "lidar": False, "camera_left": True, "camera_right": True}
SENSOR_QUALITY = {
    "city": dict(_CLEAR),
    "motorway": dict(_CLEAR),
    "junction": dict(_CLEAR),
    "rural": dict(_CLEAR),
    "snow": {"radar": True, "lidar": False, "camera_left": False, "camera_right": False},
    "fog": {"radar": True, "lidar": True, "camera_left": False, "camera_right": False},
    "night": {"radar": True, "lidar": True, "camera_left": False, "camera_right": False},
}

# (id, name, sensors) for the seven default branches.
DEFAULT_BRANCHES = (
    (0, "radar", ("radar",)),
    (1, "lidar", ("lidar",)),
    (2, "left-camera", ("camera_left",)),
    (3, "right-camera", ("camera_right",)),
    (4, "lr-cameras", ("camera_left", "camera_right")),
    (5, "lidar+radar", ("lidar", "radar")),
    (6, "cameras+lidar", ("camera_left", "camera_right", "lidar")),
)

# Mean (width, height) in pixels per class at unit scale.
CLASS_SIZES = {
    1: (90.0, 60.0),
    2: (100.0, 75.0),
    3: (130.0, 100.0),
    4: (150.0, 110.0),
    5: (40.0, 50.0),
    6: (40.0, 50.0),
    7: (28.0, 64.0),
    8: (64.0, 66.0),
}


@dataclass(frozen=True)
class ErrorProfile:
    miss_rate: float
    fp_rate: float
    loc_sigma: float
    score_mean: float
    score_sigma: float

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ConfigError(f"miss_rate {self.miss_rate} outside [0, 1]")
        if self.fp_rate < 0 or self.loc_sigma < 0 or self.score_sigma < 0:
            raise ConfigError("fp_rate, loc_sigma and score_sigma must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "miss_rate": self.miss_rate,
            "fp_rate": self.fp_rate,
            "loc_sigma": self.loc_sigma,
            "score_mean": self.score_mean,
            "score_sigma": self.score_sigma,
        }


GOOD_PROFILE = ErrorProfile(miss_rate=0.1, fp_rate=0.5, loc_sigma=2.0, score_mean=0.75, score_sigma=0.15)
BAD_PROFILE = ErrorProfile(miss_rate=0.5, fp_rate=3.0, loc_sigma=8.0, score_mean=0.75, score_sigma=0.15)


@dataclass(frozen=True)
class SimulationKnowledge:
    """Numeric encoding of the sensor/context matrix used to build profiles."""

    good: ErrorProfile = GOOD_PROFILE
    bad: ErrorProfile = BAD_PROFILE
    # Fractional improvement of an early-fusion branch whose members are all healthy.
    fusion_gain: float = 0.3
    quality: Mapping[str, Mapping[str, bool]] = field(default_factory=lambda: SENSOR_QUALITY)

    def compose(self, health: Sequence[bool]) -> ErrorProfile:
        members = [self.good if h else self.bad for h in health]
        if len(members) == 1:
            return members[0]
        if all(health):
            g = 1.0 - self.fusion_gain
            return replace(
                self.good,
                miss_rate=self.good.miss_rate * g,
                fp_rate=self.good.fp_rate * g,
                loc_sigma=self.good.loc_sigma * (1.0 - self.fusion_gain / 2),
            )
        return ErrorProfile(
            *(float(np.mean([getattr(m, f) for m in members])) for f in ErrorProfile.__dataclass_fields__)
        )

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> "SimulationKnowledge":
        data = dict(data or {})
        kwargs = {}
        if "good" in data:
            kwargs["good"] = ErrorProfile(**data["good"])
        if "bad" in data:
            kwargs["bad"] = ErrorProfile(**data["bad"])
        if "fusion_gain" in data:
            kwargs["fusion_gain"] = float(data["fusion_gain"])
        if "quality" in data:
            kwargs["quality"] = {c: dict(v) for c, v in data["quality"].items()}
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "good": self.good.to_dict(),
            "bad": self.bad.to_dict(),
            "fusion_gain": self.fusion_gain,
            "quality": {c: dict(v) for c, v in self.quality.items()},
        }


@dataclass(frozen=True)
class Context:
    label: str
    descriptor: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.label not in CONTEXTS:
            raise ConfigError(f"unknown context {self.label!r}")
        object.__setattr__(self, "descriptor", tuple(float(v) for v in self.descriptor))


@dataclass(frozen=True)
class Scene:
    id: int
    context: Context
    objects: Tuple[GroundTruth, ...]
    seed: int = 0
    width: float = 1280.0
    height: float = 720.0
    # Realized per-modality health (context quality after random obstruction).
    sensor_health: Mapping[str, bool] = field(default_factory=dict)
    features: Tuple[float, ...] = ()

    @property
    def d(self) -> int:
        return len(self.objects)


@dataclass(frozen=True)
class BranchModel:
    id: int
    name: str
    sensor_set: Tuple[str, ...]
    profile: Mapping[str, ErrorProfile]
    knowledge: Optional[SimulationKnowledge] = None

    def __post_init__(self):
        if not self.sensor_set:
            raise ConfigError(f"branch {self.name!r} has no sensors")

    def profile_for(self, scene: Scene) -> ErrorProfile:
        ctx = scene.context.label
        if ctx not in self.profile:
            raise ConfigError(f"branch {self.name!r} has no profile for context {ctx!r}")
        if self.knowledge is None or not scene.sensor_health:
            return self.profile[ctx]
        health = [scene.sensor_health.get(m, self.knowledge.quality[ctx][m]) for m in self.sensor_set]
        baseline = [self.knowledge.quality[ctx][m] for m in self.sensor_set]
        if health == baseline:
            return self.profile[ctx]
        return self.knowledge.compose(health)


@dataclass(frozen=True)
class BranchOutput:
    branch: int
    detections: Tuple[Detection, ...]
    features: Tuple[float, ...] = ()


def default_branch_set(knowledge: Optional[SimulationKnowledge] = None) -> List[BranchModel]:
    knowledge = knowledge or SimulationKnowledge()
    branches = []
    for bid, name, sensors in DEFAULT_BRANCHES:
        profile = {ctx: knowledge.compose([knowledge.quality[ctx][m] for m in sensors]) for ctx in CONTEXTS}
        branches.append(BranchModel(bid, name, sensors, profile, knowledge))
    return branches


@dataclass(frozen=True)
class GeneratorConfig:
    width: float = 1280.0
    height: float = 720.0
    min_objects: int = 1
    max_objects: int = 6
    class_mix: Mapping[int, float] = field(default_factory=lambda: {c: 1.0 for c in CLASSES})
    context_mix: Mapping[str, float] = field(default_factory=lambda: {c: 1.0 for c in CONTEXTS})
    scale_range: Tuple[float, float] = (0.7, 1.5)
    max_gt_iou: float = 0.1
    max_retries: int = 100
    obstruction_rate: float = 0.1
    descriptor_noise: float = 0.15
    stem_noise: float = 0.3
    health_noise: float = 0.3
    knowledge: SimulationKnowledge = field(default_factory=SimulationKnowledge)

    def __post_init__(self):
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("object count range must satisfy 0 <= min <= max")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image size must be positive")
        cm = {int(k): float(v) for k, v in dict(self.class_mix).items()}
        if not cm or any(v < 0 for v in cm.values()) or sum(cm.values()) <= 0:
            raise ConfigError("class_mix must have nonnegative weights with positive total")
        if any(c not in CLASS_SIZES for c in cm):
            raise ConfigError(f"class_mix has unknown classes {sorted(set(cm) - set(CLASS_SIZES))}")
        xm = {str(k): float(v) for k, v in dict(self.context_mix).items()}
        if not xm or any(v < 0 for v in xm.values()) or sum(xm.values()) <= 0:
            raise ConfigError("context_mix must have nonnegative weights with positive total")
        if any(c not in CONTEXTS for c in xm):
            raise ConfigError(f"context_mix has unknown contexts {sorted(set(xm) - set(CONTEXTS))}")
        if not 0.0 <= self.obstruction_rate <= 1.0:
            raise ConfigError("obstruction_rate must be in [0, 1]")
        object.__setattr__(self, "class_mix", cm)
        object.__setattr__(self, "context_mix", xm)
        object.__setattr__(self, "scale_range", tuple(self.scale_range))

    @property
    def feature_dim(self) -> int:
        return len(MODALITIES) * (len(CONTEXTS) + 1)

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> "GeneratorConfig":
        data = dict(data or {})
        if "image_size" in data:
            data["width"], data["height"] = data.pop("image_size")
        if "d_range" in data:
            data["min_objects"], data["max_objects"] = data.pop("d_range")
        if "profiles" in data:
            data["knowledge"] = SimulationKnowledge.from_dict(data.pop("profiles"))
        data.pop("seed", None)
        data.pop("n_scenes", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "image_size": [self.width, self.height],
            "d_range": [self.min_objects, self.max_objects],
            "class_mix": {str(k): v for k, v in sorted(self.class_mix.items())},
            "context_mix": dict(self.context_mix),
            "scale_range": list(self.scale_range),
            "max_gt_iou": self.max_gt_iou,
            "max_retries": self.max_retries,
            "obstruction_rate": self.obstruction_rate,
            "descriptor_noise": self.descriptor_noise,
            "stem_noise": self.stem_noise,
            "health_noise": self.health_noise,
            "profiles": self.knowledge.to_dict(),
        }


def _choice(rng: np.random.Generator, mix: Mapping) -> object:
    keys = list(mix)
    w = np.array([mix[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=w / w.sum()))]


def _random_box(rng, label, scale_range, width, height) -> BoundingBox:
    bw, bh = CLASS_SIZES[label]
    scale = rng.uniform(*scale_range)
    bw, bh = min(bw * scale, width), min(bh * scale, height)
    x1 = rng.uniform(0.0, width - bw)
    y1 = rng.uniform(0.0, height - bh)
    return BoundingBox(x1, y1, x1 + bw, y1 + bh)


def stem_features(context: Context, health: Mapping[str, bool], cfg: GeneratorConfig, rng) -> Tuple[float, ...]:
    """Per-modality blocks of ``[noisy context descriptor, noisy degradation flag]``."""
    desc = np.asarray(context.descriptor, dtype=float)
    blocks = []
    for m in MODALITIES:
        noisy = desc + rng.normal(0.0, cfg.stem_noise, size=desc.shape)
        flag = (0.0 if health[m] else 1.0) + rng.normal(0.0, cfg.health_noise)
        blocks.append(np.append(noisy, flag))
    return tuple(float(v) for v in np.concatenate(blocks))


def generate_scene(gen_cfg: GeneratorConfig, rng: np.random.Generator, scene_id: int = 0, seed: int = 0) -> Scene:
    """Sample a context, sensor health, stem features and non-overlapping objects."""
    label = _choice(rng, gen_cfg.context_mix)
    onehot = np.zeros(len(CONTEXTS))
    onehot[CONTEXTS.index(label)] = 1.0
    descriptor = onehot + rng.normal(0.0, gen_cfg.descriptor_noise, size=onehot.shape)
    context = Context(label, tuple(descriptor))

    quality = gen_cfg.knowledge.quality[label]
    health = {}
    for m in MODALITIES:
        obstructed = rng.random() < gen_cfg.obstruction_rate
        health[m] = bool(quality[m] and not obstructed)

    d = int(rng.integers(gen_cfg.min_objects, gen_cfg.max_objects + 1))
    objects: List[GroundTruth] = []
    for _ in range(d):
        cls = int(_choice(rng, gen_cfg.class_mix))
        for _attempt in range(gen_cfg.max_retries):
            box = _random_box(rng, cls, gen_cfg.scale_range, gen_cfg.width, gen_cfg.height)
            if not objects:
                break
            existing = np.array([o.box.as_list() for o in objects])
            if iou_matrix(np.array([box.as_list()]), existing).max() <= gen_cfg.max_gt_iou:
                break
        else:
            raise GenerationError(
                f"could not place object {len(objects) + 1} of {d} in scene {scene_id} "
                f"after {gen_cfg.max_retries} tries"
            )
        objects.append(GroundTruth(cls, box))

    features = stem_features(context, health, gen_cfg, rng)
    return Scene(scene_id, context, tuple(objects), seed, gen_cfg.width, gen_cfg.height, health, features)


def _clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def simulate_branch(
    b: BranchModel,
    s: Scene,
    rng: np.random.Generator,
    classes: Sequence[int] = CLASSES,
    scale_range: Tuple[float, float] = (0.7, 1.5),
) -> BranchOutput:
    """Simulated detector output of one branch on one scene."""
    p = b.profile_for(s)
    dets: List[Detection] = []
    for gt in s.objects:
        missed = rng.random() < p.miss_rate
        noise = rng.normal(0.0, p.loc_sigma, size=4) if p.loc_sigma > 0 else np.zeros(4)
        score = _clamp01(rng.normal(p.score_mean, p.score_sigma)) if p.score_sigma > 0 else _clamp01(p.score_mean)
        if missed:
            continue
        c = np.array(gt.box.as_list()) + noise
        box = BoundingBox.from_corners(*c).clip(s.width, s.height)
        if box.area <= 0:
            continue
        dets.append(Detection(box, score, gt.label, b.id))
    n_fp = int(rng.poisson(p.fp_rate))
    for _ in range(n_fp):
        label = int(classes[int(rng.integers(len(classes)))])
        box = _random_box(rng, label, scale_range, s.width, s.height)
        score = _clamp01(rng.normal(p.score_mean, p.score_sigma)) if p.score_sigma > 0 else _clamp01(p.score_mean)
        dets.append(Detection(box, score, label, b.id))
    return BranchOutput(b.id, tuple(dets), tuple(s.features))


# ---------------------------------------------------------------------------
# Detection log: line-delimited JSON, optional header, one record per (scene, branch)

LOG_FORMAT = "selective-fusion-detlog"


def _record(scene: Scene, out: BranchOutput) -> dict:
    return {
        "scene": scene.id,
        "context": scene.context.label,
        "descriptor": list(scene.context.descriptor),
        "image_size": [scene.width, scene.height],
        "gt": [{"label": g.label, "box": g.box.as_list()} for g in scene.objects],
        "branch": out.branch,
        "features": list(out.features),
        "dets": [{"label": d.label, "score": d.score, "box": d.box.as_list()} for d in out.detections],
    }


def write_detection_log(path, entries: Iterable[Tuple[Scene, Mapping[int, BranchOutput]]], branches=None) -> int:
    """Write a header line plus one record per (scene, branch); returns the record count."""
    entries = list(entries)
    branch_ids = sorted(branches) if branches is not None else sorted({b for _, outs in entries for b in outs})
    header = {"header": {"format": LOG_FORMAT, "version": 1, "scenes": len(entries), "branches": branch_ids}}
    n = 0
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for scene, outs in entries:
            for bid in sorted(outs):
                fh.write(json.dumps(_record(scene, outs[bid]), sort_keys=True) + "\n")
                n += 1
    return n


def _parse_box(raw, lineno) -> BoundingBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ParseError(f"box must be a list of 4 numbers, got {raw!r}", lineno)
    try:
        vals = [float(v) for v in raw]
        return BoundingBox(*vals)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad box {raw!r}: {exc}", lineno) from None


def _parse_label(raw, lineno) -> int:
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ParseError(f"label must be an integer, got {raw!r}", lineno)
    return raw


def read_log_header(path) -> Optional[dict]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    return None
                return obj.get("header") if isinstance(obj, dict) else None
    return None


def load_detection_log(path, branches: Optional[Iterable[int]] = None) -> Dict[object, Tuple[Scene, Dict[int, BranchOutput]]]:
    """Parse a detection log into ``{scene id: (Scene, {branch: BranchOutput})}``.

    Branch ids are checked against ``branches`` if given, else against the
    header's branch list, else against the default seven branches.
    """
    allowed = set(branches) if branches is not None else None
    scenes: Dict[object, Scene] = {}
    outputs: Dict[object, Dict[int, BranchOutput]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record must be a JSON object", lineno)
            if "header" in rec:
                hdr = rec["header"]
                if allowed is None and isinstance(hdr, dict) and "branches" in hdr:
                    allowed = set(hdr["branches"])
                continue
            if allowed is None:
                allowed = {bid for bid, _, _ in DEFAULT_BRANCHES}
            missing = [k for k in ("scene", "context", "gt", "branch", "dets") if k not in rec]
            if missing:
                raise ParseError(f"missing keys {missing}", lineno)
            bid = rec["branch"]
            if isinstance(bid, bool) or not isinstance(bid, int):
                raise ParseError(f"branch id must be an integer, got {bid!r}", lineno)
            if bid not in allowed:
                raise SchemaError(f"line {lineno}: unknown branch id {bid}")
            if rec["context"] not in CONTEXTS:
                raise SchemaError(f"line {lineno}: unknown context {rec['context']!r}")
            sid = rec["scene"]
            try:
                gts = tuple(GroundTruth(_parse_label(g["label"], lineno), _parse_box(g["box"], lineno)) for g in rec["gt"])
                dets = []
                for dd in rec["dets"]:
                    score = float(dd["score"])
                    if not 0.0 <= score <= 1.0:
                        raise ParseError(f"score {score} outside [0, 1]", lineno)
                    dets.append(Detection(_parse_box(dd["box"], lineno), score, _parse_label(dd["label"], lineno), bid))
                features = tuple(float(v) for v in rec.get("features", ()))
                descriptor = tuple(float(v) for v in rec.get("descriptor", ()))
                width, height = (float(v) for v in rec.get("image_size", (1280.0, 720.0)))
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(f"malformed record: {exc!r}", lineno) from None
            if sid not in scenes:
                ctx = Context(rec["context"], descriptor)
                scenes[sid] = Scene(sid, ctx, gts, 0, width, height, {}, features)
                outputs[sid] = {}
            else:
                prev = scenes[sid]
                if prev.context.label != rec["context"] or prev.objects != gts:
                    raise SchemaError(f"line {lineno}: scene {sid!r} disagrees with earlier records")
            if bid in outputs[sid]:
                raise SchemaError(f"line {lineno}: duplicate record for scene {sid!r} branch {bid}")
            outputs[sid][bid] = BranchOutput(bid, tuple(dets), features)
    return {sid: (scenes[sid], outputs[sid]) for sid in scenes}


def profile_table(branches: Sequence[BranchModel]) -> Dict[str, Dict[str, ErrorProfile]]:
    return {b.name: dict(b.profile) for b in branches}
