"""End-to-end selective fusion: features -> gate -> top-k branches -> fusion block.

Random streams are keyed by ``(master seed, stream, scene id, branch id)`` so
every configuration in an experiment sees the same scenes and the same
branch outputs, and adding or reordering configurations changes nothing else.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from selective_fusion.boxfusion import Detection, FusionConfig, fuse
from selective_fusion.errors import ConfigError, DataError, SchemaError
from selective_fusion.gating import (
    GateHyperParams,
    GateRanking,
    KnowledgeTable,
    LearnedGate,
    LossWeights,
    branch_loss,
    knowledge_rank,
    learned_rank,
    optimal_rank,
    select_top_k,
    train_gate,
)
from selective_fusion.scenario import (
    CLASSES,
    MODALITIES,
    BranchModel,
    BranchOutput,
    GeneratorConfig,
    Scene,
    default_branch_set,
    generate_scene,
    load_detection_log,
    simulate_branch,
)
from selective_fusion.scoring import EvalReport, evaluate

TEST_STREAM = 0
TRAIN_STREAM = 1
GATE_STREAM = 2
_SCENE_TAG = 0
_BRANCH_TAG = 1

PIPELINE_GATES = ("none", "knowledge", "learned", "attention", "optimal")


def stream_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _loss(source, sid, bid, loss_weights: LossWeights) -> float:
    """Realized branch loss, memoized on the source (does not count as a branch call)."""
    key = (sid, bid, loss_weights.miss, loss_weights.false_positive)
    cache = source.__dict__.setdefault("_losses", {})
    if key not in cache:
        calls = source.calls.get(sid, 0)
        dets = source.run_branch(sid, bid).detections
        source.calls[sid] = calls
        cache[key] = branch_loss(dets, source.scene(sid).objects, loss_weights)
    return cache[key]


# ---------------------------------------------------------------------------
# Scene sources


class SimulatedSource:
    """Scenes and branch outputs drawn on demand from seeded streams."""

    def __init__(self, gen_cfg: GeneratorConfig, branches: Sequence[BranchModel], seed: int, n_scenes: int, stream: int = TEST_STREAM):
        self.gen_cfg = gen_cfg
        self.branches = {b.id: b for b in branches}
        self.seed = int(seed)
        self.stream = int(stream)
        self.n_scenes = int(n_scenes)
        self.calls: Dict[int, int] = {}
        self._scenes: Dict[int, Scene] = {}
        self._outputs: Dict[Tuple[int, int], BranchOutput] = {}
        self._losses: Dict[tuple, float] = {}

    @property
    def branch_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.branches))

    def scene_ids(self) -> List[int]:
        return list(range(self.n_scenes))

    def scene(self, sid: int) -> Scene:
        if sid not in self._scenes:
            rng = stream_rng(self.seed, self.stream, sid, _SCENE_TAG)
            self._scenes[sid] = generate_scene(self.gen_cfg, rng, sid, self.seed)
        return self._scenes[sid]

    def run_branch(self, sid: int, bid: int) -> BranchOutput:
        if bid not in self.branches:
            raise ConfigError(f"unknown branch {bid}")
        self.calls[sid] = self.calls.get(sid, 0) + 1
        key = (sid, bid)
        if key not in self._outputs:
            rng = stream_rng(self.seed, self.stream, sid, _BRANCH_TAG, bid)
            self._outputs[key] = simulate_branch(
                self.branches[bid], self.scene(sid), rng, scale_range=self.gen_cfg.scale_range
            )
        return self._outputs[key]

    def reset_calls(self) -> None:
        self.calls.clear()


class LogSource:
    """Scenes and branch outputs replayed from a detection log."""

    def __init__(self, entries: Mapping, branch_ids: Optional[Sequence[int]] = None):
        self.entries = dict(entries)
        ids = set(branch_ids) if branch_ids is not None else {b for _, outs in self.entries.values() for b in outs}
        self._branch_ids = tuple(sorted(ids))
        self.calls: Dict[object, int] = {}
        self._losses: Dict[tuple, float] = {}

    @classmethod
    def from_path(cls, path, branch_ids: Optional[Sequence[int]] = None) -> "LogSource":
        return cls(load_detection_log(path, branch_ids), branch_ids)

    @property
    def branch_ids(self) -> Tuple[int, ...]:
        return self._branch_ids

    def scene_ids(self) -> list:
        return sorted(self.entries, key=lambda s: (str(type(s)), s))

    def scene(self, sid) -> Scene:
        return self.entries[sid][0]

    def run_branch(self, sid, bid) -> BranchOutput:
        self.calls[sid] = self.calls.get(sid, 0) + 1
        try:
            return self.entries[sid][1][bid]
        except KeyError:
            raise DataError(f"log has no output for scene {sid!r} branch {bid}") from None

    def reset_calls(self) -> None:
        self.calls.clear()


# ---------------------------------------------------------------------------
# Pipeline


@dataclass(frozen=True)
class PipelineConfig:
    id: str
    gate: str = "none"
    k: int = 1
    fusion: FusionConfig = field(default_factory=FusionConfig)
    # Fixed branch set for gate "none"; ignored otherwise.
    branches: Tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.gate not in PIPELINE_GATES:
            raise ConfigError(f"unknown gate {self.gate!r}; expected one of {PIPELINE_GATES}")
        object.__setattr__(self, "branches", tuple(int(b) for b in self.branches))
        if self.gate == "none":
            if not self.branches:
                raise ConfigError(f"configuration {self.id!r} has no gate and no branch set")
            object.__setattr__(self, "k", len(self.branches))
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")

    @classmethod
    def from_dict(cls, d: Mapping, default_fusion: Optional[Mapping] = None) -> "PipelineConfig":
        d = dict(d)
        known = {"id", "gate", "k", "fusion", "branches", "seed", "gate_path"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        fusion = dict(default_fusion or {})
        fusion.update(d.get("fusion") or {})
        if "id" not in d:
            raise ConfigError("configuration needs an id")
        return cls(
            id=str(d["id"]),
            gate=d.get("gate", "none"),
            k=int(d.get("k", 1)),
            fusion=FusionConfig.from_dict(fusion),
            branches=tuple(d.get("branches", ())),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        out = {"id": self.id, "gate": self.gate, "k": self.k, "fusion": self.fusion.to_dict(), "seed": self.seed}
        if self.branches:
            out["branches"] = list(self.branches)
        return out


@dataclass
class SceneTrace:
    scene: object
    context: str
    ranking: GateRanking
    selected: Tuple[int, ...]
    branch_detections: Dict[int, Tuple[Detection, ...]]
    fused: List[Detection]

    def to_dict(self) -> dict:
        return {
            "scene": self.scene,
            "context": self.context,
            "ranking": self.ranking.to_dict(),
            "selected": list(self.selected),
            "branch_detections": {
                str(b): [d.to_dict() for d in dets] for b, dets in sorted(self.branch_detections.items())
            },
            "fused": [dict(d.to_dict(), branch=d.branch) for d in self.fused],
        }


@dataclass
class RunTrace:
    config: str
    gate: str
    k: int
    seed: int
    records: List[SceneTrace] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "gate": self.gate,
            "k": self.k,
            "seed": self.seed,
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunTrace":
        """Rebuild the selection part of a trace; detections are not restored."""
        try:
            records = []
            for r in d["records"]:
                rk = r["ranking"]
                ranking = GateRanking({int(b): float(v) for b, v in rk["predicted_loss"].items()}, tuple(rk["order"]))
                records.append(SceneTrace(r["scene"], r["context"], ranking, tuple(r["selected"]), {}, []))
            return cls(str(d["config"]), str(d["gate"]), int(d["k"]), int(d["seed"]), records)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad run trace: {exc}") from exc


@dataclass
class GateArtifacts:
    knowledge: Optional[KnowledgeTable] = None
    learned: Optional[LearnedGate] = None
    attention: Optional[LearnedGate] = None


def _rank(scene: Scene, cfg: PipelineConfig, gates: GateArtifacts, branch_ids, losses) -> GateRanking:
    if cfg.gate == "none":
        return GateRanking.from_losses({b: 0.0 for b in cfg.branches})
    if cfg.gate == "optimal":
        return optimal_rank(losses)
    if cfg.gate == "knowledge":
        table = gates.knowledge or KnowledgeTable()
        ranking = knowledge_rank(scene.context, table)
    else:
        gate = getattr(gates, cfg.gate)
        if gate is None:
            raise ConfigError(f"configuration {cfg.id!r} needs a trained {cfg.gate} gate")
        ranking = learned_rank(scene.features, gate)
    if set(ranking.order) != set(branch_ids):
        raise ConfigError(f"{cfg.gate} gate ranks branches {sorted(ranking.order)} but source has {list(branch_ids)}")
    return ranking


def run_pipeline(
    scene_source,
    cfg: PipelineConfig,
    gates: Optional[GateArtifacts] = None,
    loss_weights: LossWeights = LossWeights(),
    keep_trace: bool = True,
) -> Tuple[Dict[object, List[Detection]], RunTrace]:
    """Run one configuration over every scene of a source."""
    gates = gates or GateArtifacts()
    branch_ids = scene_source.branch_ids
    if cfg.gate == "none":
        missing = set(cfg.branches) - set(branch_ids)
        if missing:
            raise ConfigError(f"configuration {cfg.id!r} uses unknown branches {sorted(missing)}")
    elif cfg.k > len(branch_ids):
        raise ConfigError(f"k={cfg.k} exceeds the {len(branch_ids)} available branches")
    fused_all: Dict[object, List[Detection]] = {}
    trace = RunTrace(cfg.id, cfg.gate, cfg.k, cfg.seed)
    for sid in scene_source.scene_ids():
        scene = scene_source.scene(sid)
        outputs: Dict[int, BranchOutput] = {}
        losses = None
        if cfg.gate == "optimal":
            # Ranking needs every branch's realized loss.
            for b in branch_ids:
                outputs[b] = scene_source.run_branch(sid, b)
            losses = {b: _loss(scene_source, sid, b, loss_weights) for b in branch_ids}
        ranking = _rank(scene, cfg, gates, branch_ids, losses)
        selected = select_top_k(ranking, cfg.k)
        for b in selected:
            if b not in outputs:
                outputs[b] = scene_source.run_branch(sid, b)
        fused = fuse({b: outputs[b].detections for b in selected}, cfg.fusion)
        fused_all[sid] = fused
        if keep_trace:
            trace.records.append(
                SceneTrace(sid, scene.context.label, ranking, selected, {b: outputs[b].detections for b in selected}, fused)
            )
        else:
            trace.records.append(SceneTrace(sid, scene.context.label, ranking, selected, {}, []))
    return fused_all, trace


def evaluate_run(scene_source, fused: Mapping, metadata: Optional[Mapping] = None, classes=CLASSES) -> EvalReport:
    sids = scene_source.scene_ids()
    # Post-fusion anonymity: scoring never sees branch ids.
    preds = [[_anonymous(d) for d in fused[s]] for s in sids]
    gts = [scene_source.scene(s).objects for s in sids]
    return evaluate(preds, gts, classes, metadata)


def _anonymous(d: Detection) -> Detection:
    return d if d.branch == 0 else Detection(d.box, d.score, d.label, 0)


# ---------------------------------------------------------------------------
# Gate training data


def gate_training_data(source, loss_weights: LossWeights = LossWeights()) -> Tuple[np.ndarray, np.ndarray]:
    """Stem features and realized per-branch losses for every scene of a source."""
    X, Y = [], []
    bids = source.branch_ids
    for sid in source.scene_ids():
        scene = source.scene(sid)
        X.append(np.asarray(scene.features, dtype=float))
        Y.append([_loss(source, sid, b, loss_weights) for b in bids])
    return np.array(X), np.array(Y)


# ---------------------------------------------------------------------------
# Experiments


@dataclass
class SuiteConfig:
    configurations: List[PipelineConfig]
    generator: Optional[GeneratorConfig] = None
    log_path: Optional[str] = None
    n_scenes: int = 500
    seeds: Tuple[int, ...] = (0,)
    n_train_scenes: int = 2000
    gate_hp: GateHyperParams = field(default_factory=GateHyperParams)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    knowledge: KnowledgeTable = field(default_factory=KnowledgeTable)
    gate_paths: Dict[str, str] = field(default_factory=dict)
    output_dir: Optional[str] = None

    def __post_init__(self):
        ids = [c.id for c in self.configurations]
        if len(set(ids)) != len(ids):
            raise ConfigError("configuration ids must be unique")
        if self.generator is None and self.log_path is None:
            raise ConfigError("suite needs a generator config or a log path")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir=None) -> "SuiteConfig":
        d = dict(d)
        src = d.get("scene_source", {})
        gen = GeneratorConfig.from_dict(src["generator"]) if "generator" in src else None
        log_path = src.get("log")
        if log_path is not None and base_dir is not None:
            log_path = str(Path(base_dir) / log_path)
        default_fusion = d.get("fusion", {})
        configs = [PipelineConfig.from_dict(c, default_fusion) for c in d.get("configurations", [])]
        if "seeds" in d:
            seeds = tuple(int(s) for s in d["seeds"])
        else:
            master = int(d.get("master_seed", 0))
            seeds = tuple(range(master, master + int(d.get("n_seeds", 1))))
        training = dict(d.get("gate_training", {}))
        lw = training.get("loss_weights", {})
        gate_paths = {}
        for c in d.get("configurations", []):
            if "gate_path" in c:
                p = c["gate_path"]
                gate_paths[c.get("gate")] = str(Path(base_dir) / p) if base_dir is not None else p
        if training.get("gate_path"):
            gate_paths.setdefault("learned", training["gate_path"])
        knowledge = KnowledgeTable(d["knowledge_table"]) if "knowledge_table" in d else KnowledgeTable()
        return cls(
            configurations=configs,
            generator=gen,
            log_path=log_path,
            n_scenes=int(d.get("n_scenes", 500)),
            seeds=seeds,
            n_train_scenes=int(training.get("n_scenes", 2000)),
            gate_hp=GateHyperParams.from_dict(training.get("hyperparams")),
            loss_weights=LossWeights(**lw),
            knowledge=knowledge,
            gate_paths=gate_paths,
            output_dir=d.get("output_dir"),
        )


@dataclass
class ExperimentResult:
    reports: List[EvalReport]
    traces: List[RunTrace]
    gate_history: Dict[Tuple[int, str], List[float]] = field(default_factory=dict)

    def maps(self, config_id: str) -> Dict[int, float]:
        """mAP per seed for one configuration."""
        return {r.metadata["seed"]: r.map for r in self.reports if r.metadata["config"] == config_id}

    def comparison(self) -> List[dict]:
        rows = {}
        for r in self.reports:
            m = r.metadata
            row = rows.setdefault(m["config"], {"config": m["config"], "gate": m["gate"], "k": m["k"], "algorithm": m["algorithm"], "maps": []})
            row["maps"].append(r.map)
        out = []
        for cid in sorted(rows):
            row = rows[cid]
            maps = np.array(row.pop("maps"))
            row["n_seeds"] = len(maps)
            row["mean_map"] = float(maps.mean())
            row["std_map"] = float(maps.std(ddof=1)) if len(maps) > 1 else 0.0
            out.append(row)
        return out


def _train_for_seed(suite: SuiteConfig, branches, seed: int, kind: str) -> Tuple[LearnedGate, List[float]]:
    train_src = SimulatedSource(suite.generator, branches, seed, suite.n_train_scenes, TRAIN_STREAM)
    X, Y = gate_training_data(train_src, suite.loss_weights)
    hp = suite.gate_hp
    if kind == "attention":
        hp = GateHyperParams(**dict(hp.to_dict(), attention=True, n_blocks=len(MODALITIES)))
    rng = stream_rng(seed, GATE_STREAM, 0 if kind == "learned" else 1)
    res = train_gate((X, Y), hp, rng, train_src.branch_ids)
    return res.gate, res.history


def run_experiment(suite: SuiteConfig, branches: Optional[Sequence[BranchModel]] = None, keep_traces: bool = False) -> ExperimentResult:
    """Evaluate every configuration on the same scenes for each master seed."""
    branches = list(branches) if branches is not None else default_branch_set(
        suite.generator.knowledge if suite.generator is not None else None
    )
    needed = {c.gate for c in suite.configurations} & {"learned", "attention"}
    reports: List[EvalReport] = []
    traces: List[RunTrace] = []
    history = {}
    seeds = suite.seeds if suite.log_path is None else suite.seeds[:1]
    for seed in seeds:
        if suite.log_path is not None:
            source = LogSource.from_path(suite.log_path, [b.id for b in branches])
        else:
            source = SimulatedSource(suite.generator, branches, seed, suite.n_scenes, TEST_STREAM)
        gates = GateArtifacts(knowledge=suite.knowledge)
        for kind in sorted(needed):
            if kind in suite.gate_paths:
                setattr(gates, kind, LearnedGate.load(suite.gate_paths[kind]))
            elif suite.generator is not None:
                gate, hist = _train_for_seed(suite, branches, seed, kind)
                setattr(gates, kind, gate)
                history[(seed, kind)] = hist
            else:
                raise ConfigError(f"{kind} gate needs a gate_path or a generator to train on")
        for cfg in sorted(suite.configurations, key=lambda c: c.id):
            fused, trace = run_pipeline(source, cfg, gates, suite.loss_weights, keep_trace=keep_traces)
            trace.seed = seed
            meta = {"config": cfg.id, "gate": cfg.gate, "k": cfg.k, "algorithm": cfg.fusion.algorithm, "seed": seed}
            reports.append(evaluate_run(source, fused, meta))
            traces.append(trace)
    return ExperimentResult(reports, traces, history)


def branch_selection_stats(traces: Iterable[RunTrace], contexts: Optional[Iterable[str]] = None) -> Dict[Tuple[str, int], Dict[int, float]]:
    """Fraction of scenes in which each branch was among the selected top-k."""
    contexts = set(contexts) if contexts is not None else None
    counts: Dict[Tuple[str, int], Dict[int, int]] = {}
    totals: Dict[Tuple[str, int], int] = {}
    universe: Dict[Tuple[str, int], set] = {}
    for t in traces:
        key = (t.gate, t.k)
        c = counts.setdefault(key, {})
        u = universe.setdefault(key, set())
        for r in t.records:
            u.update(r.ranking.order)
            if contexts is not None and r.context not in contexts:
                continue
            totals[key] = totals.get(key, 0) + 1
            for b in r.selected:
                c[b] = c.get(b, 0) + 1
    out = {}
    for key, c in counts.items():
        n = totals.get(key, 0)
        out[key] = {b: (c.get(b, 0) / n if n else 0.0) for b in sorted(universe[key])}
    return out


# ---------------------------------------------------------------------------
# Output files


def write_comparison_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "gate", "k", "algorithm", "n_seeds", "mean_map", "std_map"])
        for row in result.comparison():
            w.writerow(
                [row["config"], row["gate"], row["k"], row["algorithm"], row["n_seeds"],
                 f"{100 * row['mean_map']:.4f}", f"{100 * row['std_map']:.4f}"]
            )


def write_selection_csv(stats: Mapping, path, branch_names: Optional[Mapping[int, str]] = None) -> None:
    branch_ids = sorted({b for rates in stats.values() for b in rates})
    names = [branch_names.get(b, str(b)) if branch_names else str(b) for b in branch_ids]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gate", "k"] + names)
        for (gate, k) in sorted(stats):
            rates = stats[(gate, k)]
            w.writerow([gate, k] + [f"{100 * rates.get(b, 0.0):.4f}" for b in branch_ids])


def load_suite(path) -> SuiteConfig:
    path = Path(path)
    return SuiteConfig.from_dict(json.loads(path.read_text()), base_dir=path.parent)
