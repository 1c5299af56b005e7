"""Branch ranking and top-k selection.

Four gates produce a :class:`GateRanking` (predicted loss per branch, lowest
first):

* knowledge: a static context -> ordering table,
* learned: a two-layer ReLU regressor over stem features,
* attention: the same regressor fed with softmax-pooled modality blocks,
* optimal: the realized per-branch losses, known only after the fact.

The learned gates regress per-branch losses with mean absolute error and
plain per-sample gradient descent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from selective_fusion.boxfusion import Detection
from selective_fusion.errors import ConfigError, DivergenceError, InvalidInputError
from selective_fusion.geometry import iou_matrix
from selective_fusion.scoring import MATCH_IOU, GroundTruth

GATE_KINDS = ("knowledge", "learned", "attention", "optimal")


@dataclass(frozen=True)
class GateRanking:
    predicted_loss: Dict[int, float]
    order: Tuple[int, ...]

    @classmethod
    def from_losses(cls, losses: Mapping[int, float]) -> "GateRanking":
        order = tuple(sorted(losses, key=lambda b: (losses[b], b)))
        return cls({b: float(losses[b]) for b in sorted(losses)}, order)

    def to_dict(self) -> dict:
        return {
            "order": list(self.order),
            "predicted_loss": {str(b): v for b, v in sorted(self.predicted_loss.items())},
        }


def select_top_k(r: GateRanking, k: int) -> Tuple[int, ...]:
    if not 1 <= k <= len(r.order):
        raise ConfigError(f"k={k} outside [1, {len(r.order)}]")
    return tuple(r.order[:k])


# ---------------------------------------------------------------------------
# Knowledge gating

# radar=0 lidar=1 left-camera=2 right-camera=3 lr-cameras=4 lidar+radar=5 cameras+lidar=6
_CAMERA_FIRST = [4, 2, 3, 6, 5, 0, 1]
_RADAR_FIRST = [0, 5, 1, 6, 4, 2, 3]
DEFAULT_KNOWLEDGE = {
    "city": _CAMERA_FIRST,
    "motorway": _CAMERA_FIRST,
    "junction": _CAMERA_FIRST,
    "rural": _CAMERA_FIRST,
    "snow": _RADAR_FIRST,
    "fog": _RADAR_FIRST,
    "night": _RADAR_FIRST,
}


@dataclass(frozen=True)
class KnowledgeTable:
    orderings: Mapping[str, Tuple[int, ...]] = field(default_factory=lambda: dict(DEFAULT_KNOWLEDGE))

    def __post_init__(self):
        ords = {str(c): tuple(int(b) for b in o) for c, o in dict(self.orderings).items()}
        branch_sets = {frozenset(o) for o in ords.values()}
        for c, o in ords.items():
            if len(set(o)) != len(o):
                raise ConfigError(f"knowledge ordering for {c!r} repeats a branch")
        if len(branch_sets) > 1:
            raise ConfigError("knowledge orderings must all cover the same branches")
        object.__setattr__(self, "orderings", ords)

    @classmethod
    def load(cls, path) -> "KnowledgeTable":
        return cls(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {c: list(o) for c, o in self.orderings.items()}


def knowledge_rank(ctx, table: KnowledgeTable) -> GateRanking:
    """Look up the stored ordering; losses are the rank positions."""
    label = getattr(ctx, "label", ctx)
    try:
        order = table.orderings[label]
    except KeyError:
        raise KeyError(f"no knowledge ordering for context {label!r}") from None
    return GateRanking({b: float(i) for i, b in enumerate(order)}, tuple(order))


# ---------------------------------------------------------------------------
# Optimal gating and the branch loss it ranks by


def optimal_rank(branch_losses: Mapping[int, float]) -> GateRanking:
    for b, v in branch_losses.items():
        if not (math.isfinite(v) and v >= 0):
            raise InvalidInputError(f"branch {b} has invalid loss {v}")
    return GateRanking.from_losses(branch_losses)


@dataclass(frozen=True)
class LossWeights:
    miss: float = 1.0
    false_positive: float = 0.5


def branch_loss(
    dets: Sequence[Detection],
    gt: Sequence[GroundTruth],
    weights: LossWeights = LossWeights(),
    iou_thresh: float = MATCH_IOU,
) -> float:
    """Detection-level loss of one branch output.

    Detections are matched greedily in score order to the best-overlapping
    unmatched same-class object with IoU >= ``iou_thresh``. The loss is
    ``sum(1 - IoU)`` over matches, plus ``weights.miss`` per unmatched object,
    plus ``weights.false_positive`` times the score of each unmatched detection.
    """
    gt_boxes = np.array([g.box.as_list() for g in gt]).reshape(-1, 4)
    gt_labels = np.array([g.label for g in gt], dtype=int)
    det_boxes = np.array([d.box.as_list() for d in dets]).reshape(-1, 4)
    overlaps = iou_matrix(det_boxes, gt_boxes)
    used = np.zeros(len(gt), dtype=bool)
    loss = 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].branch, i))
    for i in order:
        cand = (gt_labels == dets[i].label) & ~used
        if cand.any():
            ious = np.where(cand, overlaps[i], -1.0)
            j = int(np.argmax(ious))
            if ious[j] >= iou_thresh:
                used[j] = True
                loss += 1.0 - ious[j]
                continue
        loss += weights.false_positive * dets[i].score
    loss += weights.miss * float((~used).sum())
    return float(loss)


# ---------------------------------------------------------------------------
# Learned gates


@dataclass
class LearnedGate:
    """Two-layer ReLU regressor from stem features to per-branch losses.

    With ``attention_enabled`` the features are split into ``n_blocks`` equal
    modality blocks; block scores ``block . attention`` are softmaxed and the
    weighted block average is prepended to the raw features.
    """

    input_dim: int
    hidden_dim: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    branches: Tuple[int, ...]
    attention_enabled: bool = False
    n_blocks: int = 1
    attention: np.ndarray = field(default_factory=lambda: np.zeros(0))

    PARAMS = ("W1", "b1", "W2", "b2", "attention")

    def __post_init__(self):
        self.branches = tuple(int(b) for b in self.branches)
        mlp_in = self.mlp_input_dim
        expected = {
            "W1": (self.hidden_dim, mlp_in),
            "b1": (self.hidden_dim,),
            "W2": (len(self.branches), self.hidden_dim),
            "b2": (len(self.branches),),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise InvalidInputError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        att = np.asarray(self.attention, dtype=float).reshape(-1)
        if self.attention_enabled and att.shape != (self.block_dim,):
            raise InvalidInputError(f"attention has shape {att.shape}, expected {(self.block_dim,)}")
        self.attention = att

    @property
    def block_dim(self) -> int:
        if self.input_dim % self.n_blocks:
            raise InvalidInputError(f"input_dim {self.input_dim} not divisible into {self.n_blocks} blocks")
        return self.input_dim // self.n_blocks

    @property
    def mlp_input_dim(self) -> int:
        return self.input_dim + (self.block_dim if self.attention_enabled else 0)

    def params(self) -> Dict[str, np.ndarray]:
        names = self.PARAMS if self.attention_enabled else self.PARAMS[:4]
        return {n: getattr(self, n) for n in names}

    def copy(self) -> "LearnedGate":
        return LearnedGate(
            self.input_dim, self.hidden_dim, self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(),
            self.branches, self.attention_enabled, self.n_blocks, self.attention.copy(),
        )

    # -- forward / backward ------------------------------------------------

    def attention_weights(self, x: np.ndarray) -> np.ndarray:
        blocks = np.asarray(x, dtype=float).reshape(self.n_blocks, self.block_dim)
        s = blocks @ self.attention
        s = s - s.max()
        e = np.exp(s)
        return e / e.sum()

    def _forward(self, x: np.ndarray):
        if self.attention_enabled:
            blocks = x.reshape(self.n_blocks, self.block_dim)
            a = self.attention_weights(x)
            z = np.concatenate([a @ blocks, x])
        else:
            blocks = a = None
            z = x
        pre = self.W1 @ z + self.b1
        h = np.maximum(pre, 0.0)
        out = self.W2 @ h + self.b2
        return out, (z, pre, h, blocks, a)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.input_dim:
            raise InvalidInputError(f"feature length {x.shape[0]} != gate input_dim {self.input_dim}")
        return self._forward(x)[0]

    def sample_loss(self, x, target) -> float:
        """Mean absolute error over branches for one sample."""
        return float(np.mean(np.abs(self.predict(x) - np.asarray(target, dtype=float))))

    def gradients(self, x, target) -> Tuple[float, Dict[str, np.ndarray]]:
        """Analytic gradient of :meth:`sample_loss` with respect to every parameter."""
        x = np.asarray(x, dtype=float).reshape(-1)
        out, (z, pre, h, blocks, a) = self._forward(x)
        diff = out - np.asarray(target, dtype=float)
        n_out = diff.shape[0]
        g_out = np.sign(diff) / n_out
        grads = {"W2": np.outer(g_out, h), "b2": g_out}
        g_pre = (self.W2.T @ g_out) * (pre > 0)
        grads["W1"] = np.outer(g_pre, z)
        grads["b1"] = g_pre
        if self.attention_enabled:
            g_pooled = (self.W1.T @ g_pre)[: self.block_dim]
            g_a = blocks @ g_pooled
            g_s = a * (g_a - a @ g_a)
            grads["attention"] = g_s @ blocks
        return float(np.mean(np.abs(diff))), grads

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "branches": list(self.branches),
            "attention_enabled": self.attention_enabled,
            "n_blocks": self.n_blocks,
            "W1": self.W1.ravel().tolist(),
            "b1": self.b1.tolist(),
            "W2": self.W2.ravel().tolist(),
            "b2": self.b2.tolist(),
            "attention": self.attention.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LearnedGate":
        hidden, n_in, n_out = int(d["hidden_dim"]), int(d["input_dim"]), len(d["branches"])
        att_on = bool(d.get("attention_enabled", False))
        n_blocks = int(d.get("n_blocks", 1))
        mlp_in = n_in + (n_in // n_blocks if att_on else 0)
        return cls(
            n_in, hidden,
            np.asarray(d["W1"], dtype=float).reshape(hidden, mlp_in),
            np.asarray(d["b1"], dtype=float),
            np.asarray(d["W2"], dtype=float).reshape(n_out, hidden),
            np.asarray(d["b2"], dtype=float),
            tuple(d["branches"]), att_on, n_blocks,
            np.asarray(d.get("attention", []), dtype=float),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "LearnedGate":
        return cls.from_dict(json.loads(Path(path).read_text()))


def learned_rank(features, gate: LearnedGate) -> GateRanking:
    """Rank branches by the gate's predicted loss (clamped at zero)."""
    pred = gate.predict(features)
    return GateRanking.from_losses({b: max(float(v), 0.0) for b, v in zip(gate.branches, pred)})


@dataclass(frozen=True)
class GateHyperParams:
    hidden_dim: int = 64
    epochs: int = 200
    learning_rate: float = 5e-5
    init_scale: float = 0.1
    attention: bool = False
    n_blocks: int = 1

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "GateHyperParams":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown gate hyperparameters {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def init_gate(input_dim: int, branches: Sequence[int], hp: GateHyperParams, rng: np.random.Generator) -> LearnedGate:
    s = hp.init_scale
    n_blocks = hp.n_blocks if hp.attention else 1
    block_dim = input_dim // n_blocks
    mlp_in = input_dim + (block_dim if hp.attention else 0)
    n_out = len(branches)
    return LearnedGate(
        input_dim,
        hp.hidden_dim,
        rng.uniform(-s, s, size=(hp.hidden_dim, mlp_in)),
        rng.uniform(-s, s, size=hp.hidden_dim),
        rng.uniform(-s, s, size=(n_out, hp.hidden_dim)),
        rng.uniform(-s, s, size=n_out),
        tuple(branches),
        hp.attention,
        n_blocks,
        rng.uniform(-s, s, size=block_dim) if hp.attention else np.zeros(0),
    )


def dataset_mae(gate: LearnedGate, X: np.ndarray, Y: np.ndarray) -> float:
    """Mean absolute error of the gate over a whole dataset (vectorized)."""
    X = np.asarray(X, dtype=float)
    if gate.attention_enabled:
        blocks = X.reshape(len(X), gate.n_blocks, gate.block_dim)
        s = blocks @ gate.attention
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=1, keepdims=True)
        Z = np.concatenate([np.einsum("nb,nbd->nd", a, blocks), X], axis=1)
    else:
        Z = X
    H = np.maximum(Z @ gate.W1.T + gate.b1, 0.0)
    P = H @ gate.W2.T + gate.b2
    return float(np.mean(np.abs(P - Y)))


@dataclass
class TrainingResult:
    gate: LearnedGate
    # MAE over the training set before training (entry 0) and after each epoch
    history: List[float]
    # Same, over the optional held-out set
    val_history: List[float] = field(default_factory=list)


def train_gate(
    samples,
    hp: GateHyperParams,
    rng: np.random.Generator,
    branches: Optional[Sequence[int]] = None,
    backend: str = "compiled",
    validation=None,
) -> TrainingResult:
    """Fit a learned gate to ``(features, per-branch losses)`` samples.

    Batch size is one; samples are visited in a fresh random order each epoch.
    ``samples`` may be a list of pairs or an ``(X, Y)`` tuple of arrays.
    ``backend="numpy"`` steps with :meth:`LearnedGate.gradients` directly
    (slow, used as the reference for the compiled epochs). ``validation`` is an
    optional held-out ``(X, Y)`` whose MAE is tracked alongside training.
    """
    if backend not in ("compiled", "numpy"):
        raise ConfigError(f"unknown training backend {backend!r}")
    X, Y = _as_arrays(samples)
    if len(X) == 0:
        raise ConfigError("gate training needs at least one sample")
    if branches is None:
        branches = tuple(range(Y.shape[1]))
    if len(branches) != Y.shape[1]:
        raise ConfigError(f"{len(branches)} branches but targets have {Y.shape[1]} columns")
    gate = init_gate(X.shape[1], branches, hp, rng)
    history = [dataset_mae(gate, X, Y)]
    Xv, Yv = _as_arrays(validation) if validation is not None else (None, None)
    val_history = [dataset_mae(gate, Xv, Yv)] if Xv is not None and len(Xv) else []
    lr = hp.learning_rate
    names = list(gate.params())
    X = np.ascontiguousarray(X)
    Y = np.ascontiguousarray(Y)
    for _ in range(hp.epochs):
        order = rng.permutation(len(X))
        if backend == "compiled":
            _compiled_epoch(gate, X, Y, order, lr)
        else:
            for i in order:
                loss, grads = gate.gradients(X[i], Y[i])
                if not math.isfinite(loss):
                    raise DivergenceError("non-finite training loss")
                for n in names:
                    getattr(gate, n)[...] -= lr * grads[n]
        mae = dataset_mae(gate, X, Y)
        if not math.isfinite(mae):
            raise DivergenceError("non-finite training loss")
        history.append(mae)
        if val_history:
            val_history.append(dataset_mae(gate, Xv, Yv))
    return TrainingResult(gate, history, val_history)


def _compiled_epoch(gate: LearnedGate, X, Y, order, lr) -> None:
    from selective_fusion import _kernels

    if gate.attention_enabled:
        _kernels.sgd_epoch_attention(
            gate.W1, gate.b1, gate.W2, gate.b2, gate.attention, X, Y, order, lr, gate.n_blocks, gate.block_dim
        )
    else:
        _kernels.sgd_epoch_mlp(gate.W1, gate.b1, gate.W2, gate.b2, X, Y, order, lr)


def _as_arrays(samples) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        X, Y = samples
    else:
        samples = list(samples)
        if not samples:
            return np.zeros((0, 0)), np.zeros((0, 0))
        X = np.array([np.asarray(f, dtype=float) for f, _ in samples])
        Y = np.array([_loss_vector(t) for _, t in samples])
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ConfigError("inconsistent training sample dimensions")
    return X, Y


def _loss_vector(t) -> np.ndarray:
    if isinstance(t, Mapping):
        return np.array([t[b] for b in sorted(t)], dtype=float)
    return np.asarray(t, dtype=float)


def numerical_gradients(gate: LearnedGate, x, target, step: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central finite-difference gradient of the per-sample MAE."""
    out = {}
    for name, arr in gate.params().items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = gate.sample_loss(x, target)
            flat[j] = orig - step
            down = gate.sample_loss(x, target)
            flat[j] = orig
            gflat[j] = (up - down) / (2 * step)
        out[name] = g
    return out
