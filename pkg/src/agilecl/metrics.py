"""Accuracy matrices, forgetting, stability/plasticity, calibration, task confusion
and the within-task / task-id cross-entropy split."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from agilecl import _kernels
from agilecl.model import CLASS_IL, TASK_IL, AgileModel, predict_from_logits
from agilecl.stream import TaskStream
from agilecl.tensor import softmax_np


@dataclass
class AccuracyMatrix:
    """``a[i, j]`` = accuracy on task ``j`` after training task ``i`` (NaN for ``j > i``).

    ``trace`` holds every intermediate evaluation as ``(trained_task, accs)``
    rows, e.g. one per epoch.
    """

    a: np.ndarray
    trace: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ValueError(f"accuracy matrix must be square, got {self.a.shape}")
        lower = self.a[np.tril_indices(self.n_tasks)]
        if np.isnan(lower).any() or (lower < 0).any() or (lower > 1).any():
            raise ValueError("accuracy entries on and below the diagonal must lie in [0, 1]")

    @property
    def n_tasks(self) -> int:
        return self.a.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.a[-1]

    @classmethod
    def from_rows(cls, rows, trace=None) -> "AccuracyMatrix":
        a = np.array([[np.nan if v is None else v for v in r] for r in rows], dtype=np.float64)
        tr = [(int(e["task"]), np.asarray(e["acc"], dtype=np.float64)) for e in (trace or [])]
        return cls(a, tr)


def evaluate_accuracy(m: AgileModel, stream: TaskStream, mode: str = CLASS_IL,
                      upto: int | None = None) -> list[float]:
    """Per-task test accuracy under Class-IL or Task-IL prediction."""
    upto = m.current_task if upto is None else upto
    x, y = stream.test_set(upto)
    tasks = stream.task_of(y)
    logits = m.logits(x)
    pred = predict_from_logits(logits, stream.classes_per_task, mode,
                               tasks if mode == TASK_IL else None)
    return [float(np.mean(pred[tasks == j] == y[tasks == j])) for j in range(upto + 1)]


def best_accuracies(acc: AccuracyMatrix, use_trace: bool = True) -> np.ndarray:
    """Best accuracy ever seen on each task, from the boundary rows and optionally the trace."""
    n = acc.n_tasks
    best = np.array([np.max(acc.a[t:, t]) for t in range(n)])
    if use_trace:
        for trained, accs in acc.trace:
            k = min(len(accs), n)
            best[:k] = np.maximum(best[:k], accs[:k])
    return best


def forgetting_measure(acc: AccuracyMatrix, use_trace: bool = True) -> float:
    """Mean over earlier tasks of best-ever accuracy minus final accuracy."""
    n = acc.n_tasks
    if n < 2:
        raise ValueError("forgetting needs at least two tasks")
    best = best_accuracies(acc, use_trace)
    return float(np.mean(best[:-1] - acc.final[:-1]))


def stability_plasticity(acc: AccuracyMatrix) -> tuple[float, float, float]:
    """``(S, P, trade-off)``: final accuracy on earlier tasks, first-time accuracy,
    and their harmonic mean. With a single task S is that task's accuracy."""
    n = acc.n_tasks
    s = float(np.mean(acc.final[:-1])) if n > 1 else float(acc.a[0, 0])
    p = float(np.mean(np.diag(acc.a)))
    return s, p, harmonic_tradeoff(s, p)


def harmonic_tradeoff(s: float, p: float) -> float:
    if s + p == 0:
        return 0.0
    return 2.0 * s * p / (s + p)


# ------------------------------------------------------------- calibration

@dataclass
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    mean_confidence: np.ndarray
    mean_accuracy: np.ndarray

    def to_tsv(self) -> str:
        lines = ["bin_lo\tbin_hi\tcount\tmean_confidence\tmean_accuracy"]
        for k in range(len(self.counts)):
            lines.append(f"{self.edges[k]!r}\t{self.edges[k + 1]!r}\t{int(self.counts[k])}\t"
                         f"{self.mean_confidence[k]!r}\t{self.mean_accuracy[k]!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(),
                "mean_confidence": self.mean_confidence.tolist(),
                "mean_accuracy": self.mean_accuracy.tolist()}


def bin_index(confidences: np.ndarray, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bins over [0, 1]; bin ``k`` covers ``(edge_k, edge_{k+1}]``, bin 0 also holds 0."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return np.searchsorted(edges[1:-1], confidences, side="left").astype(np.int64), edges


def ece(confidences, correct, n_bins: int = 10) -> tuple[float, ReliabilityBins]:
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hit = np.asarray(correct).reshape(-1).astype(bool)
    if conf.size == 0:
        raise ValueError("ECE of an empty sample is undefined")
    if conf.shape != hit.shape:
        raise ValueError(f"{conf.size} confidences vs {hit.size} correctness flags")
    if conf.min() < 0 or conf.max() > 1:
        raise ValueError("confidences must lie in [0, 1]")
    idx, edges = bin_index(conf, n_bins)
    counts, conf_sum, acc_sum = _kernels.reliability_counts(idx, conf, hit, n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), 0.0)
        mean_acc = np.where(counts > 0, acc_sum / np.maximum(counts, 1), 0.0)
    value = float(np.sum(counts / conf.size * np.abs(mean_acc - mean_conf)))
    return value, ReliabilityBins(edges, counts, mean_conf, mean_acc)


def model_calibration(m: AgileModel, stream: TaskStream, n_bins: int = 10):
    """ECE of Class-IL predictions on the test sets of all seen tasks."""
    x, y = stream.test_set(m.current_task)
    probs = softmax_np(m.logits(x))
    pred = probs.argmax(axis=1)
    return ece(probs.max(axis=1), pred == y, n_bins)


# --------------------------------------------------------- task confusion

@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def n_tasks(self) -> int:
        return self.counts.shape[0]

    def diagonal_fraction(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def column_fraction(self, j: int) -> float:
        return float(self.counts[:, j].sum() / self.counts.sum())

    def to_tsv(self) -> str:
        n = self.n_tasks
        lines = ["true\\pred\t" + "\t".join(f"task{j}" for j in range(n))]
        for i in range(n):
            lines.append(f"task{i}\t" + "\t".join(str(int(v)) for v in self.counts[i]))
        return "\n".join(lines) + "\n"


def confusion_from_predictions(true_task, pred_task, n_tasks: int) -> ConfusionMatrix:
    t = np.asarray(true_task, dtype=np.int64)
    p = np.asarray(pred_task, dtype=np.int64)
    return ConfusionMatrix(_kernels.confusion_counts(t, p, n_tasks))


def task_confusion(m: AgileModel, stream: TaskStream) -> ConfusionMatrix:
    """Rows: true task; columns: task block holding the Class-IL argmax."""
    upto = m.current_task
    x, y = stream.test_set(upto)
    pred = m.logits(x).argmax(axis=1)
    return confusion_from_predictions(stream.task_of(y), pred // stream.classes_per_task, upto + 1)


# ---------------------------------------------------- WP / TP decomposition

@dataclass
class DecompositionRecord:
    h_wp: np.ndarray
    h_tp: np.ndarray
    h_cil: np.ndarray
    valid: np.ndarray      # task marginal of the true task > threshold

    @property
    def residual(self) -> np.ndarray:
        return self.h_cil - (self.h_wp + self.h_tp)

    def means(self) -> dict[str, float]:
        v = self.valid
        return {"h_wp": float(self.h_wp[v].mean()), "h_tp": float(self.h_tp[v].mean()),
                "h_cil": float(self.h_cil[v].mean()),
                "max_abs_residual": float(np.abs(self.residual[v]).max()) if v.any() else 0.0}


def wp_tp_decomposition(probs, labels, classes_per_task: int,
                        min_task_prob: float = 1e-12, atol: float = 1e-9) -> DecompositionRecord:
    """Split each sample's class cross-entropy into within-task and task-id parts.

    ``probs`` is an ``(n, T*J)`` row-stochastic matrix over global classes.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, width = p.shape
    if width % classes_per_task:
        raise ValueError(f"{width} columns is not a multiple of {classes_per_task}")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > atol:
        raise ValueError("probabilities must be non-negative with rows summing to 1")
    rows = np.arange(n)
    task = y // classes_per_task
    p_task = p.reshape(n, -1, classes_per_task).sum(axis=2)[rows, task]
    p_cls = p[rows, y]
    valid = p_task > min_task_prob
    with np.errstate(divide="ignore", invalid="ignore"):
        h_tp = -np.log(p_task)
        h_cil = -np.log(p_cls)
        h_wp = np.where(valid, -np.log(p_cls / np.where(valid, p_task, 1.0)), np.nan)
    return DecompositionRecord(h_wp, h_tp, h_cil, valid)


def model_decomposition(m: AgileModel, stream: TaskStream) -> DecompositionRecord:
    x, y = stream.test_set(m.current_task)
    return wp_tp_decomposition(softmax_np(m.logits(x)), y, stream.classes_per_task)


# ------------------------------------------------------------- full suite

def run_metrics(m: AgileModel, stream: TaskStream, acc_class_il, acc_task_il,
                epoch_trace=None, n_bins: int = 10) -> dict:
    """Every scalar metric of a finished run; ``m`` is the model used for inference.

    Pass ``epoch_trace`` to take best-ever accuracies from per-epoch evaluations.
    """
    cil = AccuracyMatrix.from_rows(acc_class_il, epoch_trace)
    til = AccuracyMatrix.from_rows(acc_task_il)
    s, p, tradeoff = stability_plasticity(cil)
    ece_value, bins = model_calibration(m, stream, n_bins)
    confusion = task_confusion(m, stream)
    out = {
        "class_il": float(np.mean(cil.final)),
        "task_il": float(np.mean(til.final)),
        "forgetting": forgetting_measure(cil, use_trace=epoch_trace is not None)
        if cil.n_tasks > 1 else None,
        "stability": s,
        "plasticity": p,
        "tradeoff": tradeoff,
        "ece": ece_value,
        "confusion_diagonal": confusion.diagonal_fraction(),
        "confusion_last_column": confusion.column_fraction(confusion.n_tasks - 1),
    }
    out.update(model_decomposition(m, stream).means())
    return {"scalars": out, "reliability": bins, "confusion": confusion}
