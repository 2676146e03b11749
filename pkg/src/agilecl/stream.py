"""Disjoint-class task streams and the reservoir replay buffer."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from agilecl import _kernels


@dataclass(frozen=True)
class StreamConfig:
    n_tasks: int = 5
    classes_per_task: int = 2
    input_dim: int = 16
    train_per_class: int = 500
    test_per_class: int = 100
    cluster_spread: float = 1.0
    cluster_separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_tasks", "classes_per_task", "input_dim",
                     "train_per_class", "test_per_class"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValueError(f"StreamConfig.{name} must be a positive integer, got {value!r}")
        for name in ("cluster_spread", "cluster_separation"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"StreamConfig.{name} must be positive, got {value!r}")

    @property
    def n_classes(self) -> int:
        return self.n_tasks * self.classes_per_task

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TaskDataset:
    task_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def classes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.y_train, self.y_test]))


@dataclass
class TaskStream:
    tasks: list[TaskDataset]
    classes_per_task: int
    input_dim: int
    class_means: np.ndarray | None = None

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_classes(self) -> int:
        return self.n_tasks * self.classes_per_task

    def task_of(self, labels: np.ndarray) -> np.ndarray:
        return np.asarray(labels) // self.classes_per_task

    def test_set(self, upto: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated test data of tasks ``0..upto`` (all tasks by default)."""
        chosen = self.tasks if upto is None else self.tasks[: upto + 1]
        return (np.concatenate([t.x_test for t in chosen]),
                np.concatenate([t.y_test for t in chosen]))


def make_split_gaussian_stream(cfg: StreamConfig) -> TaskStream:
    """Isotropic Gaussian class clusters split into contiguous tasks.

    Class means are uniform in ``[-separation, separation]^dim``; samples are
    ``mean + spread * N(0, I)``. Class ``j`` of task ``t`` is global label
    ``t * J + j``.
    """
    rng = np.random.default_rng(cfg.seed)
    n_cls, dim = cfg.n_classes, cfg.input_dim
    means = rng.uniform(-1.0, 1.0, size=(n_cls, dim)) * cfg.cluster_separation
    n_tr, n_te = cfg.train_per_class, cfg.test_per_class
    tasks = []
    for t in range(cfg.n_tasks):
        xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
        for j in range(cfg.classes_per_task):
            c = t * cfg.classes_per_task + j
            draw = means[c] + cfg.cluster_spread * rng.standard_normal((n_tr + n_te, dim))
            xs_tr.append(draw[:n_tr])
            xs_te.append(draw[n_tr:])
            ys_tr.append(np.full(n_tr, c, dtype=np.int64))
            ys_te.append(np.full(n_te, c, dtype=np.int64))
        tasks.append(TaskDataset(t, np.concatenate(xs_tr), np.concatenate(ys_tr),
                                 np.concatenate(xs_te), np.concatenate(ys_te)))
    return TaskStream(tasks, cfg.classes_per_task, dim, class_means=means)


def task_batches(ds: TaskDataset, batch_size: int,
                 rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled epoch over ``ds``'s training split; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(ds.y_train))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.x_train[idx], ds.y_train[idx]


class EmptyBufferError(LookupError):
    pass


@dataclass
class MemoryBuffer:
    """Fixed-capacity reservoir of ``(input, label, task_id)`` triples.

    Storage is preallocated; only the first ``len(self)`` rows are live.
    """

    capacity: int
    input_dim: int
    n_seen: int = 0
    x: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)
    task: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"buffer capacity must be >= 1, got {self.capacity}")
        self.x = np.zeros((self.capacity, self.input_dim))
        self.y = np.full(self.capacity, -1, dtype=np.int64)
        self.task = np.full(self.capacity, -1, dtype=np.int64)

    def __len__(self) -> int:
        return min(self.n_seen, self.capacity)

    @property
    def is_empty(self) -> bool:
        return self.n_seen == 0

    def entries(self) -> list[tuple[np.ndarray, int, int]]:
        n = len(self)
        return [(self.x[i].copy(), int(self.y[i]), int(self.task[i])) for i in range(n)]

    def add_batch(self, x: np.ndarray, y: np.ndarray, task_id,
                  rng: np.random.Generator) -> np.ndarray:
        """Reservoir-insert every row of ``x`` in order; returns destination slots (-1 = dropped)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        tasks = np.broadcast_to(np.asarray(task_id, dtype=np.int64), y.shape)
        n = y.shape[0]
        if x.shape != (n, self.input_dim):
            raise ValueError(f"buffer expects ({n}, {self.input_dim}) inputs, got {x.shape}")
        direct = max(min(self.capacity - self.n_seen, n), 0)
        n_draw = n - direct
        if n_draw:
            # k ~ U{0..N} with N the seen count before each late arrival
            highs = self.n_seen + direct + np.arange(n_draw) + 1
            draws = rng.integers(0, highs)
        else:
            draws = np.zeros(0, dtype=np.int64)
        item_for_slot, writer = _kernels.reservoir_assign(
            self.n_seen, n, self.capacity, draws.astype(np.int64))
        hit = item_for_slot >= 0
        src = item_for_slot[hit]
        self.x[hit] = x[src]
        self.y[hit] = y[src]
        self.task[hit] = tasks[src]
        self.n_seen += n
        return writer

    def sample(self, n: int, rng: np.random.Generator):
        if n == 0:
            return (np.zeros((0, self.input_dim)), np.zeros(0, dtype=np.int64),
                    np.zeros(0, dtype=np.int64))
        if self.is_empty:
            raise EmptyBufferError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self), size=n)
        return self.x[idx].copy(), self.y[idx].copy(), self.task[idx].copy()


def reservoir_update(buf: MemoryBuffer, sample: tuple, rng: np.random.Generator) -> None:
    """Insert a single ``(input, label, task_id)`` triple."""
    x, label, task_id = sample
    buf.add_batch(np.asarray(x, dtype=np.float64).reshape(1, -1), [label], task_id, rng)


def sample_minibatch(buf: MemoryBuffer, n: int, rng: np.random.Generator) -> list[tuple]:
    """``n`` entries drawn uniformly with replacement, as triples."""
    x, y, t = buf.sample(n, rng)
    return [(x[i], int(y[i]), int(t[i])) for i in range(len(y))]


# ------------------------------------------------------------ record files

STREAM_FORMAT = "agilecl-stream/1"


def export_stream(stream: TaskStream, path: str | Path) -> None:
    """One sample per line: ``split,task_id,class,f0,f1,...`` after a header line."""
    lines = [f"# {STREAM_FORMAT} tasks={stream.n_tasks} "
             f"classes_per_task={stream.classes_per_task} input_dim={stream.input_dim}"]
    for t in stream.tasks:
        for split, xs, ys in (("train", t.x_train, t.y_train), ("test", t.x_test, t.y_test)):
            for x, y in zip(xs, ys):
                lines.append(",".join([split, str(t.task_id), str(int(y))] + [repr(float(v)) for v in x]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_stream(path: str | Path) -> TaskStream:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith(f"# {STREAM_FORMAT}"):
        raise ValueError(f"{path}: missing '{STREAM_FORMAT}' header")
    meta = dict(kv.split("=") for kv in text[0].split()[2:])
    n_tasks, per_task, dim = (int(meta["tasks"]), int(meta["classes_per_task"]),
                              int(meta["input_dim"]))
    rows = {(t, s): ([], []) for t in range(n_tasks) for s in ("train", "test")}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3 + dim:
            raise ValueError(f"{path}:{lineno}: expected {3 + dim} fields, got {len(parts)}")
        key = (int(parts[1]), parts[0])
        if key not in rows:
            raise ValueError(f"{path}:{lineno}: unknown split/task {key}")
        rows[key][0].append([float(v) for v in parts[3:]])
        rows[key][1].append(int(parts[2]))
    tasks = []
    for t in range(n_tasks):
        (xtr, ytr), (xte, yte) = rows[(t, "train")], rows[(t, "test")]
        tasks.append(TaskDataset(t, np.array(xtr, dtype=np.float64).reshape(-1, dim),
                                 np.array(ytr, dtype=np.int64),
                                 np.array(xte, dtype=np.float64).reshape(-1, dim),
                                 np.array(yte, dtype=np.int64)))
    return TaskStream(tasks, per_task, dim)
