"""Losses and the rehearsal training loop, with component toggles for ablations."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from agilecl import tensor as T
from agilecl.model import (CLASS_IL, TASK_IL, AgileModel, EmaModel, ModelConfig,
                           ema_update, expand_for_task, freeze_task, predict_from_logits)
from agilecl.stream import MemoryBuffer, TaskStream, task_batches
from agilecl.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0    # replayed-sample cross-entropy
    beta: float = 0.15    # EMA consistency
    gamma: float = 1.0    # task-id prediction
    lam: float = 0.1      # pairwise discrepancy

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.07
    buffer_size: int = 200
    weights: LossWeights = field(default_factory=LossWeights)
    ema_decay: float = 0.999
    ema_rate: float = 0.2
    use_attention: bool = True
    use_expanding_head: bool = True
    use_ema: bool = True
    use_consistency: bool = True
    tp_on_buffer: bool = False
    hidden_dim: int = 512
    n_features: int = 128
    n_embed: int = 64
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.buffer_size < 0:
            raise ValueError("buffer_size must be >= 0 (0 disables rehearsal)")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if not 0.0 < self.ema_rate <= 1.0:
            raise ValueError(f"ema_rate must lie in (0, 1], got {self.ema_rate}")
        if self.use_consistency and not self.use_ema:
            raise ValueError("use_consistency needs use_ema (stored-logit targets are not supported)")
        if self.use_attention and not self.use_expanding_head:
            raise ValueError("use_attention needs use_expanding_head")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def model_config(self, stream: TaskStream) -> ModelConfig:
        return ModelConfig(input_dim=stream.input_dim, hidden_dim=self.hidden_dim,
                           n_features=self.n_features, n_embed=self.n_embed,
                           n_tasks=stream.n_tasks, classes_per_task=stream.classes_per_task,
                           use_attention=self.use_attention,
                           use_expanding_head=self.use_expanding_head)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


_PLAIN = dict(use_attention=False, use_expanding_head=False, use_ema=False, use_consistency=False)

# Named presets; the middle two are the cumulative ablation steps between ER and AGILE.
METHODS: dict[str, dict] = {
    "agile": {},
    "er-ema-head": dict(use_attention=False),
    "er-ema": dict(use_attention=False, use_expanding_head=False),
    "er": _PLAIN,
    "sgd": dict(_PLAIN, buffer_size=0),
}
ABLATION_ORDER = ("er", "er-ema", "er-ema-head", "agile")


def method_config(base: TrainConfig, method: str) -> TrainConfig:
    """``base`` with the component toggles of a named method applied."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return replace(base, **METHODS[method])


# ------------------------------------------------------------------- losses

def er_loss(logits_cur: Tensor, y_cur, logits_buf: Tensor | None = None,
            y_buf=None, alpha: float = 1.0) -> Tensor:
    loss = T.cross_entropy(logits_cur, y_cur)
    if logits_buf is not None and logits_buf.shape[0] > 0:
        if logits_buf.shape[1] != logits_cur.shape[1]:
            raise ValueError(f"er_loss: logit widths differ, {logits_cur.shape} vs {logits_buf.shape}")
        loss = T.add(loss, T.scale(T.cross_entropy(logits_buf, y_buf), alpha))
    return loss


def cr_loss(model_logits: Tensor, ema_logits, beta: float = 1.0) -> Tensor:
    """Batch-mean squared distance to the (detached) EMA logits."""
    target = T.stop_gradient(T.as_tensor(ema_logits))
    if target.shape != model_logits.shape:
        raise ValueError(f"cr_loss: shape mismatch {model_logits.shape} vs {target.shape}")
    return T.scale(T.squared_row_distance(model_logits, target), beta)


def tp_loss(z_tp: Tensor, task_labels, gamma: float = 1.0) -> Tensor:
    return T.scale(T.cross_entropy(z_tp, task_labels), gamma)


def pd_loss(z_s_list: list[Tensor], lam: float = 1.0) -> Tensor:
    """Negative summed L1 gap between the newest importance map and each detached older one."""
    if len(z_s_list) < 1:
        raise ValueError("pd_loss: need the importance map of at least one task")
    if len(z_s_list) == 1:
        return Tensor(0.0)
    current = T.softmax_rows(z_s_list[-1])
    gaps = [T.l1_row_distance(current, T.softmax_rows(T.stop_gradient(z)))
            for z in z_s_list[:-1]]
    total = gaps[0]
    for g in gaps[1:]:
        total = T.add(total, g)
    return T.scale(total, -lam)


PART_WEIGHT = {"er": None, "cr": "beta", "tp": "gamma", "pd": "lam"}


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """``er + beta*cr + gamma*tp + lam*pd`` over whichever parts are present.

    ``er`` already carries ``alpha``; the other parts are passed unweighted.
    """
    unknown = set(parts) - set(PART_WEIGHT)
    if unknown:
        raise ValueError(f"total_loss: unknown parts {sorted(unknown)}")
    total = None
    for name in ("er", "cr", "tp", "pd"):
        part = parts.get(name)
        if part is None:
            continue
        w = PART_WEIGHT[name]
        term = part if w is None else T.scale(part, getattr(weights, w))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("total_loss: no parts given")
    return total


# --------------------------------------------------------------- training

@dataclass
class RunLog:
    config: dict
    n_tasks: int
    classes_per_task: int
    epoch_trace: list[dict] = field(default_factory=list)
    acc_class_il: list[list[float | None]] = field(default_factory=list)
    acc_task_il: list[list[float | None]] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)
    steps: int = 0
    ema_updates: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunLog":
        return cls(**d)


@dataclass
class TrainState:
    model: AgileModel
    ema: EmaModel | None
    buffer: MemoryBuffer | None
    rng_init: np.random.Generator
    rng_data: np.random.Generator
    rng_gate: np.random.Generator
    rng_reservoir: np.random.Generator
    rng_replay: np.random.Generator
    task: int = -1
    step: int = 0


def init_state(cfg: TrainConfig, stream: TaskStream) -> TrainState:
    seqs = np.random.SeedSequence(cfg.seed).spawn(5)
    rngs = [np.random.default_rng(s) for s in seqs]
    model = AgileModel(cfg.model_config(stream), rngs[0])
    ema = EmaModel(model, cfg.ema_decay, cfg.ema_rate) if cfg.use_ema else None
    buffer = MemoryBuffer(cfg.buffer_size, stream.input_dim) if cfg.buffer_size > 0 else None
    return TrainState(model, ema, buffer, *rngs)


def inference_model(state: TrainState) -> AgileModel:
    return state.ema.model if state.ema is not None else state.model


def compute_loss(model: AgileModel, ema: EmaModel | None, cfg: TrainConfig, task: int,
                 x: np.ndarray, y: np.ndarray, replay=None) -> tuple[Tensor, dict[str, Tensor]]:
    """Objective for one step: current batch plus an optional ``(x, y, task)`` replay batch."""
    n_cur = len(y)
    x_all = x if replay is None else np.concatenate([x, replay[0]])
    logits, z_s_list, z_tp = model.forward(x_all)
    cur = T.take_rows(logits, 0, n_cur)
    parts: dict[str, Tensor] = {}
    if cfg.use_attention:
        if cfg.tp_on_buffer and replay is not None:
            parts["tp"] = tp_loss(z_tp, np.concatenate([np.full(n_cur, task), replay[2]]))
        else:
            parts["tp"] = tp_loss(T.take_rows(z_tp, 0, n_cur), np.full(n_cur, task))
        parts["pd"] = pd_loss([T.take_rows(z, 0, n_cur) for z in z_s_list])
    if replay is not None:
        past = T.take_rows(logits, n_cur, logits.shape[0])
        parts["er"] = er_loss(cur, y, past, replay[1], cfg.weights.alpha)
        if cfg.use_consistency:
            parts["cr"] = cr_loss(past, ema.logits(replay[0]))
    else:
        parts["er"] = er_loss(cur, y)
    return total_loss(parts, cfg.weights), parts


def train_step(state: TrainState, cfg: TrainConfig, x: np.ndarray, y: np.ndarray) -> dict[str, float]:
    model, buf = state.model, state.buffer
    replay = None
    if buf is not None and not buf.is_empty:
        replay = buf.sample(cfg.batch_size, state.rng_replay)
    loss, parts = compute_loss(model, state.ema, cfg, state.task, x, y, replay)
    T.backward(loss)
    T.sgd_step(model.parameters(), cfg.lr)
    if buf is not None:
        buf.add_batch(x, y, state.task, state.rng_reservoir)
    applied = False
    if state.ema is not None:
        applied = ema_update(state.ema, model, float(state.rng_gate.random()))
    state.step += 1
    out = {k: v.item() for k, v in parts.items()}
    out["total"] = loss.item()
    out["ema_applied"] = applied
    return out


def task_accuracies(m: AgileModel, stream: TaskStream, upto: int) -> tuple[list[float], list[float]]:
    """Class-IL and Task-IL test accuracy for each task ``0..upto``."""
    x, y = stream.test_set(upto)
    logits = m.logits(x)
    tasks = stream.task_of(y)
    pred_cil = predict_from_logits(logits, stream.classes_per_task, CLASS_IL)
    pred_til = predict_from_logits(logits, stream.classes_per_task, TASK_IL, tasks)
    cil, til = [], []
    for j in range(upto + 1):
        mask = tasks == j
        cil.append(float(np.mean(pred_cil[mask] == y[mask])))
        til.append(float(np.mean(pred_til[mask] == y[mask])))
    return cil, til


def train_stream(cfg: TrainConfig, stream: TaskStream,
                 on_task_end: Callable[[TrainState], None] | None = None
                 ) -> tuple[AgileModel, EmaModel | None, RunLog]:
    state = init_state(cfg, stream)
    runlog = RunLog(config=cfg.to_dict(), n_tasks=stream.n_tasks,
                    classes_per_task=stream.classes_per_task)
    n_tasks = stream.n_tasks
    for t, task in enumerate(stream.tasks):
        expand_for_task(state.model, state.ema, state.rng_init, task=t)
        state.task = t
        for epoch in range(cfg.epochs):
            for x, y in task_batches(task, cfg.batch_size, state.rng_data):
                parts = train_step(state, cfg, x, y)
                runlog.ema_updates += int(parts.pop("ema_applied"))
                if state.step % cfg.log_every == 0:
                    runlog.losses.append({"step": state.step, "task": t, **parts})
            cil, _ = task_accuracies(inference_model(state), stream, t)
            runlog.epoch_trace.append({"task": t, "epoch": epoch, "acc": cil})
        freeze_task(state.model, t)
        cil, til = task_accuracies(inference_model(state), stream, t)
        pad = [None] * (n_tasks - t - 1)
        runlog.acc_class_il.append(cil + pad)
        runlog.acc_task_il.append(til + pad)
        log.info("task %d done: class-il %s", t, " ".join(f"{a:.3f}" for a in cil))
        if on_task_end is not None:
            on_task_end(state)
    runlog.steps = state.step
    return state.model, state.ema, runlog
