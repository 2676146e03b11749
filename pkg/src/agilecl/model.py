"""Backbone, shared task attention, projection vectors and expanding heads.

The same :class:`AgileModel` class serves as the live network and as the EMA
copy; the EMA copy simply holds non-trainable tensors.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from agilecl import tensor as T
from agilecl.tensor import Parameter, Tensor

CHECKPOINT_FORMAT = "agilecl-checkpoint/1"


class ModelStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    hidden_dim: int = 512
    n_features: int = 128        # N_f; also N_s, since z_s gates z_f elementwise
    n_embed: int = 64            # N_e, width of the projection vectors
    n_tasks: int = 5             # N_tp, fixed up front
    classes_per_task: int = 2
    use_attention: bool = True
    use_expanding_head: bool = True

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "n_features", "n_embed",
                     "n_tasks", "classes_per_task"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.use_attention and not self.use_expanding_head:
            raise ValueError("task attention needs the expanding head "
                             "(one classifier per projection vector)")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def truncated_normal(rng: np.random.Generator, size: int, bound: float = 2.0) -> np.ndarray:
    """Standard normal draws, each redrawn until it lands inside ``[-bound, bound]``."""
    out = rng.standard_normal(size)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def init_projection_vector(n_embed: int, rng: np.random.Generator, name: str = "delta") -> Parameter:
    if n_embed < 1:
        raise ValueError("projection width must be >= 1")
    return Parameter(truncated_normal(rng, n_embed).reshape(1, -1), name=name)


class AttentionModule:
    """Bottleneck encoder/selector with an auxiliary task classifier."""

    def __init__(self, n_features: int, n_embed: int, n_tasks: int,
                 rng: np.random.Generator | None = None):
        self.n_features, self.n_embed, self.n_tasks = n_features, n_embed, n_tasks
        rng = rng or np.random.default_rng(0)
        self.enc_w = Parameter(_uniform(rng, n_features, (n_features, n_embed)), "attn.enc.w")
        self.enc_b = Parameter(_uniform(rng, n_features, (1, n_embed)), "attn.enc.b")
        self.sel_w = Parameter(_uniform(rng, n_embed, (n_embed, n_features)), "attn.sel.w")
        self.sel_b = Parameter(_uniform(rng, n_embed, (1, n_features)), "attn.sel.b")
        self.tp_w = Parameter(_uniform(rng, n_embed, (n_embed, n_tasks)), "attn.tp.w")
        self.tp_b = Parameter(_uniform(rng, n_embed, (1, n_tasks)), "attn.tp.b")

    def parameters(self) -> list[Tensor]:
        return [self.enc_w, self.enc_b, self.sel_w, self.sel_b, self.tp_w, self.tp_b]

    def encode(self, z_f: Tensor) -> Tensor:
        if z_f.shape[1] != self.n_features:
            raise ValueError(f"attention expects {self.n_features} features, got {z_f.shape[1]}")
        return T.sigmoid(T.linear(z_f, self.enc_w, self.enc_b))

    def steer(self, z_e: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
        """``(z_s, z_tp)`` for an encoded batch projected by ``delta``."""
        projected = T.broadcast_mul(z_e, delta)
        z_s = T.sigmoid(T.linear(projected, self.sel_w, self.sel_b))
        z_tp = T.linear(projected, self.tp_w, self.tp_b)
        return z_s, z_tp

    def forward(self, z_f: Tensor, delta: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        z_e = self.encode(z_f)
        z_s, z_tp = self.steer(z_e, delta)
        return z_e, z_s, z_tp


def attention_forward(attn: AttentionModule, z_f: Tensor, delta: Tensor):
    return attn.forward(z_f, delta)


class AgileModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        d, h, f = cfg.input_dim, cfg.hidden_dim, cfg.n_features
        self.w1 = Parameter(_uniform(rng, d, (d, h)), "backbone.w1")
        self.b1 = Parameter(_uniform(rng, d, (1, h)), "backbone.b1")
        self.w2 = Parameter(_uniform(rng, h, (h, f)), "backbone.w2")
        self.b2 = Parameter(_uniform(rng, h, (1, f)), "backbone.b2")
        self.attention = (AttentionModule(f, cfg.n_embed, cfg.n_tasks, rng)
                          if cfg.use_attention else None)
        self.projections: list[Tensor] = []
        self.heads: list[tuple[Tensor, Tensor]] = []
        if not cfg.use_expanding_head:
            width = cfg.n_tasks * cfg.classes_per_task
            self.heads.append((Parameter(_uniform(rng, f, (f, width)), "head.w"),
                               Parameter(_uniform(rng, f, (1, width)), "head.b")))
        self.current_task = -1
        self.frozen_upto = -1

    # ------------------------------------------------------------ structure

    @property
    def n_seen_tasks(self) -> int:
        return self.current_task + 1

    def backbone_parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [(f"backbone.{n}", p) for n, p in
                 zip(("w1", "b1", "w2", "b2"), self.backbone_parameters())]
        if self.attention is not None:
            names = ("enc.w", "enc.b", "sel.w", "sel.b", "tp.w", "tp.b")
            named += [(f"attention.{n}", p) for n, p in zip(names, self.attention.parameters())]
        named += [(f"delta.{i}", p) for i, p in enumerate(self.projections)]
        if self.cfg.use_expanding_head:
            for i, (w, b) in enumerate(self.heads):
                named += [(f"head.{i}.w", w), (f"head.{i}.b", b)]
        else:
            named += [("head.w", self.heads[0][0]), ("head.b", self.heads[0][1])]
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def _add_task_slots(self, delta: np.ndarray | None, head_w: np.ndarray | None,
                        head_b: np.ndarray | None, make) -> None:
        t = self.current_task + 1
        if delta is not None:
            self.projections.append(make(delta, f"delta.{t}"))
        if head_w is not None:
            self.heads.append((make(head_w, f"head.{t}.w"), make(head_b, f"head.{t}.b")))
        self.current_task = t

    # -------------------------------------------------------------- forward

    def features(self, x: Tensor) -> Tensor:
        h = T.relu(T.linear(x, self.w1, self.b1))
        return T.relu(T.linear(h, self.w2, self.b2))

    def forward(self, x) -> tuple[Tensor, list[Tensor], Tensor | None]:
        """Concatenated logits over seen tasks, per-task importances, and task logits.

        ``z_tp`` comes from the newest projection vector's pass.
        """
        if self.current_task < 0:
            raise ModelStateError("no task installed; call expand_for_task first")
        x = T.as_tensor(x)
        if x.shape[1] != self.cfg.input_dim:
            raise ValueError(f"model expects {self.cfg.input_dim} inputs, got {x.shape[1]}")
        z_f = self.features(x)
        if self.attention is None:
            if self.cfg.use_expanding_head:
                logits = T.concat_cols([T.linear(z_f, w, b) for w, b in self.heads])
            else:
                w, b = self.heads[0]
                full = T.linear(z_f, w, b)
                logits = T.take_cols(full, 0, self.n_seen_tasks * self.cfg.classes_per_task)
            return logits, [], None
        z_e = self.attention.encode(z_f)
        outs, z_s_list, z_tp = [], [], None
        for delta, (w, b) in zip(self.projections, self.heads):
            z_s, z_tp = self.attention.steer(z_e, delta)
            z_s_list.append(z_s)
            outs.append(T.linear(T.ewise_mul(z_s, z_f), w, b))
        return T.concat_cols(outs), z_s_list, z_tp

    def latent(self, x, task_ids) -> np.ndarray:
        """``z_e * delta_task`` per row, using each row's own task vector."""
        if self.attention is None:
            raise ModelStateError("latent projections need the attention module")
        task_ids = np.asarray(task_ids, dtype=np.int64)
        with T.no_grad():
            z_e = self.attention.encode(self.features(T.as_tensor(x))).data
        deltas = np.concatenate([p.data for p in self.projections], axis=0)
        return z_e * deltas[task_ids]

    def logits(self, x) -> np.ndarray:
        with T.no_grad():
            return self.forward(x)[0].data


def task_attention(m: AgileModel, x):
    return m.forward(x)


class EmaModel:
    """Shape-mirrored, non-trainable copy of an :class:`AgileModel`."""

    def __init__(self, live: AgileModel, decay: float = 0.999, rate: float = 0.2):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1), got {decay}")
        if not 0.0 < rate <= 1.0:
            raise ValueError(f"EMA update rate must lie in (0, 1], got {rate}")
        self.decay, self.rate = decay, rate
        self.model = clone_model(live, trainable=False)

    def forward(self, x):
        with T.no_grad():
            return self.model.forward(x)

    def logits(self, x) -> np.ndarray:
        return self.model.logits(x)


def clone_model(m: AgileModel, trainable: bool = True) -> AgileModel:
    twin = AgileModel.__new__(AgileModel)
    twin.cfg = m.cfg
    twin.current_task = m.current_task
    twin.frozen_upto = m.frozen_upto

    def make(t: Tensor) -> Tensor:
        if trainable:
            p = Parameter(t.data.copy(), name=t.name, frozen=getattr(t, "frozen", False))
        else:
            p = Tensor(t.data.copy(), name=t.name)
        return p

    twin.w1, twin.b1, twin.w2, twin.b2 = (make(p) for p in m.backbone_parameters())
    if m.attention is not None:
        twin.attention = AttentionModule.__new__(AttentionModule)
        a, b = m.attention, twin.attention
        b.n_features, b.n_embed, b.n_tasks = a.n_features, a.n_embed, a.n_tasks
        b.enc_w, b.enc_b, b.sel_w, b.sel_b, b.tp_w, b.tp_b = (make(p) for p in a.parameters())
    else:
        twin.attention = None
    twin.projections = [make(p) for p in m.projections]
    twin.heads = [(make(w), make(b)) for w, b in m.heads]
    return twin


# ------------------------------------------------------------ lifecycle ops

def expand_for_task(m: AgileModel, ema: EmaModel | None, rng: np.random.Generator,
                    task: int | None = None) -> None:
    """Install the projection vector and classifier for the next task.

    Every earlier task must already be frozen; the EMA copy receives
    identical initial values.
    """
    t = m.current_task + 1
    if task is not None and task != t:
        raise ModelStateError(f"expected expansion for task {t}, got task {task}")
    if t >= m.cfg.n_tasks:
        raise ModelStateError(f"model was built for {m.cfg.n_tasks} tasks")
    if t > 0 and not _task_frozen(m, t - 1):
        raise ModelStateError(f"task {t - 1} is still open; freeze it before expanding")
    cfg = m.cfg
    delta = truncated_normal(rng, cfg.n_embed).reshape(1, -1) if cfg.use_attention else None
    head_w = head_b = None
    if cfg.use_expanding_head:
        head_w = _uniform(rng, cfg.n_features, (cfg.n_features, cfg.classes_per_task))
        head_b = _uniform(rng, cfg.n_features, (1, cfg.classes_per_task))
    m._add_task_slots(delta, head_w, head_b, lambda v, n: Parameter(v.copy(), name=n))
    if ema is not None:
        ema.model._add_task_slots(delta, head_w, head_b, lambda v, n: Tensor(v.copy(), name=n))
        check_congruent(ema.model, m)


def _task_frozen(m: AgileModel, t: int) -> bool:
    return m.frozen_upto >= t


def freeze_task(m: AgileModel, t: int) -> None:
    """Freeze task ``t``'s projection vector and classifier."""
    if not 0 <= t <= m.current_task:
        raise ValueError(f"cannot freeze unknown task {t} (seen {m.n_seen_tasks})")
    if m.cfg.use_attention:
        m.projections[t].frozen = True
    if m.cfg.use_expanding_head:
        for p in m.heads[t]:
            p.frozen = True
    m.frozen_upto = max(m.frozen_upto, t)


def check_congruent(a: AgileModel, b: AgileModel) -> None:
    sa = [(n, p.shape) for n, p in a.named_parameters()]
    sb = [(n, p.shape) for n, p in b.named_parameters()]
    if sa != sb:
        raise ModelStateError(f"EMA and live parameters differ: {sa} vs {sb}")


def ema_update(ema: EmaModel, m: AgileModel, u: float) -> bool:
    """Stochastic EMA step; returns whether the update was applied."""
    check_congruent(ema.model, m)
    if ema.rate < u:
        return False
    eta = ema.decay
    for e, p in zip(ema.model.parameters(), m.parameters()):
        e.data = eta * e.data + (1.0 - eta) * p.data
    return True


# --------------------------------------------------------------- inference

CLASS_IL = "class-il"
TASK_IL = "task-il"


def predict(m: AgileModel, x, mode: str = CLASS_IL, task=None) -> np.ndarray:
    """Global class predictions; Task-IL restricts the argmax to the given task's columns."""
    logits = m.logits(x)
    return predict_from_logits(logits, m.cfg.classes_per_task, mode, task)


def predict_from_logits(logits: np.ndarray, classes_per_task: int,
                        mode: str = CLASS_IL, task=None) -> np.ndarray:
    if mode == CLASS_IL:
        return logits.argmax(axis=1)
    if mode != TASK_IL:
        raise ValueError(f"unknown prediction mode {mode!r}")
    if task is None:
        raise ValueError("Task-IL prediction needs the task id")
    n_seen = logits.shape[1] // classes_per_task
    task = np.broadcast_to(np.asarray(task, dtype=np.int64), (logits.shape[0],))
    if task.size and (task.min() < 0 or task.max() >= n_seen):
        raise ValueError(f"Task-IL prediction for unseen task (model has {n_seen})")
    blocks = logits.reshape(logits.shape[0], n_seen, classes_per_task)
    local = blocks[np.arange(logits.shape[0]), task].argmax(axis=1)
    return task * classes_per_task + local


def param_count(m: AgileModel) -> dict[str, int]:
    counts = {
        "backbone": sum(p.data.size for p in m.backbone_parameters()),
        "attention": sum(p.data.size for p in m.attention.parameters()) if m.attention else 0,
        "projections": sum(p.data.size for p in m.projections),
        "heads": sum(w.data.size + b.data.size for w, b in m.heads),
    }
    counts["total"] = sum(counts.values())
    return counts


# -------------------------------------------------------------- checkpoint

def _dump_params(m: AgileModel) -> list[dict]:
    return [{"name": n, "shape": list(p.shape), "frozen": bool(getattr(p, "frozen", False)),
             "values": [float(v) for v in p.data.ravel()]}
            for n, p in m.named_parameters()]


def save_checkpoint(path, m: AgileModel, ema: EmaModel | None, config: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": config or {},
        "model": asdict(m.cfg),
        "current_task": m.current_task,
        "frozen_upto": m.frozen_upto,
        "ema": None if ema is None else {"decay": ema.decay, "rate": ema.rate},
        "live": _dump_params(m),
        "ema_params": None if ema is None else _dump_params(ema.model),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[AgileModel, EmaModel | None, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = ModelConfig(**doc["model"])
    m = AgileModel(cfg, np.random.default_rng(0))
    ema = None
    for _ in range(doc["current_task"] + 1):
        m._add_task_slots(
            np.zeros((1, cfg.n_embed)) if cfg.use_attention else None,
            np.zeros((cfg.n_features, cfg.classes_per_task)) if cfg.use_expanding_head else None,
            np.zeros((1, cfg.classes_per_task)) if cfg.use_expanding_head else None,
            lambda v, n: Parameter(v, name=n))
    m.frozen_upto = doc["frozen_upto"]
    _fill(m, doc["live"], path)
    if doc["ema"] is not None:
        ema = EmaModel(m, decay=doc["ema"]["decay"], rate=doc["ema"]["rate"])
        _fill(ema.model, doc["ema_params"], path)
    return m, ema, doc["config"]


def _fill(m: AgileModel, records: list[dict], path) -> None:
    named = m.named_parameters()
    if [n for n, _ in named] != [r["name"] for r in records]:
        raise ValueError(f"{path}: parameter list does not match the model layout")
    for (name, p), rec in zip(named, records):
        shape = tuple(rec["shape"])
        if shape != p.shape:
            raise ValueError(f"{path}: {name} has shape {shape}, model expects {p.shape}")
        p.data = np.array(rec["values"], dtype=np.float64).reshape(shape)
        if isinstance(p, Parameter):
            p.frozen = rec["frozen"]
