"""Shared oracles: a 2-task toy setup and a finite-difference check of its full objective."""
import numpy as np

from agilecl import tensor as T
from agilecl.model import AgileModel, EmaModel, ModelConfig, expand_for_task, freeze_task
from agilecl.train import LossWeights, TrainConfig, compute_loss
from conftest import central_difference, rel_error

TOY = ModelConfig(input_dim=3, hidden_dim=5, n_features=4, n_embed=3, n_tasks=2,
                  classes_per_task=2)


def kink_margins(m: AgileModel, x_all: np.ndarray, n_cur: int) -> tuple[float, float]:
    """Distance of the evaluation point from the nearest ReLU kink and the nearest L1 tie."""
    pre1 = x_all @ m.w1.data + m.b1.data
    pre2 = np.maximum(pre1, 0) @ m.w2.data + m.b2.data
    z_f = np.maximum(pre2, 0)[:n_cur]
    attn = m.attention
    z_e = 1 / (1 + np.exp(-(z_f @ attn.enc_w.data + attn.enc_b.data)))
    maps = [T.softmax_np(1 / (1 + np.exp(-((z_e * d.data) @ attn.sel_w.data + attn.sel_b.data))))
            for d in m.projections]
    gaps = [np.abs(maps[-1] - q).min() for q in maps[:-1]]
    return float(min(np.abs(pre1).min(), np.abs(pre2).min())), float(min(gaps))


def toy_setup(seed: int, relu_margin: float = 0.02, l1_margin: float = 2e-3):
    """Draws are repeated under ``[seed, attempt]`` until the point is clear of every kink.

    Central differences are meaningless across a kink; the margins are far
    larger than a 1e-3 parameter step can move the kinked quantities.
    """
    for attempt in range(1000):
        out = _toy_draw(np.random.default_rng([seed, attempt]))
        m, _, _, x, _, replay = out
        relu, l1 = kink_margins(m, np.concatenate([x, replay[0]]), len(x))
        if relu > relu_margin and l1 > l1_margin:
            return out
    raise RuntimeError(f"no kink-free toy draw for seed {seed}")


def _toy_draw(rng):
    m = AgileModel(TOY, rng)
    ema = EmaModel(m, 0.9, 1.0)
    expand_for_task(m, ema, rng)
    freeze_task(m, 0)
    expand_for_task(m, ema, rng)
    for p in ema.model.parameters():          # EMA distinct from the live weights
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    weights = LossWeights(alpha=rng.uniform(0.5, 2), beta=rng.uniform(0.1, 1),
                          gamma=rng.uniform(0.5, 2), lam=rng.uniform(0.1, 1))
    cfg = TrainConfig(epochs=1, buffer_size=4, weights=weights)
    x = rng.standard_normal((4, 3))
    y = rng.integers(2, 4, 4)
    replay = (rng.standard_normal((3, 3)), rng.integers(0, 2, 3), np.zeros(3, dtype=np.int64))
    return m, ema, cfg, x, y, replay


class DetachedReplay:
    """Holds every ``stop_gradient`` output at its value from the first (recording) pass."""

    def __init__(self):
        self.cache: list[np.ndarray] = []
        self.pos = None
        self._orig = T.stop_gradient

    def __call__(self, t):
        out = self._orig(t)
        if self.pos is None:
            self.cache.append(out.data.copy())
        else:
            out.data = self.cache[self.pos].copy()
            self.pos += 1
        return out

    def replaying(self):
        self.pos = 0


class _CachedEma:
    """The EMA does not depend on the live weights, so its logits are computed once."""

    def __init__(self, ema, x):
        self.x, self.out = x, ema.logits(x)

    def logits(self, x):
        assert x is self.x
        return self.out


def composite_fd_errors(seed: int, monkeypatch, h: float = 1e-3) -> dict[str, float]:
    """Relative error between autodiff and central differences for each parameter."""
    m, ema, cfg, x, y, replay = toy_setup(seed)
    ema = _CachedEma(ema, replay[0])
    hold = DetachedReplay()
    monkeypatch.setattr(T, "stop_gradient", hold)
    loss, _ = compute_loss(m, ema, cfg, 1, x, y, replay)
    T.backward(loss)
    analytic = {n: p.grad.copy() for n, p in m.named_parameters()}
    T.get_tape().clear()
    for p in m.parameters():
        p.grad = None

    def f():
        hold.replaying()
        with T.no_grad():
            return compute_loss(m, ema, cfg, 1, x, y, replay)[0].item()

    names, params = zip(*m.named_parameters())
    numeric = central_difference(f, [p.data for p in params], h)
    return {n: rel_error(analytic[n], g) for n, g in zip(names, numeric)}
