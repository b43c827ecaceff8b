"""PDP-driven choice between SRPNet and linear interpolation.

Costs are in units of one interpolation: ``C_ITP = 1`` and ``C_SRP = 1000``.
The learned switch is trained on the continuous relaxation of
``G - lam * C / cost_scale`` and rounded (half up) at inference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .channel import Pdp, pdp_metrics
from .numerics import Tensor

C_ITP = 1.0
C_SRP = 1000.0
METRICS = ("max_excess", "mean_excess", "rms_ds")


@dataclass(frozen=True)
class SwitchDecision:
    s_soft: float
    s: int
    metric_used: str
    complexity_charged: float


@dataclass
class LearnedSwitchParams:
    f: np.ndarray
    b: float
    lam: float

    def to_tensors(self) -> dict[str, Tensor]:
        return {"switch.f": Tensor(self.f), "switch.b": Tensor([self.b])}

    @classmethod
    def from_tensors(cls, t: dict[str, Tensor], lam: float) -> "LearnedSwitchParams":
        return cls(np.array(t["switch.f"].data), float(t["switch.b"].data[0]), lam)


def _charge(s: int) -> float:
    return C_SRP if s else C_ITP


def threshold_switch(pdp: Pdp, metric: str, thres: float, eta: float = 0.1) -> SwitchDecision:
    """Use SRPNet iff the chosen delay metric is at least ``thres`` seconds."""
    if metric not in METRICS:
        raise ValueError(f"unknown switch metric {metric!r}; expected one of {METRICS}")
    m = pdp_metrics(pdp, eta).get(metric)
    s = int(m >= thres)
    return SwitchDecision(float(s), s, metric, _charge(s))


def _unit_sum(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    tot = p.sum(axis=-1, keepdims=True)
    if np.any(tot <= 0):
        raise ValueError("learned switch needs PDPs with positive energy")
    return p / tot


def learned_switch_forward(pdp: Pdp | np.ndarray, params: LearnedSwitchParams) -> SwitchDecision:
    p = np.asarray(pdp.p if isinstance(pdp, Pdp) else pdp, dtype=float)
    if p.shape != params.f.shape:
        raise nx.ShapeError("learned_switch_forward", params.f.shape, p.shape)
    z = float(_unit_sum(p) @ params.f + params.b)
    s_soft = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    s = int(s_soft >= 0.5)
    return SwitchDecision(s_soft, s, "learned", _charge(s))


def gain_cost(s_soft, ng_srp, ng_itp):
    """Blended gain and complexity for a (soft) switch value."""
    g = s_soft * ng_srp + (1 - s_soft) * ng_itp
    c = s_soft * C_SRP + (1 - s_soft) * C_ITP
    return g, c


def switch_objective(f: Tensor, b: Tensor, x: np.ndarray, ng_srp: np.ndarray, ng_itp: np.ndarray,
                     lam: float, cost_scale: float = 1.0) -> Tensor:
    """Negative mean of ``G - lam * C / cost_scale`` over samples (to be minimized)."""
    s = nx.sigmoid(nx.einsum("nk,k->n", Tensor(x), f) + b)
    g, c = gain_cost(s, ng_srp, ng_itp)
    return -nx.mean(g - c * (lam / cost_scale))


@dataclass
class SwitchTrainConfig:
    iters: int = 2000
    lr: float = 0.05
    cost_scale: float = 1.0


def decide(pdps: np.ndarray, params: LearnedSwitchParams) -> np.ndarray:
    z = _unit_sum(pdps) @ params.f + params.b
    return (z >= 0).astype(int)     # sigmoid(z) >= 0.5


def operating_point(s: np.ndarray, ng_srp: np.ndarray, ng_itp: np.ndarray) -> tuple[float, float]:
    """(mean complexity, mean normalized gain) of hard decisions ``s``."""
    s = np.asarray(s, dtype=float)
    g, c = gain_cost(s, ng_srp, ng_itp)
    return float(np.mean(c)), float(np.mean(g))


def train_switch(train: tuple[np.ndarray, np.ndarray, np.ndarray],
                 val: tuple[np.ndarray, np.ndarray, np.ndarray],
                 lam: float, config: SwitchTrainConfig = SwitchTrainConfig()) -> LearnedSwitchParams:
    """Full-batch Adam on the relaxed objective; keeps the best hard-decision validation score.

    ``train`` and ``val`` are (PDPs (n, n_rb), NG with SRPNet (n,), NG with interpolation (n,)).
    """
    x, gs, gi = (np.asarray(a, dtype=float) for a in train)
    xv, gsv, giv = (np.asarray(a, dtype=float) for a in val)
    if len(x) == 0 or len(xv) == 0:
        raise ValueError("switch training needs non-empty train and validation sets")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    x = _unit_sum(x)
    f, b = Tensor(np.zeros(x.shape[1])), Tensor(np.zeros(1))
    opt = nx.Adam(lr=config.lr)

    def val_score(p: LearnedSwitchParams) -> float:
        c, g = operating_point(decide(xv, p), gsv, giv)
        return g - lam * c / config.cost_scale

    best = LearnedSwitchParams(f.data.copy(), 0.0, lam)
    best_score = val_score(best)
    for it in range(config.iters):
        with nx.Tape() as tape:
            tape.watch(f, b)
            loss = switch_objective(f, b, x, gs, gi, lam, config.cost_scale)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"switch training diverged at iteration {it}")
        f, b = opt.step([f, b], tape.gradient(loss, [f, b]))
        cand = LearnedSwitchParams(f.data.copy(), float(b.data[0]), lam)
        score = val_score(cand)
        if score > best_score:
            best, best_score = cand, score
    return best


def random_switch_curve(ng_srp: np.ndarray, ng_itp: np.ndarray, probs) -> list[tuple[float, float, float]]:
    """Expected (p, mean complexity, mean gain) for a switch choosing SRPNet with probability p."""
    ms, mi = float(np.mean(ng_srp)), float(np.mean(ng_itp))
    out = []
    for p in probs:
        g, c = gain_cost(p, ms, mi)
        out.append((float(p), float(c), float(g)))
    return out


def line_gain(complexity: float, ng_srp: np.ndarray, ng_itp: np.ndarray) -> float:
    """Random-switch gain at a given mean complexity."""
    p = (complexity - C_ITP) / (C_SRP - C_ITP)
    return float(p * np.mean(ng_srp) + (1 - p) * np.mean(ng_itp))
