"""Tapped-delay-line FDD channel generator with reciprocal UL/DL geometry.

Each UE gets a small set of paths. Path delays sit on the delay grid of the
bandwidth part (multiples of ``1 / (n_rb * rb_bandwidth)``), angles are shared
by UL and DL, and the complex fading gains are drawn independently per link.

The UL/DL carrier separation is not pinned down by the reference setup; the
defaults below (2.14 GHz DL, 1.95 GHz UL, same RB grid) are assumptions.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dft import to_delay

SPEED_OF_LIGHT = 299_792_458.0

# RMS delay-spread cluster bounds in seconds; lower bound inclusive
DS_BOUNDS = (500e-9, 1000e-9)
SCENARIOS = ("low", "medium", "high")

# per-scenario range for the target RMS delay spread used by the sampler
_TARGET_RMS = {
    "low": (30e-9, 400e-9),
    "medium": (550e-9, 950e-9),
    "high": (1100e-9, 2200e-9),
}


class ScenarioUnreachable(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_ant: int = 16
    n_rb: int = 48
    rb_bandwidth: float = 20e6 / 96
    dl_carrier: float = 2.14e9
    ul_carrier: float = 1.95e9
    n_paths_range: tuple[int, int] = (4, 12)
    ds_scenario: str = "mixed"
    seed: int = 0
    angle_spread_deg: float = 10.0
    max_retries: int = 1000

    def __post_init__(self):
        if self.n_ant < 2 or self.n_rb < 2:
            raise ValueError(f"need n_ant >= 2 and n_rb >= 2, got {self.n_ant}, {self.n_rb}")
        if self.dl_carrier <= 0 or self.ul_carrier <= 0 or self.rb_bandwidth <= 0:
            raise ValueError("carriers and rb_bandwidth must be positive")
        lo, hi = self.n_paths_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid n_paths_range {self.n_paths_range}")
        if hi > self.n_rb:
            raise ValueError(f"n_paths_range upper bound {hi} exceeds the {self.n_rb} delay bins")
        if self.ds_scenario not in SCENARIOS + ("mixed",):
            raise ValueError(f"unknown ds_scenario {self.ds_scenario!r}")
        object.__setattr__(self, "n_paths_range", (int(lo), int(hi)))

    @property
    def bin_width(self) -> float:
        return 1.0 / (self.n_rb * self.rb_bandwidth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_paths_range"] = list(self.n_paths_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "n_paths_range" in d:
            d["n_paths_range"] = tuple(d["n_paths_range"])
        return cls(**d)


@dataclass
class PathSet:
    delays: np.ndarray     # seconds, ascending
    angles: np.ndarray     # radians
    dl_gain: np.ndarray    # complex
    ul_gain: np.ndarray    # complex

    def __post_init__(self):
        if len(self.delays) == 0:
            raise ValueError("PathSet needs at least one path")
        if np.any(self.delays < 0) or np.any(np.diff(self.delays) < 0):
            raise ValueError("path delays must be non-negative and sorted")

    @property
    def n_paths(self) -> int:
        return len(self.delays)

    def rms_ds(self, link: str = "dl") -> float:
        p = np.abs(self.dl_gain if link == "dl" else self.ul_gain) ** 2
        return _rms(self.delays, p)


@dataclass
class ChannelPair:
    dl: np.ndarray   # (n_rb, n_ant) complex, row f is h_f
    ul: np.ndarray
    paths: Optional[PathSet] = None
    cfg: Optional[SimConfig] = None
    ue: int = 0


@dataclass
class Pdp:
    p: np.ndarray
    bin_width: float

    def __post_init__(self):
        if np.any(self.p < 0):
            raise ValueError("PDP entries must be non-negative")


@dataclass(frozen=True)
class PdpMetrics:
    max_excess_delay: float
    mean_excess_delay: float
    rms_ds: float

    def get(self, name: str) -> float:
        return {"max_excess": self.max_excess_delay,
                "mean_excess": self.mean_excess_delay,
                "rms_ds": self.rms_ds}[name]


def _rms(t: np.ndarray, p: np.ndarray) -> float:
    tot = p.sum()
    m1 = (t * p).sum() / tot
    m2 = (t * t * p).sum() / tot
    return math.sqrt(max(m2 - m1 * m1, 0.0))


def ds_cluster(rms: float) -> str:
    """Cluster label for an RMS delay spread in seconds (boundaries go to the upper bin)."""
    if rms < DS_BOUNDS[0]:
        return "low"
    if rms < DS_BOUNDS[1]:
        return "medium"
    return "high"


def sample_paths(cfg: SimConfig, rng: np.random.Generator, scenario: str | None = None) -> PathSet:
    """Draw a path set whose DL RMS delay spread lands in the scenario's cluster.

    Delays are exponential with a scenario-dependent scale, snapped to distinct
    grid bins below ``n_rb``; the first path arrives at zero excess delay.
    Path powers decay exponentially with delay and both links fade independently.
    """
    scenario = scenario or cfg.ds_scenario
    if scenario == "mixed":
        scenario = SCENARIOS[rng.integers(3)]
    bw = cfg.bin_width
    lo, hi = cfg.n_paths_range
    for _ in range(cfg.max_retries):
        n = int(rng.integers(lo, hi + 1))
        target = rng.uniform(*_TARGET_RMS[scenario])
        scale_bins = target / bw
        extra = np.round(rng.exponential(scale_bins, size=8 * n)).astype(int)
        extra = extra[(extra > 0) & (extra < cfg.n_rb)]
        _, first = np.unique(extra, return_index=True)
        distinct = extra[np.sort(first)]          # draw order, duplicates removed
        if len(distinct) < n - 1:
            continue
        bins = np.sort(np.concatenate([[0], distinct[:n - 1]]))
        delays = bins * bw
        power = np.exp(-delays / max(target, bw))
        power /= power.sum()
        dl = np.sqrt(power / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        ul = np.sqrt(power / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        theta0 = rng.uniform(-np.pi / 3, np.pi / 3)
        angles = theta0 + np.deg2rad(cfg.angle_spread_deg) * rng.standard_normal(n)
        ps = PathSet(delays, angles, dl, ul)
        if ds_cluster(ps.rms_ds("dl")) == scenario:
            return ps
    raise ScenarioUnreachable(
        f"scenario unreachable with current n_paths_range {cfg.n_paths_range} "
        f"(scenario={scenario!r}, {cfg.max_retries} retries)")


def steering(angles: np.ndarray, n_ant: int, carrier: float, ref_carrier: float) -> np.ndarray:
    """ULA response (n_ant, n_paths); element spacing is half a wavelength at ``ref_carrier``."""
    spacing = SPEED_OF_LIGHT / ref_carrier / 2
    lam = SPEED_OF_LIGHT / carrier
    n = np.arange(n_ant)[:, None]
    return np.exp(-2j * np.pi * n * spacing * np.sin(angles)[None, :] / lam)


def _synth(gains, delays, angles, cfg: SimConfig, carrier: float) -> np.ndarray:
    f = carrier + (np.arange(cfg.n_rb) - (cfg.n_rb - 1) / 2) * cfg.rb_bandwidth
    a = steering(angles, cfg.n_ant, carrier, cfg.dl_carrier)          # (A, P)
    phase = np.exp(-2j * np.pi * np.outer(f, delays))                 # (F, P)
    return (phase * gains[None, :]) @ a.T                              # (F, A)


def paths_to_csi(paths: PathSet, cfg: SimConfig, ue: int = 0) -> ChannelPair:
    dl = _synth(paths.dl_gain, paths.delays, paths.angles, cfg, cfg.dl_carrier)
    ul = _synth(paths.ul_gain, paths.delays, paths.angles, cfg, cfg.ul_carrier)
    return ChannelPair(dl, ul, paths, cfg, ue)


def compute_pdp(csi: np.ndarray, rb_bandwidth: float = SimConfig.rb_bandwidth) -> Pdp:
    """Antenna-averaged power of the unitary IDFT of ``csi`` (n_rb, n_ant) along frequency."""
    csi = np.asarray(csi)
    x = to_delay(csi, axis=0)
    p = (np.abs(x) ** 2).mean(axis=1)
    return Pdp(p, 1.0 / (csi.shape[0] * rb_bandwidth))


def pdp_metrics(pdp: Pdp, eta: float = 0.1) -> PdpMetrics:
    if not 0 < eta < 1:
        raise ValueError(f"significance threshold must lie in (0, 1), got {eta}")
    p = np.asarray(pdp.p, dtype=float)
    if p.sum() <= 0:
        raise ValueError("zero-energy PDP has no delay metrics")
    t = np.arange(len(p), dtype=float)
    sig = np.flatnonzero(p >= eta * p.max())
    first = sig.min()       # excess delays are measured from the first significant arrival
    max_excess = (sig.max() - first) * pdp.bin_width
    mean_excess = ((t - first) * p).sum() / p.sum() * pdp.bin_width
    return PdpMetrics(float(max_excess), float(mean_excess), _rms(t, p) * pdp.bin_width)


def generate_channels(cfg: SimConfig, n_ue: int, threads: int = 1) -> list[ChannelPair]:
    """Independent UEs, each on its own seed stream ``(cfg.seed, ue)``."""

    def one(ue: int) -> ChannelPair:
        rng = np.random.default_rng([cfg.seed, ue])
        return paths_to_csi(sample_paths(cfg, rng), cfg, ue)

    if threads <= 1:
        return [one(u) for u in range(n_ue)]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(one, range(n_ue)))
