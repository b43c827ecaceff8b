"""Datasets, evaluation metrics, and the figure-analog experiment runner."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .channel import Pdp, SimConfig, compute_pdp, ds_cluster, generate_channels, pdp_metrics
from .codebook import (SbGrid, build_codebook, encode_etype2, encode_type1, encode_type2,
                       feedback_overhead)
from .switch import (C_ITP, C_SRP, METRICS, SwitchTrainConfig, decide, line_gain,
                     operating_point, random_switch_curve, train_switch)
from .upsample import (SampledPrecoders, SrpnetBatch, TrainConfig, deterministic_upsample,
                       from_report, init_srpnet, interpolate_linear, per_rb_gain, srpnet_apply,
                       to_complex, train_srpnet)

DATASET_VERSION = 1
CLUSTERS = ("low", "medium", "high")
CHUNK = 64     # fixed work unit so results do not depend on the thread count


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dataset on disk: meta.json + dl.c64 + ul.c64 ([ue][rb][antenna], (re, im) float32 LE)
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    cfg: SimConfig
    dl: np.ndarray      # (n_ue, n_rb, n_ant) complex128
    ul: np.ndarray
    labels: list[str]

    def __len__(self):
        return self.dl.shape[0]

    @property
    def ul_pdps(self) -> np.ndarray:
        return np.stack([compute_pdp(u, self.cfg.rb_bandwidth).p for u in self.ul])

    @property
    def dl_pdps(self) -> np.ndarray:
        return np.stack([compute_pdp(d, self.cfg.rb_bandwidth).p for d in self.dl])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.cfg, self.dl[idx], self.ul[idx], [self.labels[i] for i in idx])


def _to_c64(z: np.ndarray) -> bytes:
    return np.ascontiguousarray(z, dtype=np.complex64).astype("<c8").tobytes()


def _from_c64(path: Path, shape) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    arr = np.frombuffer(raw, dtype="<c8")
    if arr.size != math.prod(shape):
        raise DataError(f"{path}: expected {math.prod(shape)} complex samples, found {arr.size}")
    return arr.astype(np.complex128).reshape(shape)


def cluster_by_ds(data: Dataset | np.ndarray, rb_bandwidth: float | None = None) -> list[str]:
    """DS cluster of each channel from the RMS spread of its DL PDP."""
    if isinstance(data, Dataset):
        dl, rb_bandwidth = data.dl, data.cfg.rb_bandwidth
    else:
        dl = np.asarray(data)
    rb_bandwidth = rb_bandwidth or SimConfig.rb_bandwidth
    return [ds_cluster(pdp_metrics(compute_pdp(h, rb_bandwidth)).rms_ds) for h in dl]


def generate_dataset(cfg: SimConfig, n_ue: int, out: Optional[Path] = None, threads: int = 1) -> Dataset:
    pairs = generate_channels(cfg, n_ue, threads)
    # round-trip through float32 so labels describe exactly what is stored
    dl = np.stack([p.dl for p in pairs]).astype(np.complex64).astype(np.complex128)
    ul = np.stack([p.ul for p in pairs]).astype(np.complex64).astype(np.complex128)
    ds = Dataset(cfg, dl, ul, [])
    ds.labels = cluster_by_ds(ds)
    if out is not None:
        save_dataset(ds, out)
    return ds


def save_dataset(ds: Dataset, out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "dl.c64").write_bytes(_to_c64(ds.dl))
        (out / "ul.c64").write_bytes(_to_c64(ds.ul))
        hist = {c: ds.labels.count(c) for c in CLUSTERS}
        meta = {"format_version": DATASET_VERSION, "sim_config": ds.cfg.to_dict(), "seed": ds.cfg.seed,
                "n_ue": len(ds), "n_rb": ds.cfg.n_rb, "n_ant": ds.cfg.n_ant,
                "ds_histogram": hist, "labels": ds.labels}
        (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset metadata in {path}: {exc}") from exc
    if meta.get("format_version") != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset version {meta.get('format_version')!r}")
    cfg = SimConfig.from_dict(meta["sim_config"])
    shape = (meta["n_ue"], meta["n_rb"], meta["n_ant"])
    return Dataset(cfg, _from_c64(path / "dl.c64", shape), _from_c64(path / "ul.c64", shape),
                   list(meta["labels"]))


def split_indices(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train/validation/test index sets in proportion 8:1:1."""
    perm = np.random.default_rng([seed, 0x5b]).permutation(n)
    n_test = max(1, n // 10)
    n_val = max(1, n // 10)
    return perm[n_test + n_val:], perm[n_test:n_test + n_val], perm[:n_test]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def normalized_gain(w, h) -> tuple[float, float]:
    """(sum over RBs, mean over RBs) of |h_f^H w_f| / (|h_f| |w_f|)."""
    w = getattr(w, "values", w)
    g = per_rb_gain(np.asarray(w), np.asarray(h))
    return float(g.sum()), float(g.mean())


def capacity(w, h, snr_db: float) -> float:
    """Mean over RBs of log2(1 + snr |h_f^H w_f|^2) for unit-norm precoders, bits/s/Hz."""
    w = np.asarray(getattr(w, "values", w))
    rho = 10.0 ** (snr_db / 10.0)
    return float(np.mean(np.log2(1.0 + rho * np.abs((np.asarray(h).conj() * w).sum(axis=-1)) ** 2)))


def capacity_ratio(c_num: float, c_den: float) -> Optional[float]:
    """``c_num / c_den``, or None (reported as 'undefined') when the baseline is zero."""
    return None if c_den == 0 else c_num / c_den


# ---------------------------------------------------------------------------
# schemes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scheme:
    kind: str                  # type1 | type2 | etype2
    L: int = 4
    n_sb: int = 12             # subband count (type1, type2, truncated etype2)
    m_v: int = 12
    r: float = 1
    variant: str = "modified"  # etype2 variant
    criterion: str = "modified"
    oversampling: int = 4

    def __post_init__(self):
        if self.kind not in ("type1", "type2", "etype2"):
            raise ConfigError(f"unknown scheme kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "type1":
            return f"type1_N3={self.n_sb}"
        if self.kind == "type2":
            return f"type2_{self.criterion}_L={self.L}_N3={self.n_sb}"
        return f"etype2_{self.variant}_L={self.L}_Mv={self.m_v}_R={self.r:g}"

    @classmethod
    def from_dict(cls, d: dict) -> "Scheme":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad scheme entry {d}: {exc}") from exc


def encode(h: np.ndarray, scheme: Scheme, cb=None):
    cb = cb or build_codebook(h.shape[1], scheme.oversampling)
    try:
        grid = SbGrid.from_n_sb(h.shape[0], scheme.n_sb)
    except ValueError as exc:
        raise ConfigError(f"scheme {scheme.label}: {exc}") from exc
    if scheme.kind == "type1":
        return encode_type1(h, cb, grid)
    if scheme.kind == "type2":
        return encode_type2(h, cb, grid, scheme.L, scheme.criterion)
    return encode_etype2(h, cb, grid, scheme.L, scheme.m_v, scheme.r, scheme.variant)


def _chunks(n: int):
    return [range(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def encode_dataset(ds: Dataset, scheme: Scheme, threads: int = 1):
    cb = build_codebook(ds.cfg.n_ant, scheme.oversampling)
    parts = _pmap(lambda r: [encode(ds.dl[i], scheme, cb) for i in r], _chunks(len(ds)), threads)
    reports = [rep for part in parts for rep in part]
    return reports, cb


def sampled_precoders(ds: Dataset, scheme: Scheme, threads: int = 1):
    reports, cb = encode_dataset(ds, scheme, threads)
    return [from_report(r, cb) for r in reports], reports, cb


def upsample_all(sps: Sequence[SampledPrecoders], ul_pdps: np.ndarray, method: str,
                 params=None, threads: int = 1) -> np.ndarray:
    """RB precoders (n, n_rb, n_ant) for every channel with one upsampler."""
    if method == "srpnet" and params is None:
        raise ConfigError("srpnet upsampler needs a checkpoint")

    def run(r):
        if method == "interp":
            return [interpolate_linear(sps[i]).values for i in r]
        if method == "srpnet_det":
            return [deterministic_upsample(sps[i], ul_pdps[i]).values for i in r]
        if method == "srpnet":
            batch = SrpnetBatch.from_sampled([sps[i] for i in r], [ul_pdps[i] for i in r])
            return list(to_complex(srpnet_apply(batch, params)))
        raise ConfigError(f"unknown upsampler {method!r}")

    parts = _pmap(run, _chunks(len(sps)), threads)
    return np.stack([w for part in parts for w in part])


# ---------------------------------------------------------------------------
# training entry points used by the CLI and the experiment runner
# ---------------------------------------------------------------------------

def srpnet_training_sets(ds: Dataset, scheme: Scheme, seed: int = 0, threads: int = 1):
    sps, _, _ = sampled_precoders(ds, scheme, threads)
    batch = SrpnetBatch.from_sampled(sps, list(ds.ul_pdps))
    tr, va, te = split_indices(len(ds), seed)
    return {name: (batch.subset(idx), ds.dl[idx], idx)
            for name, idx in (("train", tr), ("val", va), ("test", te))}


def train_srpnet_on(ds: Dataset, scheme: Scheme, config: TrainConfig = TrainConfig(), threads: int = 1):
    sets = srpnet_training_sets(ds, scheme, config.seed, threads)
    params, tlog = train_srpnet(sets["train"][:2], sets["val"][:2], config)
    return params, tlog


def srpnet_hyper(scheme: Scheme, config: TrainConfig) -> dict:
    return {"scheme": asdict(scheme), "train": {k: v for k, v in asdict(config).items() if k != "net"},
            "net": asdict(config.net)}


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------

@dataclass
class SwitchSpec:
    scheme_index: int = 0                  # which entry of ``schemes`` feeds the switch study
    eta: float = 0.1
    threshold_bins: Optional[list[float]] = None   # thresholds in delay bins; default 0..n_rb-1
    lambdas: list[float] = field(default_factory=lambda: [1e-5, 5e-5, 1e-4, 5e-4, 1e-3])
    probs: list[float] = field(default_factory=lambda: [round(0.1 * k, 1) for k in range(11)])
    cost_scale: float = 1.0
    iters: int = 2000
    lr: float = 0.05


@dataclass
class EvalConfig:
    dataset: str
    out: str = "results"
    snr_db: list[float] = field(default_factory=lambda: [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0])
    schemes: list[Scheme] = field(default_factory=lambda: [Scheme("etype2")])
    upsamplers: list[str] = field(default_factory=lambda: ["interp", "srpnet_det", "srpnet"])
    srpnet_checkpoint: Optional[str] = None
    switch: Optional[SwitchSpec] = field(default_factory=SwitchSpec)
    split: str = "test"                    # test | val | train | all
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.snr_db or not self.schemes or not self.upsamplers:
            raise ConfigError("snr_db, schemes and upsamplers must be non-empty")
        if self.split not in ("train", "val", "test", "all"):
            raise ConfigError(f"unknown split {self.split!r}")
        if "srpnet" in self.upsamplers and not self.srpnet_checkpoint:
            raise ConfigError("upsampler 'srpnet' requires srpnet_checkpoint")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        try:
            if "schemes" in d:
                d["schemes"] = [s if isinstance(s, Scheme) else Scheme.from_dict(s) for s in d["schemes"]]
            if d.get("switch") is not None and isinstance(d["switch"], dict):
                d["switch"] = SwitchSpec(**d["switch"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad eval config: {exc}") from exc


@dataclass
class EvalReport:
    fig4: list[dict] = field(default_factory=list)
    fig5: list[dict] = field(default_factory=list)
    fig6: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _fmt(v):
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def _write_csv(path: Path, rows: list[dict], cols: list[str]):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for r in rows:
            wr.writerow([_fmt(r[c]) for c in cols])


FIG4_COLS = ["snr_db", "cluster", "scheme", "upsampler", "capacity_ratio"]
FIG5_COLS = ["overhead", "index_bits", "scheme", "upsampler", "cluster", "ng"]
FIG6_COLS = ["switch", "param", "mean_complexity", "mean_ng"]


def _eval_indices(n: int, split: str, seed: int) -> np.ndarray:
    if split == "all":
        return np.arange(n)
    tr, va, te = split_indices(n, seed)
    return {"train": tr, "val": va, "test": te}[split]


def run_experiment(cfg: EvalConfig) -> EvalReport:
    """Evaluate every (scheme, upsampler) pair and emit fig4/fig5/fig6 CSVs plus report.json."""
    ds_all = load_dataset(cfg.dataset)
    params = None
    if "srpnet" in cfg.upsamplers:
        ck = Path(cfg.srpnet_checkpoint)
        if not (ck / "manifest.json").exists():
            raise DataError(f"missing SRPNet checkpoint: {ck}")
        params, _ = nx.load_checkpoint(ck)

    idx = _eval_indices(len(ds_all), cfg.split, cfg.seed)
    ds = ds_all.subset(idx)
    ul_pdps = ds.ul_pdps
    labels = np.array(ds.labels)
    report = EvalReport(meta={
        "dataset": str(cfg.dataset), "split": cfg.split, "n_channels": len(ds),
        "cluster_sizes": {c: int((labels == c).sum()) for c in CLUSTERS},
        "capacity_formula": "mean_f log2(1 + 10^(snr_db/10) |h_f^H w_f|^2), unit-norm w_f",
        "capacity_ratio_baseline": "linear interpolation of the same reports",
        "complexity_units": {"interp": C_ITP, "srpnet": C_SRP},
    })
    ng_cache: dict[tuple[int, str], np.ndarray] = {}

    for si, scheme in enumerate(cfg.schemes):
        sps, reports, cb = sampled_precoders(ds, scheme, cfg.threads)
        ovh = feedback_overhead(reports[0], cb)
        ws = {u: upsample_all(sps, ul_pdps, u, params, cfg.threads) for u in cfg.upsamplers}
        ng = {u: per_rb_gain(w, ds.dl).mean(axis=1) for u, w in ws.items()}
        for u in cfg.upsamplers:
            ng_cache[(si, u)] = ng[u]
        groups = [("all", np.ones(len(ds), bool))] + [(c, labels == c) for c in CLUSTERS]
        for cl, sel in groups:
            if not sel.any():
                continue
            for u in cfg.upsamplers:
                report.fig5.append({"overhead": ovh["n_coeff"], "index_bits": ovh["index_bits"],
                                    "scheme": scheme.label, "upsampler": u, "cluster": cl,
                                    "ng": float(ng[u][sel].mean())})
        if "interp" in cfg.upsamplers:
            for snr in cfg.snr_db:
                caps = {u: np.array([capacity(w, h, snr) for w, h in zip(ws[u], ds.dl)]) for u in cfg.upsamplers}
                for cl, sel in groups:
                    if not sel.any():
                        continue
                    for u in cfg.upsamplers:
                        if u == "interp":
                            continue
                        ratios = [capacity_ratio(a, b) for a, b in zip(caps[u][sel], caps["interp"][sel])]
                        ratios = [r for r in ratios if r is not None]
                        report.fig4.append({"snr_db": float(snr), "cluster": cl, "scheme": scheme.label,
                                            "upsampler": u,
                                            "capacity_ratio": float(np.mean(ratios)) if ratios else None})

    if cfg.switch is not None:
        report.fig6 = _switch_study(cfg, ds_all, ds, ul_pdps, ng_cache, params)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "fig4.csv", report.fig4, FIG4_COLS)
    _write_csv(out / "fig5.csv", report.fig5, FIG5_COLS)
    _write_csv(out / "fig6.csv", report.fig6, FIG6_COLS)
    (out / "report.json").write_text(json.dumps(
        {"meta": report.meta, "fig4": report.fig4, "fig5": report.fig5, "fig6": report.fig6},
        indent=1, sort_keys=True))
    return report


def _switch_study(cfg: EvalConfig, ds_all: Dataset, ds: Dataset, ul_pdps, ng_cache, params) -> list[dict]:
    sw = cfg.switch
    si = sw.scheme_index
    srp = "srpnet" if "srpnet" in cfg.upsamplers else "srpnet_det"
    if (si, srp) not in ng_cache or (si, "interp") not in ng_cache:
        raise ConfigError("switch study needs 'interp' and an SRPNet upsampler")
    g_srp, g_itp = ng_cache[(si, srp)], ng_cache[(si, "interp")]
    rows = []
    for p, c, g in random_switch_curve(g_srp, g_itp, sw.probs):
        rows.append({"switch": "random", "param": p, "mean_complexity": c, "mean_ng": g})

    bw = ds.cfg.bin_width
    mets = [pdp_metrics(Pdp(p, bw), sw.eta) for p in ul_pdps]
    grid = sw.threshold_bins if sw.threshold_bins is not None else list(range(ds.cfg.n_rb))
    for metric in METRICS:
        vals = np.array([m.get(metric) for m in mets])
        for k in grid:
            s = (vals >= k * bw).astype(int)
            c, g = operating_point(s, g_srp, g_itp)
            rows.append({"switch": f"threshold_{metric}", "param": float(k), "mean_complexity": c, "mean_ng": g})

    # learned switch: fit on the training split, select on validation
    tr, va, _ = split_indices(len(ds_all), cfg.seed)
    scheme = cfg.schemes[si]
    fit = {}
    for name, ii in (("train", tr), ("val", va)):
        sub = ds_all.subset(ii)
        sps, _, _ = sampled_precoders(sub, scheme, cfg.threads)
        pd = sub.ul_pdps
        gs = per_rb_gain(upsample_all(sps, pd, srp, params, cfg.threads), sub.dl).mean(axis=1)
        gi = per_rb_gain(upsample_all(sps, pd, "interp", None, cfg.threads), sub.dl).mean(axis=1)
        fit[name] = (pd, gs, gi)
    tc = SwitchTrainConfig(iters=sw.iters, lr=sw.lr, cost_scale=sw.cost_scale)
    for lam in sw.lambdas:
        lp = train_switch(fit["train"], fit["val"], lam, tc)
        c, g = operating_point(decide(ul_pdps, lp), g_srp, g_itp)
        rows.append({"switch": "learned", "param": float(lam), "mean_complexity": c, "mean_ng": g})
    for r in rows:
        r["random_line_ng"] = line_gain(r["mean_complexity"], g_srp, g_itp)
    return rows
