"""Subband-to-RB precoder upsampling.

Two routes from ``M`` frequency samples (stride ``T = N_RB / M``) to one
precoder per RB:

* :func:`interpolate_linear` -- per-coefficient linear interpolation.
* the delay-domain route -- :func:`initial_upsample` tiles the ``M``-point
  delay response over all ``T`` alias replicas, a band-pass mask over the
  ``N_RB`` delay bins picks replicas, and a DFT returns to frequency.
  :func:`reciprocity_bpf` builds the mask from the UL power delay profile; the
  SRPNet (:func:`srpnet_apply`) learns it and adds convolutional refinement in the
  beam/antenna-delay and antenna-frequency domains.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .channel import Pdp
from .codebook import (BeamCodebook, PrecoderReport, SbGrid, TypeIIReport,
                       TypeIReport, decode_etype2, type1_precoders, type2_precoders)
from .dft import freq_matrix, to_delay, to_freq
from .numerics import Tensor

log = logging.getLogger(__name__)


class ZeroPrecoderError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass
class SampledPrecoders:
    values: np.ndarray                  # (M, D) complex
    n_rb: int
    offset: float = 0.0                 # RB position of the first sample
    domain: str = "antenna"             # "antenna" | "beam"
    beams: Optional[np.ndarray] = None  # (n_ant, D) when domain == "beam"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.n_rb % self.n_samples:
            raise ValueError(f"sample count {self.n_samples} must divide n_rb={self.n_rb}")
        if self.domain == "beam" and (self.beams is None or self.beams.shape[1] != self.values.shape[1]):
            raise ValueError("beam-domain samples need a beam matrix with one column per coefficient")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def stride(self) -> int:
        return self.n_rb // self.n_samples

    @property
    def positions(self) -> np.ndarray:
        return self.offset + self.stride * np.arange(self.n_samples)

    def expand(self, coeffs: np.ndarray) -> np.ndarray:
        """Map (..., D) coefficients to antenna-domain vectors."""
        return coeffs if self.domain == "antenna" else coeffs @ self.beams.T


@dataclass
class Bpf:
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=float)
        if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
            raise ValueError("BPF mask entries must be finite and lie in [0, 1]")
        self.mask = m


@dataclass
class RbPrecoders:
    values: np.ndarray     # (n_rb, n_ant)
    normalized: bool = True


def normalize_rows(w: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(w, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ZeroPrecoderError("cannot normalize a zero precoder row")
    return w / n


def from_report(report: PrecoderReport, cb: BeamCodebook) -> SampledPrecoders:
    """Frequency samples carried by a feedback report.

    Subband precoders are placed at subband centres, matching the averaging in
    :func:`sb2rb.codebook.sb_reduce`.
    """
    if isinstance(report, (TypeIReport, TypeIIReport)):
        w = type1_precoders(report, cb) if isinstance(report, TypeIReport) else type2_precoders(report, cb)
        grid = SbGrid.from_n_sb(report.n_rb, report.n_sb)
        return SampledPrecoders(w, report.n_rb, grid.sb_centers[0])
    dec = decode_etype2(report, cb)
    return SampledPrecoders(dec.sampled.T, report.n_rb, float(dec.positions[0]), "beam", dec.beam_matrix)


# ---------------------------------------------------------------------------
# baseline and deterministic core
# ---------------------------------------------------------------------------

def interpolate_linear(sp: SampledPrecoders, normalize: bool = True) -> RbPrecoders:
    """Linear interpolation of real and imaginary parts; samples held beyond the ends."""
    if sp.n_samples < 2:
        raise ValueError("linear interpolation needs at least 2 samples")
    rbs = np.arange(sp.n_rb)
    pos = sp.positions
    out = np.empty((sp.n_rb, sp.values.shape[1]), dtype=complex)
    for d in range(sp.values.shape[1]):
        col = sp.values[:, d]
        out[:, d] = np.interp(rbs, pos, col.real) + 1j * np.interp(rbs, pos, col.imag)
    w = sp.expand(out)
    return RbPrecoders(normalize_rows(w) if normalize else w, normalize)


def initial_upsample(values: np.ndarray, n_rb: int, offset: float = 0.0) -> np.ndarray:
    """Aliased RB-level delay response, shape (..., D, n_rb), from samples (..., M, D).

    Every delay bin ``tau`` receives ``sqrt(T) * x_s[tau mod M]`` where ``x_s`` is
    the unitary M-point delay response, so each true tap appears at all T of
    its candidate positions. A non-zero sampling offset adds the phase ramp
    ``exp(j 2 pi offset tau / n_rb)``.
    """
    values = np.asarray(values, dtype=complex)
    m = values.shape[-2]
    if n_rb % m:
        raise ValueError(f"sample count {m} must divide n_rb={n_rb}")
    t = n_rb // m
    xs = np.swapaxes(to_delay(values, axis=-2), -1, -2)          # (..., D, M)
    tau = np.arange(n_rb)
    e = math.sqrt(t) * xs[..., tau % m]
    if offset:
        e = e * np.exp(2j * np.pi * offset * tau / n_rb)
    return e


def reciprocity_bpf(ul_pdp: Pdp | np.ndarray, m: int) -> Bpf:
    """Soft replica weights from the UL PDP, normalized within each residue class mod m."""
    p = np.asarray(ul_pdp.p if isinstance(ul_pdp, Pdp) else ul_pdp, dtype=float)
    n = len(p)
    if n % m:
        raise ValueError(f"sample count {m} must divide the {n} delay bins")
    t = n // m
    classes = p.reshape(t, m)
    tot = classes.sum(axis=0, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        mask = np.where(tot > 0, classes / tot, 1.0 / t)
    return Bpf(np.clip(mask.reshape(n), 0.0, 1.0))


def apply_bpf(e: np.ndarray, bpf: Bpf, beams: np.ndarray | None = None,
              normalize: bool = True) -> RbPrecoders:
    """Mask the (D, n_rb) aliased delay response, return to frequency, expand beams."""
    if e.shape[-1] != len(bpf.mask):
        raise nx.ShapeError("apply_bpf", f"mask of length {e.shape[-1]}", len(bpf.mask))
    w = to_freq(e * bpf.mask, axis=-1).T
    if beams is not None:
        w = w @ beams.T
    return RbPrecoders(normalize_rows(w) if normalize else w, normalize)


def deterministic_upsample(sp: SampledPrecoders, ul_pdp: Pdp | np.ndarray,
                           normalize: bool = True) -> RbPrecoders:
    e = initial_upsample(sp.values, sp.n_rb, sp.offset)
    return apply_bpf(e, reciprocity_bpf(ul_pdp, sp.n_samples),
                     sp.beams if sp.domain == "beam" else None, normalize)


# ---------------------------------------------------------------------------
# normalized gain loss
# ---------------------------------------------------------------------------

def per_rb_gain(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    """|h_f^H w_f| / (|h_f| |w_f|) for every RB; inputs (..., n_rb, n_ant)."""
    hn = np.linalg.norm(h, axis=-1)
    wn = np.linalg.norm(w, axis=-1)
    if np.any(hn == 0) or np.any(wn == 0):
        raise ZeroPrecoderError("normalized gain undefined for zero rows")
    return np.abs((h.conj() * w).sum(axis=-1)) / (hn * wn)


_EPS = 1e-30


def _complex_channels(z: np.ndarray) -> np.ndarray:
    """(B, n_rb, n_ant) complex -> (B, 2, n_ant, n_rb) real."""
    z = np.swapaxes(z, -1, -2)
    return np.stack([z.real, z.imag], axis=1)


def loss_neg_gain(w, h):
    """``1 - mean_f |h_f^H w_f| / (|h_f| |w_f|)``.

    With arrays (n_rb, n_ant) returns a float. With a Tensor ``w`` of shape
    (B, 2, n_ant, n_rb) and complex ``h`` of shape (B, n_rb, n_ant) returns a
    scalar Tensor averaged over the batch.
    """
    if not isinstance(w, Tensor):
        w = w.values if isinstance(w, RbPrecoders) else w
        return float(1.0 - per_rb_gain(np.asarray(w), np.asarray(h)).mean())
    h = np.asarray(h)
    if h.ndim == 2:
        h = h[None]
    if np.any(np.linalg.norm(h, axis=-1) == 0):
        raise ZeroPrecoderError("zero channel row in loss")
    hc = _complex_channels(h.conj())
    inner = nx.sum(nx.cmul(Tensor(hc), w, axis=1), axis=2)              # (B, 2, N)
    mag = nx.sqrt(nx.sum(nx.square(inner), axis=1) + _EPS)             # (B, N)
    wn = nx.sqrt(nx.sum(nx.square(w), axis=(1, 2)) + _EPS)
    hn = np.linalg.norm(h, axis=-1)
    return 1.0 - nx.mean(mag / (wn * hn))


# ---------------------------------------------------------------------------
# SRPNet
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SrpnetConfig:
    bpf_hidden: int = 8
    bpf_kernel: int = 7
    refine_hidden: int = 16
    refine_kernel: tuple[int, int] = (3, 7)
    zero_init_last: bool = True


def pdp_features(p: np.ndarray) -> np.ndarray:
    """Log-scaled PDP relative to its peak, mapped to roughly [0, 1]."""
    p = np.asarray(p, dtype=float)
    peak = p.max(axis=-1, keepdims=True)
    rel = np.divide(p, peak, out=np.zeros_like(p), where=peak > 0)
    return np.log10(rel + 1e-3) / 3.0 + 1.0


def init_srpnet(seed: int = 0, config: SrpnetConfig = SrpnetConfig()) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)

    def he(shape):
        fan_in = math.prod(shape[1:])
        return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)

    hb, kb = config.bpf_hidden, config.bpf_kernel
    hr, (kh, kw) = config.refine_hidden, config.refine_kernel
    p = {
        "bpf.conv1.w": he((hb, 1, kb)), "bpf.conv1.b": np.zeros(hb),
        "bpf.conv2.w": he((1, hb, kb)), "bpf.conv2.b": np.zeros(1),
    }
    for blk in ("bd", "af"):
        p[f"{blk}.conv1.w"] = he((hr, 2, kh, kw))
        p[f"{blk}.conv1.b"] = np.zeros(hr)
        last = he((2, hr, kh, kw))
        p[f"{blk}.conv2.w"] = np.zeros_like(last) if config.zero_init_last else last * 0.1
        p[f"{blk}.conv2.b"] = np.zeros(2)
        p[f"{blk}.gain"] = np.ones(1)
    return {k: Tensor(v, name=k) for k, v in p.items()}


@dataclass
class SrpnetBatch:
    """Network inputs for a batch that shares n_rb, sample grid, and width D."""
    e: np.ndarray                     # (B, D, n_rb) complex aliased delay responses
    pdp: np.ndarray                   # (B, n_rb) UL PDP
    beams: Optional[np.ndarray]       # (B, n_ant, D) or None for antenna-domain samples
    n_samples: int                    # M, the number of frequency samples behind ``e``

    @classmethod
    def from_sampled(cls, sps: Sequence[SampledPrecoders], ul_pdps: Sequence) -> "SrpnetBatch":
        e = np.stack([initial_upsample(s.values, s.n_rb, s.offset) for s in sps])
        pdp = np.stack([np.asarray(p.p if isinstance(p, Pdp) else p, dtype=float) for p in ul_pdps])
        beams = None
        if sps[0].domain == "beam":
            beams = np.stack([s.beams for s in sps])
        return cls(e, pdp, beams, sps[0].n_samples)

    def __len__(self):
        return self.e.shape[0]

    def subset(self, idx) -> "SrpnetBatch":
        return SrpnetBatch(self.e[idx], self.pdp[idx],
                           None if self.beams is None else self.beams[idx], self.n_samples)


def _refine(x: Tensor, params: dict[str, Tensor], blk: str) -> Tensor:
    hidden = nx.relu(nx.conv2d(x, params[f"{blk}.conv1.w"], params[f"{blk}.conv1.b"]))
    delta = nx.conv2d(hidden, params[f"{blk}.conv2.w"], params[f"{blk}.conv2.b"])
    return x + params[f"{blk}.gain"] * delta


def srpnet_bpf(pdp: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Learned band-pass mask (B, n_rb) in (0, 1) from UL PDPs (B, n_rb)."""
    x = Tensor(pdp_features(pdp)[:, None, :])
    h = nx.relu(nx.conv1d(x, params["bpf.conv1.w"], params["bpf.conv1.b"]))
    z = nx.conv1d(h, params["bpf.conv2.w"], params["bpf.conv2.b"])
    return nx.reshape(nx.sigmoid(z), (pdp.shape[0], pdp.shape[1]))


def srpnet_apply(batch: SrpnetBatch, params: dict[str, Tensor], bpf: str = "net") -> Tensor:
    """Batched forward pass; returns unit-norm precoders as (B, 2, n_ant, n_rb).

    ``bpf="reciprocity"`` swaps the learned mask for :func:`reciprocity_bpf`.
    """
    B, D, n = batch.e.shape
    if batch.pdp.shape != (B, n):
        raise nx.ShapeError("srpnet_apply", f"pdp ({B}, {n})", batch.pdp.shape)
    if batch.beams is not None and batch.beams.shape[::2] != (B, D):
        raise nx.ShapeError("srpnet_apply", f"beams ({B}, n_ant, {D})", batch.beams.shape)
    # unit RMS input keeps conv activations on a fixed scale
    rms = np.sqrt((np.abs(batch.e) ** 2).mean(axis=(1, 2), keepdims=True))
    e = batch.e / np.where(rms > 0, rms, 1.0)
    x = Tensor(np.stack([e.real, e.imag], axis=1))                    # (B, 2, D, n)

    if bpf == "net":
        mask = srpnet_bpf(batch.pdp, params)
    elif bpf == "reciprocity":
        mask = Tensor(np.stack([reciprocity_bpf(p, batch.n_samples).mask for p in batch.pdp]))
    else:
        raise ValueError(f"unknown bpf source {bpf!r}")
    x = x * nx.reshape(mask, (B, 1, 1, n))
    x = _refine(x, params, "bd")
    if batch.beams is not None:
        x = nx.complex_einsum("bdt,bad->bat", x, batch.beams)
    x = nx.complex_einsum("bat,tf->baf", x, freq_matrix(n))
    x = _refine(x, params, "af")
    norm = nx.sqrt(nx.sum(nx.square(x), axis=(1, 2), keepdims=True) + _EPS)
    return x / norm


def to_complex(w: Tensor | np.ndarray) -> np.ndarray:
    """(B, 2, n_ant, n_rb) real -> (B, n_rb, n_ant) complex."""
    d = w.data if isinstance(w, Tensor) else w
    return np.swapaxes(d[:, 0] + 1j * d[:, 1], -1, -2)


def srpnet_forward(sp: SampledPrecoders, ul_pdp, params: dict[str, Tensor], bpf: str = "net") -> RbPrecoders:
    batch = SrpnetBatch.from_sampled([sp], [ul_pdp])
    return RbPrecoders(to_complex(srpnet_apply(batch, params, bpf))[0], True)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    patience: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    net: SrpnetConfig = field(default_factory=SrpnetConfig)


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "train_loss", "val_loss"])
            for ep, tr, va in self.rows:
                wr.writerow([ep, f"{tr:.10g}", f"{va:.10g}"])


def batch_loss(batch: SrpnetBatch, h: np.ndarray, params, chunk: int = 64) -> float:
    total = 0.0
    for s in range(0, len(batch), chunk):
        sl = slice(s, s + chunk)
        w = srpnet_apply(batch.subset(sl), params)
        total += loss_neg_gain(w, h[sl]).item() * len(h[sl])
    return total / len(batch)


def train_srpnet(train: tuple[SrpnetBatch, np.ndarray], val: tuple[SrpnetBatch, np.ndarray],
                 config: TrainConfig = TrainConfig(), params: dict[str, Tensor] | None = None):
    """Adam on the negative normalized gain; returns (best-validation params, log).

    ``train`` and ``val`` are (inputs, DL channels (B, n_rb, n_ant)) pairs.
    """
    (xb, hb), (xv, hv) = train, val
    if len(xb) == 0 or len(xv) == 0:
        raise ValueError("training and validation sets must be non-empty")
    params = dict(params or init_srpnet(config.seed, config.net))
    names = list(params)
    opt = nx.Adam(lr=config.lr)
    rng = np.random.default_rng(config.seed)

    tlog = TrainLog()
    best = dict(params)
    tlog.best_val = batch_loss(xv, hv, params)
    tlog.rows.append((0, batch_loss(xb, hb, params), tlog.best_val))
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(xb))
        run = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            plist = [params[k] for k in names]
            with nx.Tape() as tape:
                tape.watch(*plist)
                loss = loss_neg_gain(srpnet_apply(xb.subset(idx), params), hb[idx])
            if not np.isfinite(loss.item()):
                raise NumericalFailure(f"non-finite training loss at epoch {epoch}")
            grads = tape.gradient(loss, plist)
            params = dict(zip(names, opt.step(plist, grads)))
            run += loss.item() * len(idx)
        val_loss = batch_loss(xv, hv, params)
        if not np.isfinite(val_loss):
            raise NumericalFailure(f"non-finite validation loss at epoch {epoch}")
        tlog.rows.append((epoch, run / len(order), val_loss))
        if val_loss < tlog.best_val:
            tlog.best_val, tlog.best_epoch, best = val_loss, epoch, dict(params)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, tlog.best_epoch)
                break
        log.debug("epoch %d train %.5f val %.5f", epoch, run / len(order), val_loss)
    return best, tlog
