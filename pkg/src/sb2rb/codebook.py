"""Oversampled DFT beam codebooks and subband precoder feedback.

Three report kinds are produced:

* Type I   -- one beam index per subband.
* Type II  -- per subband, L beams and L complex combining coefficients.
* eType II -- L wideband beams and delay-domain coefficients, compressed to the
  ``ceil(L * M_v / R)`` strongest (beam, tap) entries.

Coefficients are carried unquantized. Combining follows ``w = sum_i a_i b_i / L``.
"""
from __future__ import annotations

import base64
import json
import math
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np

from .dft import to_delay, to_freq

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class BeamCodebook:
    beams: np.ndarray    # (n_ant, O * n_ant)
    oversampling: int

    @property
    def n_ant(self) -> int:
        return self.beams.shape[0]

    @property
    def size(self) -> int:
        return self.beams.shape[1]


@dataclass(frozen=True)
class SbGrid:
    n_rb: int
    n_rbpsb: int

    def __post_init__(self):
        if self.n_rbpsb < 1 or self.n_rb % self.n_rbpsb:
            raise ValueError(f"n_rbpsb={self.n_rbpsb} must divide n_rb={self.n_rb}")

    @property
    def n_sb(self) -> int:
        return self.n_rb // self.n_rbpsb

    def sb_of_rb(self, f):
        return np.asarray(f) // self.n_rbpsb

    @property
    def sb_centers(self) -> np.ndarray:
        """Subband-average positions on the RB axis (possibly half-integer)."""
        return np.arange(self.n_sb) * self.n_rbpsb + (self.n_rbpsb - 1) / 2

    @classmethod
    def from_n_sb(cls, n_rb: int, n_sb: int) -> "SbGrid":
        if n_sb < 1 or n_rb % n_sb:
            raise ValueError(f"n_sb={n_sb} must divide n_rb={n_rb}")
        return cls(n_rb, n_rb // n_sb)


@dataclass
class TypeIReport:
    indices: np.ndarray   # (n_sb,)
    n_rb: int

    @property
    def n_sb(self) -> int:
        return len(self.indices)


@dataclass
class TypeIIReport:
    indices: np.ndarray   # (n_sb, L)
    coeffs: np.ndarray    # (n_sb, L) complex
    criterion: str
    n_rb: int

    @property
    def L(self) -> int:
        return self.indices.shape[1]

    @property
    def n_sb(self) -> int:
        return self.indices.shape[0]


@dataclass
class ETypeIIReport:
    beams: np.ndarray       # (L,) wideband beam indices
    variant: str            # "truncated" | "modified"
    m_v: int
    r: float
    positions: np.ndarray   # (k, 2) (beam slot, delay tap), lexicographic
    coeffs: np.ndarray      # (k,) complex
    n_rb: int
    n_sb: int
    offset: int = 0

    @property
    def L(self) -> int:
        return len(self.beams)


PrecoderReport = Union[TypeIReport, TypeIIReport, ETypeIIReport]


@dataclass
class DecodedETypeII:
    delay: np.ndarray       # (L, M_v)
    sampled: np.ndarray     # (L, n_samples) frequency-domain combining coefficients
    positions: np.ndarray   # (n_samples,) RB positions of the samples
    beam_matrix: np.ndarray  # (n_ant, L)


def build_codebook(n_ant: int, oversampling: int = 4) -> BeamCodebook:
    if n_ant < 2 or oversampling < 1:
        raise ValueError(f"need n_ant >= 2 and oversampling >= 1, got {n_ant}, {oversampling}")
    n = np.arange(n_ant)[:, None]
    m = np.arange(oversampling * n_ant)[None, :]
    beams = np.exp(2j * np.pi * n * m / (oversampling * n_ant)) / np.sqrt(n_ant)
    return BeamCodebook(beams, oversampling)


def sb_reduce(csi: np.ndarray, grid: SbGrid) -> np.ndarray:
    if csi.shape[0] != grid.n_rb:
        raise ValueError(f"csi has {csi.shape[0]} RBs, grid expects {grid.n_rb}")
    return csi.reshape(grid.n_sb, grid.n_rbpsb, -1).mean(axis=1)


def _check_nonzero(h):
    if not np.any(h):
        raise ValueError("channel vector is zero")


def select_type1(h: np.ndarray, cb: BeamCodebook) -> int:
    """Beam index maximizing ``|h^H w|``; ties go to the lowest index."""
    _check_nonzero(h)
    return int(np.argmax(np.abs(h.conj() @ cb.beams)))


def top_beams(score: np.ndarray, L: int) -> np.ndarray:
    """Indices of the L largest scores, strongest first, ties to lowest index."""
    return np.argsort(-score, kind="stable")[:L]


def _ls_coeffs(B: np.ndarray, target: np.ndarray) -> np.ndarray:
    L = B.shape[1]
    if np.linalg.matrix_rank(B) < L:
        warnings.warn("selected beams are rank deficient; using ridge 1e-12", RuntimeWarning)
        G = B.conj().T @ B + 1e-12 * np.eye(L)
        return np.linalg.solve(G, B.conj().T @ target)
    return np.linalg.lstsq(B, target, rcond=None)[0]


def combine_coeffs(h: np.ndarray, B: np.ndarray, criterion: str) -> np.ndarray:
    """Combining coefficients ``a`` for beams ``B`` so that ``B a / L`` approximates h.

    ``modified``: least-squares fit of ``h / |h|`` in the span of B.
    ``original``: matched combining ``L * B^H h / |h|``.
    """
    L = B.shape[1]
    target = h / np.linalg.norm(h)
    if criterion == "modified":
        return L * _ls_coeffs(B, target)
    if criterion == "original":
        return L * (B.conj().T @ target)
    raise ValueError(f"unknown criterion {criterion!r}")


def select_type2(h: np.ndarray, cb: BeamCodebook, L: int, criterion: str = "modified"):
    _check_nonzero(h)
    if not 1 <= L <= cb.size:
        raise ValueError(f"L={L} outside 1..{cb.size}")
    idx = top_beams(np.abs(h.conj() @ cb.beams), L)
    return idx, combine_coeffs(h, cb.beams[:, idx], criterion)


def encode_type1(csi: np.ndarray, cb: BeamCodebook, grid: SbGrid) -> TypeIReport:
    sb = sb_reduce(csi, grid)
    return TypeIReport(np.array([select_type1(h, cb) for h in sb]), grid.n_rb)


def encode_type2(csi: np.ndarray, cb: BeamCodebook, grid: SbGrid, L: int,
                 criterion: str = "modified") -> TypeIIReport:
    sb = sb_reduce(csi, grid)
    sel = [select_type2(h, cb, L, criterion) for h in sb]
    return TypeIIReport(np.array([s[0] for s in sel]), np.array([s[1] for s in sel]),
                        criterion, grid.n_rb)


def type1_precoders(report: TypeIReport, cb: BeamCodebook) -> np.ndarray:
    return cb.beams[:, report.indices].T


def type2_precoders(report: TypeIIReport, cb: BeamCodebook) -> np.ndarray:
    B = cb.beams[:, report.indices]                      # (A, n_sb, L)
    return np.einsum("asl,sl->sa", B, report.coeffs) / report.L


def wideband_beams(csi: np.ndarray, cb: BeamCodebook, L: int) -> np.ndarray:
    power = (np.abs(csi.conj() @ cb.beams) ** 2).sum(axis=0)
    return top_beams(power, L)


def _compress(delay: np.ndarray, r: float):
    L, m_v = delay.shape
    k = math.ceil(L * m_v / r)
    flat = delay.reshape(-1)
    keep = np.sort(np.argsort(-np.abs(flat), kind="stable")[:k])
    pos = np.stack([keep // m_v, keep % m_v], axis=1)
    return pos, flat[keep]


def encode_etype2(csi: np.ndarray, cb: BeamCodebook, grid: SbGrid, L: int, m_v: int,
                  r: float = 1, variant: str = "modified", offset: int = 0) -> ETypeIIReport:
    """eType II report for one channel (n_rb, n_ant).

    ``truncated`` fits per-subband coefficients, moves them to the delay domain
    over the subband axis and keeps the first ``m_v`` taps. ``modified`` fits
    per-RB coefficients and keeps ``m_v`` uniformly spaced RBs
    (``offset + k * n_rb / m_v``) before the delay transform.
    """
    n_rb = csi.shape[0]
    if r < 1:
        raise ValueError(f"compression factor R must be >= 1, got {r}")
    beams = wideband_beams(csi, cb, L)
    B = cb.beams[:, beams]
    if variant == "modified":
        if n_rb % m_v:
            raise ValueError(f"modified eType II needs M_v | N_RB (M_v={m_v}, N_RB={n_rb})")
        step = n_rb // m_v
        if not 0 <= offset < step:
            raise ValueError(f"offset must lie in [0, {step})")
        rbs = offset + step * np.arange(m_v)
        coeffs = np.array([combine_coeffs(csi[f], B, "modified") for f in rbs])   # (M_v, L)
        delay = to_delay(coeffs, axis=0).T
    elif variant == "truncated":
        if m_v > grid.n_sb:
            raise ValueError(f"truncated eType II needs M_v <= N_3 (M_v={m_v}, N_3={grid.n_sb})")
        sb = sb_reduce(csi, grid)
        coeffs = np.array([combine_coeffs(h, B, "modified") for h in sb])         # (N_3, L)
        delay = to_delay(coeffs, axis=0).T[:, :m_v]
        offset = 0
    else:
        raise ValueError(f"unknown eType II variant {variant!r}")
    pos, vals = _compress(delay, r)
    return ETypeIIReport(beams, variant, m_v, r, pos, vals, n_rb, grid.n_sb, offset)


def decode_etype2(report: ETypeIIReport, cb: BeamCodebook) -> DecodedETypeII:
    pos = np.asarray(report.positions)
    if len({tuple(p) for p in pos.tolist()}) != len(pos):
        raise ValueError("duplicate (beam, tap) positions in eType II report")
    delay = np.zeros((report.L, report.m_v), dtype=complex)
    delay[pos[:, 0], pos[:, 1]] = report.coeffs
    if report.variant == "modified":
        sampled = to_freq(delay, axis=1)
        step = report.n_rb // report.m_v
        positions = report.offset + step * np.arange(report.m_v, dtype=float)
    else:
        padded = np.zeros((report.L, report.n_sb), dtype=complex)
        padded[:, :report.m_v] = delay
        sampled = to_freq(padded, axis=1)
        positions = SbGrid.from_n_sb(report.n_rb, report.n_sb).sb_centers
    return DecodedETypeII(delay, sampled, positions, cb.beams[:, report.beams])


def etype2_delay_matrix(csi, cb, grid, L, m_v, variant="modified", offset=0) -> np.ndarray:
    """Uncompressed delay-domain matrix (L, M_v); equals the R=1 report contents."""
    rep = encode_etype2(csi, cb, grid, L, m_v, 1, variant, offset)
    return decode_etype2(rep, cb).delay


def feedback_overhead(report: PrecoderReport, cb: BeamCodebook) -> dict:
    """Complex-coefficient count and index bits carried by a report."""
    beam_bits = math.ceil(math.log2(cb.size)) if cb.size > 1 else 0
    if isinstance(report, TypeIReport):
        return {"n_coeff": 0, "index_bits": report.n_sb * beam_bits}
    if isinstance(report, TypeIIReport):
        comb_bits = math.ceil(math.log2(math.comb(cb.size, report.L)))
        return {"n_coeff": report.n_sb * report.L, "index_bits": report.n_sb * comb_bits}
    comb_bits = math.ceil(math.log2(math.comb(cb.size, report.L)))
    return {"n_coeff": len(report.coeffs), "index_bits": comb_bits + report.L * report.m_v}


# ---------------------------------------------------------------------------
# JSON serialization, complex blobs as base64 little-endian float32 (re, im)
# ---------------------------------------------------------------------------

def _blob(z: np.ndarray) -> str:
    z = np.asarray(z, dtype=np.complex64)
    return base64.b64encode(z.astype("<c8").tobytes()).decode("ascii")


def _unblob(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<c8").astype(complex).reshape(shape)


def report_to_dict(report: PrecoderReport) -> dict:
    if isinstance(report, TypeIReport):
        return {"schema": SCHEMA_VERSION, "kind": "type1", "n_rb": report.n_rb,
                "indices": report.indices.tolist()}
    if isinstance(report, TypeIIReport):
        return {"schema": SCHEMA_VERSION, "kind": "type2", "n_rb": report.n_rb,
                "criterion": report.criterion, "indices": report.indices.tolist(),
                "coeffs": _blob(report.coeffs), "shape": list(report.coeffs.shape)}
    return {"schema": SCHEMA_VERSION, "kind": "etype2", "n_rb": report.n_rb, "n_sb": report.n_sb,
            "variant": report.variant, "m_v": report.m_v, "r": report.r, "offset": report.offset,
            "beams": report.beams.tolist(), "positions": np.asarray(report.positions).tolist(),
            "coeffs": _blob(report.coeffs)}


def report_from_dict(d: dict) -> PrecoderReport:
    if d.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {d.get('schema')!r}")
    kind = d["kind"]
    if kind == "type1":
        return TypeIReport(np.array(d["indices"], dtype=int), d["n_rb"])
    if kind == "type2":
        return TypeIIReport(np.array(d["indices"], dtype=int), _unblob(d["coeffs"], d["shape"]),
                            d["criterion"], d["n_rb"])
    if kind == "etype2":
        pos = np.array(d["positions"], dtype=int).reshape(-1, 2)
        return ETypeIIReport(np.array(d["beams"], dtype=int), d["variant"], d["m_v"], d["r"], pos,
                             _unblob(d["coeffs"], (len(pos),)), d["n_rb"], d["n_sb"], d["offset"])
    raise ValueError(f"unknown report kind {kind!r}")


def dumps_reports(reports: list[PrecoderReport]) -> str:
    return json.dumps([report_to_dict(r) for r in reports], separators=(",", ":"))


def loads_reports(text: str) -> list[PrecoderReport]:
    return [report_from_dict(d) for d in json.loads(text)]
