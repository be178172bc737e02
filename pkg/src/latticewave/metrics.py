"""Losses and evaluation metrics for 16x16 crack-probability grids.

Implements pixel-wise cross-entropy and focal loss, confusion counting,
DSC/IoU overlap scores, thresholded accuracy, crack-size analysis, and
histogram reports.  All functions are pure and operate on numpy arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-7
DEFAULT_T_BIN = 0.5
DEFAULT_T_TOL = 0.5


@dataclass
class PredictionGrid:
    """Per-sample grid of damage probabilities."""

    probs: np.ndarray  # (16, 16) in [0, 1]
    sample_id: str

    def validate(self) -> None:
        p = np.asarray(self.probs)
        if p.ndim != 2:
            raise ValueError("prediction grid must be 2-D")
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValueError("prediction probabilities must lie in [0, 1]")


# "WPRD" little-endian container: magic, u16 version, u16 id length, utf-8 id,
# u16 rows, u16 cols, f32 probabilities row-major.
_PRED_MAGIC = b"WPRD"
_PRED_VERSION = 1


def save_prediction(grid: PredictionGrid, path: str) -> None:
    grid.validate()
    sid = grid.sample_id.encode()
    ny, nx = grid.probs.shape
    with open(path, "wb") as fh:
        fh.write(_PRED_MAGIC)
        fh.write(struct.pack("<HH", _PRED_VERSION, len(sid)))
        fh.write(sid)
        fh.write(struct.pack("<HH", ny, nx))
        fh.write(np.ascontiguousarray(grid.probs, dtype="<f4").tobytes())


def load_prediction(path: str) -> PredictionGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _PRED_MAGIC:
        raise ValueError(f"{path}: not a prediction grid (bad magic)")
    version, id_len = struct.unpack_from("<HH", data, 4)
    if version != _PRED_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 8
    sid = data[off : off + id_len].decode()
    off += id_len
    ny, nx = struct.unpack_from("<HH", data, off)
    off += 4
    probs = np.frombuffer(data, dtype="<f4", count=ny * nx, offset=off).reshape(ny, nx)
    grid = PredictionGrid(probs=probs.astype(float), sample_id=sid)
    grid.validate()
    return grid


@dataclass(frozen=True)
class FocalParams:
    """Focal loss hyperparameters: class weight and focusing exponent."""

    alpha: float = 0.25
    gamma: float = 2.0

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0.0:
            raise ValueError("gamma must be nonnegative")


def _as_batch(probs, labels):
    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probs {p.shape} vs labels {y.shape}")
    if p.ndim == 2:
        p = p[None]
        y = y[None]
    elif p.ndim != 3:
        raise ValueError("expected 2-D grids or a 3-D batch of grids")
    return p, y


def _p_t(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p_t = np.where(labels > 0.5, probs, 1.0 - probs)
    return np.clip(p_t, EPS, 1.0 - EPS)


def _reduce(per_pixel: np.ndarray, reduction: str) -> float:
    # "sample_sum": sum over pixels, average over samples (printed Eq. form);
    # "mean": grand mean over every pixel of every sample
    if reduction == "sample_sum":
        return float(per_pixel.reshape(per_pixel.shape[0], -1).sum(axis=1).mean())
    if reduction == "mean":
        return float(per_pixel.mean())
    raise ValueError(f"unknown reduction {reduction!r}")


def cross_entropy(probs, labels, reduction: str = "sample_sum") -> float:
    """Pixel-wise binary cross-entropy -log(p_t)."""
    p, y = _as_batch(probs, labels)
    return _reduce(-np.log(_p_t(p, y)), reduction)


def focal_loss(
    probs, labels, params: FocalParams, reduction: str = "sample_sum"
) -> float:
    """Class-weighted, confidence-focused cross-entropy -a_t (1-p_t)^g log(p_t)."""
    params.validate()
    p, y = _as_batch(probs, labels)
    p_t = _p_t(p, y)
    a_t = np.where(y > 0.5, params.alpha, 1.0 - params.alpha)
    return _reduce(-a_t * (1.0 - p_t) ** params.gamma * np.log(p_t), reduction)


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int


def confusion(pred_bits, label_bits) -> Confusion:
    """Per-pixel confusion counts between binary prediction and label."""
    p = np.asarray(pred_bits).astype(bool)
    y = np.asarray(label_bits).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    return Confusion(
        tp=int(np.count_nonzero(p & y)),
        fp=int(np.count_nonzero(p & ~y)),
        tn=int(np.count_nonzero(~p & ~y)),
        fn=int(np.count_nonzero(~p & y)),
    )


def dsc(counts: Confusion) -> float:
    """Dice similarity coefficient; correct all-negative prediction scores 1."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2.0 * counts.tp / denom


def iou(counts: Confusion) -> float:
    """Intersection over union; correct all-negative prediction scores 1."""
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return counts.tp / denom


def binarize(probs, t_bin: float = DEFAULT_T_BIN) -> np.ndarray:
    """Threshold probabilities to a binary grid (strictly greater than t_bin)."""
    return (np.asarray(probs) > t_bin).astype(np.uint8)


def crack_size(label100) -> float:
    """Fraction of lit pixels in the full-resolution label image."""
    bits = np.asarray(label100)
    return float(np.count_nonzero(bits)) / bits.size


@dataclass
class SampleReport:
    sample_id: str
    counts: Confusion
    iou: float
    dsc: float
    crack_size: float = 0.0
    sample_type: str | None = None


@dataclass
class EvalReport:
    """Per-sample scores plus pooled aggregates at the chosen thresholds."""

    samples: list[SampleReport]
    t_bin: float = DEFAULT_T_BIN
    t_tol: float = DEFAULT_T_TOL

    def pooled(self) -> Confusion:
        return Confusion(
            tp=sum(s.counts.tp for s in self.samples),
            fp=sum(s.counts.fp for s in self.samples),
            tn=sum(s.counts.tn for s in self.samples),
            fn=sum(s.counts.fn for s in self.samples),
        )

    def precision(self, average: str = "micro") -> float:
        if average == "micro":
            c = self.pooled()
            return c.tp / (c.tp + c.fp) if c.tp + c.fp else 1.0
        vals = [
            s.counts.tp / (s.counts.tp + s.counts.fp) if s.counts.tp + s.counts.fp else 1.0
            for s in self.samples
        ]
        return float(np.mean(vals))

    def recall(self, average: str = "micro") -> float:
        if average == "micro":
            c = self.pooled()
            return c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
        vals = [
            s.counts.tp / (s.counts.tp + s.counts.fn) if s.counts.tp + s.counts.fn else 1.0
            for s in self.samples
        ]
        return float(np.mean(vals))

    @property
    def mean_iou(self) -> float:
        return float(np.mean([s.iou for s in self.samples]))

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([s.dsc for s in self.samples]))

    @property
    def accuracy(self) -> float:
        return accuracy(self.samples, self.t_tol)


def score_sample(
    grid: PredictionGrid,
    label16,
    t_bin: float = DEFAULT_T_BIN,
    label100=None,
    sample_type: str | None = None,
) -> SampleReport:
    grid.validate()
    counts = confusion(binarize(grid.probs, t_bin), label16)
    return SampleReport(
        sample_id=grid.sample_id,
        counts=counts,
        iou=iou(counts),
        dsc=dsc(counts),
        crack_size=crack_size(label100) if label100 is not None else 0.0,
        sample_type=sample_type,
    )


def evaluate(
    grids: list[PredictionGrid],
    labels16: list,
    t_bin: float = DEFAULT_T_BIN,
    t_tol: float = DEFAULT_T_TOL,
    labels100: list | None = None,
    sample_types: list | None = None,
) -> EvalReport:
    if len(grids) != len(labels16):
        raise ValueError("one label per prediction grid required")
    samples = [
        score_sample(
            g,
            y,
            t_bin,
            labels100[i] if labels100 is not None else None,
            sample_types[i] if sample_types is not None else None,
        )
        for i, (g, y) in enumerate(zip(grids, labels16))
    ]
    return EvalReport(samples=samples, t_bin=t_bin, t_tol=t_tol)


def accuracy(samples: list[SampleReport], t_tol: float = DEFAULT_T_TOL) -> float:
    """Fraction of samples whose IoU strictly exceeds the tolerance."""
    if not samples:
        raise ValueError("accuracy of an empty report set is undefined")
    if not 0.0 <= t_tol <= 1.0:
        raise ValueError("t_tol must lie in [0, 1]")
    return sum(1 for s in samples if s.iou > t_tol) / len(samples)


def adjusted_accuracy(
    samples: list[SampleReport],
    size_cutoffs,
    t_tol: float = DEFAULT_T_TOL,
) -> list[tuple[float, float | None, int]]:
    """Accuracy over samples with crack size >= cutoff; no-crack samples stay.

    Returns (cutoff, accuracy or None for an empty subset, surviving count).
    """
    out = []
    for cutoff in size_cutoffs:
        subset = [s for s in samples if s.crack_size == 0.0 or s.crack_size >= cutoff]
        out.append(
            (float(cutoff), accuracy(subset, t_tol) if subset else None, len(subset))
        )
    return out


@dataclass
class IouHistogram:
    t_bin: float
    edges: np.ndarray
    counts: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.counts)


def iou_histograms(
    grids: list[PredictionGrid],
    labels16: list,
    t_bins,
    bin_width: float = 0.05,
) -> list[IouHistogram]:
    """Per-threshold histograms of per-sample IoU with cumulative counts."""
    t_bins = list(t_bins)
    if not t_bins:
        raise ValueError("at least one binarization threshold required")
    n_bins = int(round(1.0 / bin_width))
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    out = []
    for t_bin in t_bins:
        ious = [score_sample(g, y, t_bin).iou for g, y in zip(grids, labels16)]
        counts, _ = np.histogram(ious, bins=edges)
        # IoU = 1 belongs to the last bin (np.histogram already closes it)
        out.append(IouHistogram(t_bin=float(t_bin), edges=edges, counts=counts))
    return out


def report_table(rows: list[tuple[float, float, EvalReport]], average: str = "micro") -> str:
    """Text table of sweep results: one row per (alpha, gamma) evaluation."""
    header = f"{'alpha':>6} {'gamma':>6} {'prec.':>7} {'recall':>7} {'IoU':>7} {'DSC':>7} {'accu.':>7}"
    lines = [header]
    for alpha, gamma, rep in rows:
        lines.append(
            f"{alpha:6.2f} {gamma:6.2f} "
            f"{rep.precision(average):7.3f} {rep.recall(average):7.3f} "
            f"{rep.mean_iou:7.3f} {rep.mean_dsc:7.3f} {rep.accuracy:7.3f}"
        )
    return "\n".join(lines)


def histogram_table(hists: list[IouHistogram]) -> str:
    """Text dump of IoU histograms and their accumulated counts."""
    lines = []
    for h in hists:
        lines.append(f"# T_bin = {h.t_bin:g}")
        lines.append(f"{'bin_lo':>7} {'bin_hi':>7} {'count':>7} {'cum':>7}")
        cum = h.cumulative
        for i in range(len(h.counts)):
            lines.append(
                f"{h.edges[i]:7.2f} {h.edges[i + 1]:7.2f} {h.counts[i]:7d} {cum[i]:7d}"
            )
    return "\n".join(lines)
