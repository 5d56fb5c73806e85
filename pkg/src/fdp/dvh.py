"""Cumulative DVH curves and the plan-quality indices built on them.

Quantile convention used everywhere (curves, percentiles, indices): linear
interpolation between closest order statistics, i.e. the value at volume
fraction f is the (1-f)-quantile with position (1-f)*(n-1) into the
ascending-sorted in-mask doses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import DomainError, DoseGrid, StructureMask

VOLUME_FRACTIONS = np.round(np.arange(101) / 100.0, 2)


class EmptyMaskError(DomainError):
    """Structure mask selects no voxels of the dose grid."""


@dataclass(frozen=True)
class DVHCurve:
    """Cumulative DVH sampled on the fixed 101-point volume-fraction grid."""

    structure_name: str
    volume_fractions: np.ndarray
    dose_at_fraction: np.ndarray

    def __post_init__(self):
        vf = np.asarray(self.volume_fractions, dtype=np.float64)
        dose = np.asarray(self.dose_at_fraction, dtype=np.float64)
        if vf.shape != (101,) or dose.shape != (101,):
            raise DomainError("DVH curves use the fixed 101-point fraction grid")
        if not np.all(np.isfinite(dose)) or np.any(dose < 0):
            raise DomainError(f"{self.structure_name}: DVH doses must be finite and >= 0")
        if np.any(np.diff(dose) > 0):
            raise DomainError(f"{self.structure_name}: DVH must be non-increasing")
        vf.setflags(write=False)
        dose.setflags(write=False)
        object.__setattr__(self, "volume_fractions", vf)
        object.__setattr__(self, "dose_at_fraction", dose)

    def to_csv(self) -> str:
        lines = ["volume_fraction,dose_gy"]
        for f, d in zip(self.volume_fractions, self.dose_at_fraction):
            lines.append(f"{f:.2f},{float(d)!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(name: str, text: str) -> "DVHCurve":
        rows = [ln for ln in text.strip().splitlines() if ln and not ln.startswith("volume_fraction")]
        vals = np.array([[float(t) for t in ln.split(",")] for ln in rows])
        return DVHCurve(name, vals[:, 0], vals[:, 1])


def _masked_doses(dose: DoseGrid, mask: StructureMask) -> np.ndarray:
    if mask.voxels.shape != dose.dims:
        raise DomainError(
            f"{mask.name}: mask shape {mask.voxels.shape} != dose dims {dose.dims}")
    vals = dose.values[mask.voxels]
    if vals.size == 0:
        raise EmptyMaskError(f"{mask.name}: empty mask")
    return np.sort(vals.astype(np.float64))


def _interp_order_stat(sorted_vals: np.ndarray, q) -> np.ndarray:
    """(n-1)-scaled linear interpolation, identical rule to numpy's linear quantile."""
    n = sorted_vals.size
    pos = np.asarray(q, dtype=np.float64) * (n - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    return sorted_vals[lo] + frac * (sorted_vals[hi] - sorted_vals[lo])


def compute_dvh(dose: DoseGrid, mask: StructureMask) -> DVHCurve:
    """Cumulative DVH: dose_at_fraction[k] is the (1 - k/100)-quantile of in-mask dose."""
    svals = _masked_doses(dose, mask)
    doses = _interp_order_stat(svals, 1.0 - VOLUME_FRACTIONS)
    return DVHCurve(mask.name, VOLUME_FRACTIONS, doses)


def dose_percentile(dose: DoseGrid, mask: StructureMask, t: float) -> float:
    """D_t: the dose received by at least t% of the structure volume."""
    t = float(t)
    if not (0.0 < t < 100.0):
        raise DomainError(f"percentile t must lie strictly inside (0, 100), got {t}")
    svals = _masked_doses(dose, mask)
    return float(_interp_order_stat(svals, 1.0 - t / 100.0))


def mean_dose(dose: DoseGrid, mask: StructureMask) -> float:
    """Arithmetic mean of in-mask dose (64-bit accumulation)."""
    if mask.voxels.shape != dose.dims:
        raise DomainError(
            f"{mask.name}: mask shape {mask.voxels.shape} != dose dims {dose.dims}")
    vals = dose.values[mask.voxels]
    if vals.size == 0:
        raise EmptyMaskError(f"{mask.name}: empty mask")
    return float(np.mean(vals, dtype=np.float64))


def max_dose(dose: DoseGrid, mask: StructureMask) -> float:
    if mask.voxels.shape != dose.dims:
        raise DomainError(
            f"{mask.name}: mask shape {mask.voxels.shape} != dose dims {dose.dims}")
    vals = dose.values[mask.voxels]
    if vals.size == 0:
        raise EmptyMaskError(f"{mask.name}: empty mask")
    return float(vals.max())


def homogeneity_index(dose: DoseGrid, ptv_mask: StructureMask) -> float:
    """HI = (D_05 - D_95) / D_50; lower is more uniform."""
    svals = _masked_doses(dose, ptv_mask)
    d05, d50, d95 = _interp_order_stat(svals, [0.95, 0.50, 0.05])
    if d50 <= 0:
        raise DomainError(f"{ptv_mask.name}: median dose is zero, HI undefined")
    return float((d05 - d95) / d50)


def conformity_index(dose: DoseGrid, ptv_mask: StructureMask, prescription: float) -> float:
    """Fraction of the PTV receiving at least the prescription."""
    if not (float(prescription) > 0):
        raise DomainError(f"prescription must be positive, got {prescription}")
    if ptv_mask.voxels.shape != dose.dims:
        raise DomainError(
            f"{ptv_mask.name}: mask shape {ptv_mask.voxels.shape} != dose dims {dose.dims}")
    vals = dose.values[ptv_mask.voxels]
    if vals.size == 0:
        raise EmptyMaskError(f"{ptv_mask.name}: empty mask")
    return float(np.count_nonzero(vals >= float(prescription)) / vals.size)
