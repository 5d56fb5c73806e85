"""Expected-vs-achieved DVH difference statistics and plan categorization.

Intra-patient statistics summarize the spread of the per-curve differences
within each patient; inter-patient statistics summarize the spread of the
per-patient aggregates across the cohort. Categorization compares one
engine's metric against a baseline with the similarity thresholds of
1 Gy for OAR mean dose and 0.015 for PTV indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import DomainError
from .dvh import DVHCurve

DVH_LEN = 101

OAR_MEAN = "oar_mean"
PTV_HI = "ptv_hi"
PTV_CI = "ptv_ci"

SIMILAR_THRESHOLD = {OAR_MEAN: 1.0, PTV_HI: 0.015, PTV_CI: 0.015}
# lower is better for OAR dose and HI; higher is better for CI
HIGHER_IS_BETTER = {OAR_MEAN: False, PTV_HI: False, PTV_CI: True}

BETTER, WORSE, SIMILAR = "better", "worse", "similar"


@dataclass(frozen=True)
class DVHDifference:
    """Expected-minus-achieved dose differences on the 101-point grid."""

    structure_name: str
    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.shape != (DVH_LEN,):
            raise DomainError(f"{self.structure_name}: need {DVH_LEN} samples, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"{self.structure_name}: differences must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @staticmethod
    def between(expected: DVHCurve, achieved: DVHCurve) -> "DVHDifference":
        return DVHDifference(expected.structure_name,
                             expected.dose_at_fraction - achieved.dose_at_fraction)


@dataclass(frozen=True)
class CohortStats:
    structure_name: str
    mu_tra: float
    sigma_tra: float
    mu_ter: float
    sigma_ter: float
    mean_abs: float
    n_patients: int

    def __post_init__(self):
        if self.sigma_tra < 0 or self.sigma_ter < 0:
            raise DomainError("standard deviations must be non-negative")


def _stack(diffs: list[DVHDifference]) -> np.ndarray:
    if not diffs:
        raise DomainError("need at least one patient difference")
    return np.stack([d.samples for d in diffs])


def intra_stats(diffs: list[DVHDifference]) -> tuple[float, float]:
    """Grand mean of signed differences and the mean per-patient spread.

    The spread is each patient's population standard deviation around that
    patient's own mean, averaged over patients.
    """
    mat = _stack(diffs)
    mu = float(mat.mean(dtype=np.float64))
    per_patient_mean = mat.mean(axis=1, keepdims=True, dtype=np.float64)
    sigma = float(np.mean(np.sqrt(np.mean((mat - per_patient_mean) ** 2, axis=1,
                                          dtype=np.float64))))
    return mu, sigma


def inter_stats(diffs: list[DVHDifference]) -> tuple[float, float]:
    """Mean and population standard deviation of per-patient aggregates.

    The aggregate is the patient's mean difference over the DVH axis; the
    spread therefore needs at least two patients.
    """
    mat = _stack(diffs)
    aggregates = mat.mean(axis=1, dtype=np.float64)
    mu = float(aggregates.mean())
    if aggregates.size < 2:
        raise DomainError("inter-patient spread needs >= 2 patients")
    sigma = float(np.sqrt(np.mean((aggregates - mu) ** 2)))
    return mu, sigma


def mean_abs_difference(diffs: list[DVHDifference]) -> float:
    """Secondary magnitude column: grand mean of |difference|."""
    return float(np.abs(_stack(diffs)).mean(dtype=np.float64))


def cohort_stats(structure_name: str, diffs: list[DVHDifference]) -> CohortStats:
    mu_tra, sigma_tra = intra_stats(diffs)
    if len(diffs) >= 2:
        mu_ter, sigma_ter = inter_stats(diffs)
    else:
        mu_ter, sigma_ter = float(_stack(diffs).mean(dtype=np.float64)), 0.0
    return CohortStats(structure_name, mu_tra, sigma_tra, mu_ter, sigma_ter,
                       mean_abs_difference(diffs), len(diffs))


def categorize(metric_fdp: float, metric_baseline: float, structure_kind: str) -> str:
    """better / worse / similar with the per-kind similarity threshold."""
    if structure_kind not in SIMILAR_THRESHOLD:
        raise DomainError(f"unknown structure kind {structure_kind!r}")
    if not (np.isfinite(metric_fdp) and np.isfinite(metric_baseline)):
        raise DomainError("metrics must be finite")
    delta = float(metric_fdp) - float(metric_baseline)
    if abs(delta) <= SIMILAR_THRESHOLD[structure_kind]:
        return SIMILAR
    if HIGHER_IS_BETTER[structure_kind]:
        return BETTER if delta > 0 else WORSE
    return BETTER if delta < 0 else WORSE


@dataclass(frozen=True)
class CategoryRow:
    structure_name: str
    kind: str
    better_pct: float
    worse_pct: float
    similar_pct: float
    counted_better: bool


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[CategoryRow, ...]
    oar_better_count: int
    ptv_better_count: int

    def to_csv(self) -> str:
        lines = ["structure,kind,better_pct,worse_pct,similar_pct,counted_better"]
        for r in self.rows:
            lines.append(f"{r.structure_name},{r.kind},{r.better_pct:.2f},"
                         f"{r.worse_pct:.2f},{r.similar_pct:.2f},{int(r.counted_better)}")
        lines.append(f"OAR_count,,,,,{self.oar_better_count}")
        lines.append(f"PTV_count,,,,,{self.ptv_better_count}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max((len(r.structure_name) for r in self.rows), default=8) + 2
        out = [f"{'structure':<{width}}{'kind':<10}{'better':>8}{'worse':>8}{'similar':>9}"]
        for r in self.rows:
            mark = " *" if r.counted_better else ""
            out.append(f"{r.structure_name:<{width}}{r.kind:<10}"
                       f"{r.better_pct:>7.2f}%{r.worse_pct:>7.2f}%{r.similar_pct:>8.2f}%{mark}")
        out.append(f"better count: OAR {self.oar_better_count}, PTV {self.ptv_better_count}")
        return "\n".join(out) + "\n"


def comparison_table(entries: list[tuple[str, str, float, float]]) -> ComparisonTable:
    """Per-structure category percentages from (structure, kind, ours, baseline) rows.

    A structure contributes to its group's better-count when its better
    percentage strictly exceeds its worse percentage.
    """
    by_row: dict[tuple[str, str], list[str]] = {}
    for name, kind, ours, base in entries:
        by_row.setdefault((name, kind), []).append(categorize(ours, base, kind))
    rows = []
    oar_count = 0
    ptv_count = 0
    for name, kind in sorted(by_row):
        cats = by_row[(name, kind)]
        n = len(cats)
        better = 100.0 * cats.count(BETTER) / n
        worse = 100.0 * cats.count(WORSE) / n
        similar = 100.0 * cats.count(SIMILAR) / n
        counted = better > worse
        if counted:
            if kind == OAR_MEAN:
                oar_count += 1
            else:
                ptv_count += 1
        rows.append(CategoryRow(name, kind, better, worse, similar, counted))
    return ComparisonTable(tuple(rows), oar_count, ptv_count)


# ---------------------------------------------------------------------------
# cohort stats rendering ("shaded" mean rows, emphasized sigma rows)
# ---------------------------------------------------------------------------

def stats_table_csv(stats: list[CohortStats]) -> str:
    lines = ["structure,row,value_gy,emphasis"]
    for st in stats:
        lines.append(f"{st.structure_name},sigma_tra,{st.sigma_tra:.6f},bold")
        lines.append(f"{st.structure_name},mu_tra,{st.mu_tra:.6f},shaded")
        lines.append(f"{st.structure_name},mean_abs_tra,{st.mean_abs:.6f},shaded")
        lines.append(f"{st.structure_name},sigma_ter,{st.sigma_ter:.6f},bold")
        lines.append(f"{st.structure_name},mu_ter,{st.mu_ter:.6f},shaded")
    return "\n".join(lines) + "\n"


def stats_table_text(stats: list[CohortStats]) -> str:
    width = max((len(s.structure_name) for s in stats), default=9) + 2
    head = (f"{'structure':<{width}}{'sigma_tra':>11}{'mu_tra':>9}{'|mu|_tra':>10}"
            f"{'sigma_ter':>11}{'mu_ter':>9}{'n':>4}")
    out = [head]
    for st in stats:
        out.append(f"{st.structure_name:<{width}}{st.sigma_tra:>11.3f}{st.mu_tra:>9.3f}"
                   f"{st.mean_abs:>10.3f}{st.sigma_ter:>11.3f}{st.mu_ter:>9.3f}"
                   f"{st.n_patients:>4}")
    out.append("sigma columns carry the comparison weight; mean columns are shaded context")
    return "\n".join(out) + "\n"
