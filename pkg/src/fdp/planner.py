"""Desk-scale dose mimicking: fit a deliverable beamlet dose to objectives.

The deliverable model superposes per-beam beamlet kernels (Gaussian lateral
profile, exponential depth attenuation), so dose is exactly linear in the
non-negative beamlet weights. Objectives are minimized as one-sided smooth
quadratic penalties by projected gradient descent with backtracking; the
dose-volume terms use the same smoothed-quantile surrogate as the training
losses while the final report evaluates everything with exact DVH metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dvh
from .autodiff import soft_quantile_value_and_weights
from .domain import CaseBundle, DomainError, DoseGrid
from .objectives import (
    MEAN_DOSE,
    TARGET_LOWER_DV,
    TARGET_UPPER_DV,
    UPPER_DV,
    ObjectiveSet,
)


class PlanInfeasibleError(DomainError):
    """No beamlet reaches a target volume."""


@dataclass(frozen=True)
class PlannerOptions:
    beamlets_per_axis: int = 9       # per-beam weight map is n x n
    aperture_half_mm: float = 26.0   # beamlet grid extent around the target centroid
    sigma_mm: float = 7.0            # lateral Gaussian width
    mu_per_mm: float = 0.004         # depth attenuation coefficient
    max_iterations: int = 400
    convergence_window: int = 20
    convergence_rel_change: float = 1e-5
    soft_temperature_gy: float = 0.3
    anneal_rounds: int = 2           # extra rounds at halved temperature
    prune_min_ptv_kernel: float = 0.05


@dataclass(frozen=True)
class ObjectiveOutcome:
    structure_name: str
    kind: str
    volume_fraction: float | None
    target_dose: float
    achieved: float
    violation: float
    weighted_penalty: float


@dataclass(frozen=True)
class PenaltyReport:
    outcomes: tuple[ObjectiveOutcome, ...]
    total: float
    iterations: int
    converged: bool
    descent_history: tuple[tuple[float, ...], ...] = ()   # smooth penalty per anneal round

    def __post_init__(self):
        if any(o.violation < 0 or o.weighted_penalty < 0 for o in self.outcomes):
            raise DomainError("violations and penalties must be non-negative")
        if abs(self.total - sum(o.weighted_penalty for o in self.outcomes)) > 1e-9 * max(1.0, self.total):
            raise DomainError("report total must equal the sum of weighted penalties")

    def to_csv(self) -> str:
        lines = ["structure,kind,volume_fraction,target_dose,achieved,violation,weighted_penalty"]
        for o in self.outcomes:
            vf = "" if o.volume_fraction is None else f"{o.volume_fraction}"
            lines.append(f"{o.structure_name},{o.kind},{vf},{o.target_dose},"
                         f"{o.achieved},{o.violation},{o.weighted_penalty}")
        lines.append(f"TOTAL,,,,,,{self.total}")
        return "\n".join(lines) + "\n"


class BeamletModel:
    """Influence matrix of beamlet kernels on the case lattice; dose = A @ w."""

    def __init__(self, case: CaseBundle, opts: PlannerOptions = PlannerOptions()):
        self.case = case
        self.opts = opts
        dims, spacing = case.ct.dims, case.ct.spacing
        ptv_union = np.zeros(dims, bool)
        for s in case.ptvs:
            ptv_union |= s.voxels
        self._build(dims, spacing, ptv_union)

    def _build(self, dims, spacing, ptv_union):
        opts = self.opts
        grids = np.meshgrid(*(np.arange(n) * s for n, s in zip(dims, spacing)), indexing="ij")
        xmm, ymm, zmm = (g.reshape(-1) for g in grids)
        focus = np.array([c[ptv_union.reshape(dims)].mean()
                          for c in (grids[0], grids[1], grids[2])])
        offsets = np.linspace(-opts.aperture_half_mm, opts.aperture_half_mm,
                              opts.beamlets_per_axis)
        ptv_flat = ptv_union.reshape(-1)

        columns = []
        self.beamlet_tags: list[tuple[float, float, float]] = []
        for angle in self.case.beam_angles:
            th = np.deg2rad(float(angle))
            d = np.array([np.cos(th), np.sin(th), 0.0])
            u = np.array([-np.sin(th), np.cos(th), 0.0])
            proj = (xmm - focus[0]) * d[0] + (ymm - focus[1]) * d[1]
            depth = proj - proj.min()
            atten = np.exp(-opts.mu_per_mm * depth)
            lat_u = (xmm - focus[0]) * u[0] + (ymm - focus[1]) * u[1]
            lat_z = zmm - focus[2]
            gu = np.exp(-((lat_u[:, None] - offsets[None, :]) ** 2) / (2 * opts.sigma_mm ** 2))
            gz = np.exp(-((lat_z[:, None] - offsets[None, :]) ** 2) / (2 * opts.sigma_mm ** 2))
            kern = np.einsum("v,vi,vj->vij", atten, gu, gz).reshape(xmm.size, -1)
            keep = kern[ptv_flat].max(axis=0) >= opts.prune_min_ptv_kernel
            columns.append(kern[:, keep].astype(np.float32))
            for flat_idx in np.flatnonzero(keep):
                i, j = divmod(int(flat_idx), offsets.size)
                self.beamlet_tags.append((float(angle), float(offsets[i]), float(offsets[j])))
        influence = np.concatenate(columns, axis=1) if columns else np.zeros((xmm.size, 0), np.float32)
        if influence.shape[1] == 0:
            raise PlanInfeasibleError("no beamlet traverses a PTV")
        self.influence = influence
        self.n_beamlets = influence.shape[1]

    def dose(self, weights: np.ndarray) -> np.ndarray:
        return self.influence @ weights.astype(np.float32)

    def dose_grid(self, weights: np.ndarray) -> DoseGrid:
        vals = self.dose(weights).reshape(self.case.ct.dims)
        return DoseGrid(self.case.ct.dims, self.case.ct.spacing, np.maximum(vals, 0.0))


@dataclass
class _Term:
    kind: str
    mask_idx: np.ndarray
    fraction: float | None
    target: float
    weight: float
    structure: str


def _smooth_value_and_grad(term: _Term, dose_flat, temperature):
    vals = dose_flat[term.mask_idx]
    if term.kind == MEAN_DOSE:
        achieved = float(vals.mean(dtype=np.float64))
        metric_grad = np.full(vals.size, 1.0 / vals.size)
    else:
        achieved, metric_grad = soft_quantile_value_and_weights(vals, term.fraction, temperature)
    if term.kind in (UPPER_DV, MEAN_DOSE, TARGET_UPPER_DV):
        violation = achieved - term.target
        sign = 1.0
    else:   # TARGET_LOWER_DV
        violation = term.target - achieved
        sign = -1.0
    if violation <= 0:
        return 0.0, None, None
    return term.weight * violation * violation, 2.0 * term.weight * violation * sign, metric_grad


def _exact_achieved(term: _Term, dose_flat) -> float:
    vals = dose_flat[term.mask_idx]
    if term.kind == MEAN_DOSE:
        return float(vals.mean(dtype=np.float64))
    svals = np.sort(vals.astype(np.float64))
    return float(dvh._interp_order_stat(svals, 1.0 - term.fraction))


def _build_terms(case: CaseBundle, objectives: ObjectiveSet) -> list[_Term]:
    masks = {s.name: np.flatnonzero(s.voxels.reshape(-1)) for s in case.structures}
    terms = []
    for o in objectives.objectives:
        if o.structure_name not in masks:
            raise DomainError(f"objective references unknown structure {o.structure_name}")
        terms.append(_Term(o.kind, masks[o.structure_name], o.volume_fraction,
                           o.dose, o.weight, o.structure_name))
    return terms


def solve_plan(case: CaseBundle, objectives: ObjectiveSet,
               opts: PlannerOptions = PlannerOptions(),
               model: BeamletModel | None = None) -> tuple[DoseGrid, PenaltyReport]:
    """Projected gradient descent on non-negative beamlet weights.

    Descent is monotone (backtracking line search); convergence is declared
    when the relative penalty change over a trailing window drops below the
    configured threshold, with temperature-annealed refinement rounds.
    """
    if not objectives.objectives:
        raise DomainError("objective set is empty")
    model = model or BeamletModel(case, opts)
    terms = _build_terms(case, objectives)

    def smooth_penalty_and_grad(dose_flat, temperature):
        total = 0.0
        gdose = np.zeros_like(dose_flat, dtype=np.float64)
        for term in terms:
            pen, dpen, mgrad = _smooth_value_and_grad(term, dose_flat, temperature)
            total += pen
            if dpen is not None:
                gdose[term.mask_idx] += dpen * mgrad
        return total, gdose

    w = np.zeros(model.n_beamlets, dtype=np.float64)
    dose_flat = np.zeros(model.influence.shape[0], dtype=np.float64)
    step = 1.0
    iterations = 0
    converged = False
    rounds: list[tuple[float, ...]] = []

    temperature = opts.soft_temperature_gy
    for _round in range(1 + opts.anneal_rounds):
        penalty, gdose = smooth_penalty_and_grad(dose_flat, temperature)
        history = [penalty]
        while iterations < opts.max_iterations:
            if not np.isfinite(penalty):
                raise DomainError("non-finite penalty during optimization")
            if penalty <= 1e-18:
                converged = True
                break
            gw = model.influence.T @ gdose.astype(np.float32)
            accepted = False
            for _ in range(40):
                w_new = np.maximum(0.0, w - step * gw)
                dose_new = (model.influence @ w_new.astype(np.float32)).astype(np.float64)
                pen_new, gdose_new = smooth_penalty_and_grad(dose_new, temperature)
                if pen_new <= penalty:
                    accepted = True
                    break
                step *= 0.5
            iterations += 1
            if not accepted:
                break
            w, dose_flat, penalty, gdose = w_new, dose_new, pen_new, gdose_new
            step *= 1.25
            history.append(penalty)
            win = opts.convergence_window
            if len(history) > win:
                past = history[-win - 1]
                if past - penalty <= opts.convergence_rel_change * max(past, 1e-12):
                    converged = True
                    break
        rounds.append(tuple(history))
        temperature *= 0.5

    achieved = model.dose_grid(w)
    achieved_flat = achieved.values.reshape(-1).astype(np.float64)
    outcomes = []
    total = 0.0
    for term in terms:
        value = _exact_achieved(term, achieved_flat)
        if term.kind == TARGET_LOWER_DV:
            viol = max(0.0, term.target - value)
        else:
            viol = max(0.0, value - term.target)
        pen = term.weight * viol * viol
        total += pen
        outcomes.append(ObjectiveOutcome(term.structure, term.kind, term.fraction,
                                         term.target, value, viol, pen))
    report = PenaltyReport(tuple(outcomes), total, iterations, converged, tuple(rounds))
    return achieved, report


def evaluate_plan(achieved: DoseGrid, case: CaseBundle) -> dict[str, dict]:
    """Per-structure DVH and summary metrics of an achieved dose."""
    out: dict[str, dict] = {}
    for s in case.structures:
        entry = {
            "dvh": dvh.compute_dvh(achieved, s),
            "mean_gy": dvh.mean_dose(achieved, s),
            "max_gy": dvh.max_dose(achieved, s),
        }
        if s.kind == "PTV":
            entry["hi"] = dvh.homogeneity_index(achieved, s)
            entry["ci"] = dvh.conformity_index(achieved, s, s.prescription)
        out[s.name] = entry
    return out
