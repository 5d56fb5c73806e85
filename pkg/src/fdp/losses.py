"""Differentiable loss kernels for both training stages.

All kernels operate on `autodiff.Tensor`s and are gradient-checked against
central finite differences. Dose-volume quantities inside `objective_loss`
use the smoothed-quantile surrogate (exact quantiles are piecewise constant
and carry no gradient); evaluation code uses the exact dvh module instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dvh
from .domain import CaseBundle, DomainError, DoseGrid, PreferenceVector

# smoothing width of the soft dose-quantile surrogate, in the dose unit
# of the tensor it is applied to
DEFAULT_SOFT_TEMPERATURE_GY = 0.5

MASKED_MAE_THRESHOLD_GY = 5.0


@dataclass(frozen=True)
class LossConfig:
    """Stage-wide loss weights; values are conventions, recorded here once."""

    vq_commitment: float = 0.25        # codebook commitment weight
    uniformity_weight: float = 0.1     # latent uniformity weight
    uniformity_temperature: float = 2.0
    adversarial: str = "least-squares"

    def __post_init__(self):
        if min(self.vq_commitment, self.uniformity_weight, self.uniformity_temperature) <= 0:
            raise DomainError("loss weights and temperature must be positive")


@dataclass(frozen=True)
class ReferenceSummaries:
    """Per-structure reference statistics consumed by objective_loss."""

    ptv_mean: dict[str, float]
    oar_mean: dict[str, float]


def reference_summaries(case: CaseBundle) -> ReferenceSummaries:
    if case.reference_dose is None:
        raise DomainError(f"{case.case_id}: case has no reference dose")
    ref = case.reference_dose
    return ReferenceSummaries(
        ptv_mean={s.name: dvh.mean_dose(ref, s) for s in case.ptvs},
        oar_mean={s.name: dvh.mean_dose(ref, s) for s in case.oars},
    )


def recon_loss(x: ad.Tensor, xhat: ad.Tensor) -> ad.Tensor:
    """Mean absolute deviation over all elements."""
    if x.data.shape != xhat.data.shape:
        raise ad.ShapeError(f"recon_loss: shapes {x.data.shape} vs {xhat.data.shape}")
    return ad.mean(ad.tabs(ad.sub(x, xhat)))


def vq_loss(z_e: ad.Tensor, z_q: ad.Tensor, beta: float) -> ad.Tensor:
    """Codebook + commitment terms; stop-gradients route each to one side."""
    if z_e.data.shape != z_q.data.shape:
        raise ad.ShapeError(f"vq_loss: shapes {z_e.data.shape} vs {z_q.data.shape}")
    codebook_term = ad.sub(ad.stop_gradient(z_e), z_q)
    commit_term = ad.sub(z_e, ad.stop_gradient(z_q))
    return ad.add(ad.mean(ad.mul(codebook_term, codebook_term)),
                  ad.mul(ad.mean(ad.mul(commit_term, commit_term)), float(beta)))


def adv_loss_d(scores_real: ad.Tensor, scores_fake: ad.Tensor) -> ad.Tensor:
    """Least-squares discriminator loss: E[(D(x)-1)^2] + E[D(xhat)^2]."""
    real_term = ad.sub(scores_real, 1.0)
    return ad.add(ad.mean(ad.mul(real_term, real_term)),
                  ad.mean(ad.mul(scores_fake, scores_fake)))


def adv_loss_g(scores_fake: ad.Tensor) -> ad.Tensor:
    """Least-squares generator loss: E[(D(xhat)-1)^2]."""
    term = ad.sub(scores_fake, 1.0)
    return ad.mean(ad.mul(term, term))


def uniformity_loss(latents: ad.Tensor, temperature: float, weight: float) -> ad.Tensor:
    """weight * log E_{i<j} exp(-t * ||z_i - z_j||^2) over per-sample flattened latents.

    Computed over off-diagonal pairs with a constant log-sum-exp shift, so it
    stays finite for well-separated latents.
    """
    b = latents.data.shape[0]
    if b < 2:
        raise DomainError(f"uniformity_loss needs a batch of >= 2 latents, got {b}")
    z = ad.reshape(latents, (b, -1))
    d = ad.pairwise_sq_dist(z)
    off_diag = np.flatnonzero(~np.eye(b, dtype=bool).ravel())
    neg = ad.mul(ad.gather(d, off_diag), -float(temperature))
    shift = float(neg.data.max())           # constant shift: exact for log-sum-exp
    stabilized = ad.log(ad.mean(ad.exp(ad.sub(neg, shift))))
    return ad.mul(ad.add(stabilized, shift), float(weight))


def masked_mae(x: ad.Tensor, xhat: ad.Tensor,
               threshold: float = MASKED_MAE_THRESHOLD_GY) -> ad.Tensor:
    """Mean absolute error over voxels where the reference is >= threshold."""
    if x.data.shape != xhat.data.shape:
        raise ad.ShapeError(f"masked_mae: shapes {x.data.shape} vs {xhat.data.shape}")
    idx = np.flatnonzero(x.data.ravel() >= float(threshold))
    if idx.size == 0:
        raise dvh.EmptyMaskError(f"no reference voxels reach {threshold}")
    diff = ad.sub(ad.gather(x, idx), ad.gather(xhat, idx))
    return ad.mean(ad.tabs(diff))


def _soft_hi(values: ad.Tensor, temperature: float) -> ad.Tensor:
    d05 = ad.soft_quantile(values, 0.05, temperature)
    d50 = ad.soft_quantile(values, 0.50, temperature)
    d95 = ad.soft_quantile(values, 0.95, temperature)
    return ad.div(ad.sub(d05, d95), d50)


def objective_loss(pred_dose: ad.Tensor, case: CaseBundle, pref: PreferenceVector,
                   summaries: ReferenceSummaries,
                   temperature: float = DEFAULT_SOFT_TEMPERATURE_GY) -> ad.Tensor:
    """Preference-alignment penalty of a single predicted dose volume.

    Sum over PTVs of |h_pref - h_pred| and |ptv_mean_ref - ptv_mean_pred|,
    plus sum over OARs of |w_pref * oar_mean_ref - oar_mean_pred|. The dose
    tensor, summaries and temperature must share one dose unit.
    """
    n = case.ct.voxel_count
    if pred_dose.data.size != n:
        raise ad.ShapeError(
            f"objective_loss: prediction has {pred_dose.data.size} voxels, case grid has {n}")
    flat = ad.reshape(pred_dose, (n,))
    pref.validate_for_case(case)
    terms: list[ad.Tensor] = []
    for s in case.ptvs:
        if s.name not in summaries.ptv_mean:
            raise DomainError(f"missing reference summary for {s.name}")
        vals = ad.gather(flat, np.flatnonzero(s.voxels.ravel()))
        terms.append(ad.tabs(ad.sub(_soft_hi(vals, temperature), pref.hi_target[s.name])))
        terms.append(ad.tabs(ad.sub(ad.mean(vals), float(summaries.ptv_mean[s.name]))))
    for s in case.oars:
        if s.name not in summaries.oar_mean:
            raise DomainError(f"missing reference summary for {s.name}")
        vals = ad.gather(flat, np.flatnonzero(s.voxels.ravel()))
        target = pref.oar_weight[s.name] * float(summaries.oar_mean[s.name])
        terms.append(ad.tabs(ad.sub(ad.mean(vals), target)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def objective_alignment_exact(pred_dose: DoseGrid, case: CaseBundle,
                              pref: PreferenceVector,
                              summaries: ReferenceSummaries) -> float:
    """Evaluation-side counterpart of objective_loss using exact DVH metrics."""
    pref.validate_for_case(case)
    total = 0.0
    for s in case.ptvs:
        total += abs(dvh.homogeneity_index(pred_dose, s) - pref.hi_target[s.name])
        total += abs(dvh.mean_dose(pred_dose, s) - summaries.ptv_mean[s.name])
    for s in case.oars:
        total += abs(dvh.mean_dose(pred_dose, s)
                     - pref.oar_weight[s.name] * summaries.oar_mean[s.name])
    return float(total)
