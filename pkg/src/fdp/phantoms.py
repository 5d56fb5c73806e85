"""Procedural phantom cases with analytic, style-tunable reference doses.

Each phantom is fully determined by its seed: body/PTV/OAR geometry, a
CT-like volume, beam angles, and a reference dose built from

  - per-PTV plateaus at prescription * PLATEAU_MARGIN carrying a smooth
    zero-mean noise field whose amplitude is solved in closed form so the
    measured HI equals the requested value,
  - an exponential falloff outside the PTVs, boosted along beam corridors,
  - a per-OAR multiplicative attenuation, so each OAR's mean dose scales
    exactly linearly with its sparing parameter.

Because the plateau noise is recoverable from the stored reference dose,
`rebuild_reference` can re-target any case to new slider values without
knowing the generation seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .domain import (
    HI_RANGE,
    OAR,
    OAR_WEIGHT_RANGE,
    PTV,
    CaseBundle,
    DomainError,
    DoseGrid,
    StructureMask,
)
from . import dvh

DEFAULT_DIMS = (32, 32, 32)
DEFAULT_SPACING = (4.0, 4.0, 4.0)

PTV_PRESCRIPTIONS = (70.0, 60.0, 54.0)
PLATEAU_MARGIN = 1.15          # plateau level over prescription; keeps CI >= 0.95
FALLOFF_MM = 18.0              # exponential falloff length outside PTVs
CORRIDOR_BOOST = 0.35          # multiplicative dose boost inside beam corridors
CORRIDOR_HALF_WIDTH_MM = 10.0
CORRIDOR_HALF_HEIGHT_MM = 16.0
NOISE_SMOOTH_VOXELS = 1.5

MAX_PLACE_ATTEMPTS = 200


class PhantomGeometryError(DomainError):
    """Structure placement failed after the bounded retry budget."""


@dataclass(frozen=True)
class PhantomStyle:
    alpha_hi: float
    alpha_spare: tuple[float, ...]   # one multiplier per OAR, generation order

    def __post_init__(self):
        if not (HI_RANGE[0] <= self.alpha_hi <= HI_RANGE[1]):
            raise DomainError(f"alpha_hi={self.alpha_hi} outside {HI_RANGE}")
        for w in self.alpha_spare:
            if not (OAR_WEIGHT_RANGE[0] <= w <= OAR_WEIGHT_RANGE[1]):
                raise DomainError(f"alpha_spare entry {w} outside {OAR_WEIGHT_RANGE}")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    n_ptv: int
    n_oar: int
    style: PhantomStyle
    beam_angles: tuple[float, ...]

    def __post_init__(self):
        if not (1 <= self.n_ptv <= 3):
            raise DomainError(f"n_ptv must be 1..3, got {self.n_ptv}")
        if not (2 <= self.n_oar <= 6):
            raise DomainError(f"n_oar must be 2..6, got {self.n_oar}")
        if len(self.style.alpha_spare) != self.n_oar:
            raise DomainError("style.alpha_spare must have one entry per OAR")
        for a in self.beam_angles:
            if not (0 <= float(a) < 360):
                raise DomainError(f"beam angle {a} outside [0, 360)")


def random_spec(seed: int) -> PhantomSpec:
    """Draw a full phantom specification from one seed."""
    rng = np.random.default_rng(int(seed))
    n_ptv = int(rng.integers(1, 4))
    n_oar = int(rng.integers(2, 7))
    alpha_hi = float(rng.uniform(*HI_RANGE))
    alpha_spare = tuple(float(rng.uniform(*OAR_WEIGHT_RANGE)) for _ in range(n_oar))
    n_beams = int(rng.integers(4, 9))
    offset = float(rng.uniform(0, 360.0 / n_beams))
    angles = tuple(float((offset + 360.0 * i / n_beams) % 360.0) for i in range(n_beams))
    return PhantomSpec(int(seed), n_ptv, n_oar, PhantomStyle(alpha_hi, alpha_spare), angles)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _voxel_coords(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def _ellipsoid(dims, center, semi_axes) -> np.ndarray:
    X, Y, Z = _voxel_coords(dims)
    q = ((X - center[0]) / semi_axes[0]) ** 2 + ((Y - center[1]) / semi_axes[1]) ** 2 \
        + ((Z - center[2]) / semi_axes[2]) ** 2
    return q <= 1.0


def _tube(dims, center, radius, half_len) -> np.ndarray:
    X, Y, Z = _voxel_coords(dims)
    return (((X - center[0]) ** 2 + (Y - center[1]) ** 2) <= radius ** 2) \
        & (np.abs(Z - center[2]) <= half_len)


def _place_structures(rng, dims, body):
    """Sample disjoint PTV and OAR masks inside the body; bounded retries."""
    occupied = np.zeros(dims, dtype=bool)

    def try_place(make_candidate) -> np.ndarray:
        for _ in range(MAX_PLACE_ATTEMPTS):
            cand = make_candidate()
            if not cand.any():
                continue
            if (cand & ~body).any():
                continue
            if (cand & occupied).any():
                continue
            occupied[:] |= ndimage.binary_dilation(cand, iterations=2)
            return cand
        raise PhantomGeometryError("no feasible placement after retry budget")

    center = np.array(dims, dtype=np.float64) / 2.0

    def ptv_candidate():
        c = center[:2] + rng.uniform(-6, 6, size=2)
        cz = center[2] + rng.uniform(-5, 5)
        axes = rng.uniform(2.6, 4.2, size=3)
        return _ellipsoid(dims, (c[0], c[1], cz), axes)

    def oar_candidate():
        c = center[:2] + rng.uniform(-9, 9, size=2)
        cz = center[2] + rng.uniform(-8, 8)
        if rng.random() < 0.3:
            return _tube(dims, (c[0], c[1], cz), rng.uniform(1.4, 2.4), rng.uniform(4, 8))
        return _ellipsoid(dims, (c[0], c[1], cz), rng.uniform(1.8, 3.4, size=3))

    return try_place, ptv_candidate, oar_candidate


def beam_plate(dims, spacing, beam_angles, focus_voxel) -> np.ndarray:
    X, Y, Z = _voxel_coords(dims)
    mm = [c * s for c, s in zip((X, Y, Z), spacing)]
    focus = [f * s for f, s in zip(focus_voxel, spacing)]
    plate = np.zeros(dims, dtype=bool)
    for angle in beam_angles:
        th = np.deg2rad(float(angle))
        ux, uy = np.cos(th), np.sin(th)
        px, py = mm[0] - focus[0], mm[1] - focus[1]
        lateral = np.abs(px * uy - py * ux)
        plate |= (lateral <= CORRIDOR_HALF_WIDTH_MM) \
            & (np.abs(mm[2] - focus[2]) <= CORRIDOR_HALF_HEIGHT_MM)
    return plate


def _noise_field(case_id: str, dims, salt: int = 0) -> np.ndarray:
    digest = hashlib.sha256(f"{case_id}:{salt}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    white = rng.standard_normal(dims)
    return ndimage.gaussian_filter(white, NOISE_SMOOTH_VOXELS)


def _amplitude_for_hi(eta: np.ndarray, hi: float) -> float:
    """Closed-form plateau-noise amplitude so that measured HI equals `hi`.

    For dose = const * (1 + a*eta), HI = a*(q05-q95)/(1+a*q50) with q the
    interpolated quantiles of eta (affine equivariance of the quantile rule).
    """
    svals = np.sort(eta.astype(np.float64))
    q05, q50, q95 = dvh._interp_order_stat(svals, [0.95, 0.50, 0.05])
    spread = q05 - q95
    a = hi / (spread - hi * q50)
    if not (a > 0):
        raise PhantomGeometryError("degenerate plateau noise field")
    return float(a)


def _standardized_ptv_noise(field: np.ndarray, mask: np.ndarray) -> np.ndarray:
    vals = field[mask]
    sd = vals.std()
    if sd <= 0:
        raise PhantomGeometryError("flat noise field inside PTV")
    return (vals - vals.mean()) / sd


# ---------------------------------------------------------------------------
# reference dose composition
# ---------------------------------------------------------------------------

def _compose_reference(case_id, dims, spacing, ptvs, oars, beam_angles,
                       hi_by_ptv, spare_by_oar, noise_salt=0) -> np.ndarray:
    ptv_union = np.zeros(dims, dtype=bool)
    for s in ptvs:
        ptv_union |= s.voxels
    focus = np.array(np.nonzero(ptv_union)).mean(axis=1)

    # out-of-PTV falloff, strongest PTV wins
    falloff = np.zeros(dims, dtype=np.float64)
    for s in ptvs:
        dist_mm = ndimage.distance_transform_edt(~s.voxels, sampling=spacing)
        falloff = np.maximum(falloff, s.prescription * PLATEAU_MARGIN * np.exp(-dist_mm / FALLOFF_MM))
    falloff *= 1.0 + CORRIDOR_BOOST * beam_plate(dims, spacing, beam_angles, focus)

    dose = falloff
    for s in oars:
        dose[s.voxels] *= float(spare_by_oar[s.name])

    field = _noise_field(case_id, dims, salt=noise_salt)
    for s in ptvs:
        eta = _standardized_ptv_noise(field, s.voxels)
        a = _amplitude_for_hi(eta, float(hi_by_ptv[s.name]))
        dose[s.voxels] = s.prescription * PLATEAU_MARGIN * (1.0 + a * eta)
    return dose.astype(np.float32)


def generate_phantom(spec: PhantomSpec) -> CaseBundle:
    """Deterministically build one case bundle from a phantom spec."""
    dims, spacing = DEFAULT_DIMS, DEFAULT_SPACING
    rng = np.random.default_rng(int(spec.seed))
    case_id = f"phantom-{spec.seed:08d}"

    center = np.array(dims, dtype=np.float64) / 2.0
    body_axes = rng.uniform(11.0, 13.5, size=3)
    body = _ellipsoid(dims, center, body_axes)

    try_place, ptv_candidate, oar_candidate = _place_structures(rng, dims, body)
    structures = []
    for i in range(spec.n_ptv):
        mask = try_place(ptv_candidate)
        structures.append(StructureMask(f"ptv_{i + 1}", PTV, mask, PTV_PRESCRIPTIONS[i]))
    for i in range(spec.n_oar):
        mask = try_place(oar_candidate)
        structures.append(StructureMask(f"oar_{i + 1}", OAR, mask, None))
    ptvs = [s for s in structures if s.kind == PTV]
    oars = [s for s in structures if s.kind == OAR]

    hi_by_ptv = {s.name: spec.style.alpha_hi for s in ptvs}
    spare_by_oar = {s.name: spec.style.alpha_spare[i] for i, s in enumerate(oars)}

    dose_vals = None
    for salt in range(5):
        dose_vals = _compose_reference(case_id, dims, spacing, ptvs, oars,
                                       spec.beam_angles, hi_by_ptv, spare_by_oar,
                                       noise_salt=salt)
        grid = DoseGrid(dims, spacing, dose_vals)
        ok = True
        for s in ptvs:
            if dvh.conformity_index(grid, s, s.prescription) < 0.95:
                ok = False
            if abs(dvh.homogeneity_index(grid, s) - spec.style.alpha_hi) > 0.01:
                ok = False
        if ok:
            break
    else:
        raise PhantomGeometryError("could not meet CI/HI invariants within retry budget")

    ct_vals = (1000.0 * body
               + 80.0 * sum(s.voxels for s in ptvs)
               + 60.0 * sum(s.voxels for s in oars)
               + 30.0 * np.abs(_noise_field(case_id, dims, salt=99)) * body)
    ct = DoseGrid(dims, spacing, ct_vals.astype(np.float32))

    return CaseBundle(case_id, ct, tuple(structures), spec.beam_angles,
                      DoseGrid(dims, spacing, dose_vals))


def rebuild_reference(case: CaseBundle, hi_target: dict[str, float],
                      oar_weight: dict[str, float]) -> DoseGrid:
    """Re-target a phantom's reference dose to new slider values.

    The plateau noise is recovered from the stored reference (it is affine in
    the standardized field), so in-PTV amplitude is re-solved for the new HI;
    OAR voxels scale multiplicatively, keeping mean dose exactly linear in the
    weight. Values outside PTVs and OARs are untouched.
    """
    if case.reference_dose is None:
        raise DomainError(f"{case.case_id}: no reference dose to rebuild")
    dose = case.reference_dose.values.astype(np.float64).copy()
    for s in case.oars:
        dose[s.voxels] *= float(oar_weight[s.name])
    for s in case.ptvs:
        plateau = s.prescription * PLATEAU_MARGIN
        resid = dose[s.voxels] / plateau - 1.0
        sd = resid.std()
        if sd <= 0:
            raise DomainError(f"{case.case_id}/{s.name}: reference plateau carries no noise")
        eta = (resid - resid.mean()) / sd
        a = _amplitude_for_hi(eta, float(hi_target[s.name]))
        dose[s.voxels] = plateau * (1.0 + a * eta)
    return DoseGrid(case.ct.dims, case.ct.spacing, dose.astype(np.float32))


# ---------------------------------------------------------------------------
# cohorts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cohort:
    cases: tuple[CaseBundle, ...]
    split: dict[str, str]   # case_id -> train|valid|test

    def subset(self, name: str) -> list[CaseBundle]:
        return [c for c in self.cases if self.split[c.case_id] == name]

    def manifest_text(self) -> str:
        lines = [f"{c.case_id} {self.split[c.case_id]}" for c in self.cases]
        return "\n".join(lines) + "\n"


def split_counts(n: int) -> tuple[int, int, int]:
    """70/10/20 split; valid and test round down, train takes the rest."""
    n_valid = n // 10
    n_test = (2 * n) // 10
    return n - n_valid - n_test, n_valid, n_test


def write_cohort_dir(cohort: Cohort, out_dir) -> None:
    """One bundle directory per case plus the cohort.txt split manifest."""
    from pathlib import Path

    from .domain import write_case_bundle

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for case in cohort.cases:
        write_case_bundle(case, out / case.case_id)
    (out / "cohort.txt").write_text(cohort.manifest_text(), encoding="utf-8")


def read_cohort_dir(path) -> Cohort:
    from pathlib import Path

    from .domain import read_case_bundle

    root = Path(path)
    manifest = root / "cohort.txt"
    if not manifest.is_file():
        raise DomainError(f"no cohort.txt under {root}")
    split = {}
    order = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        case_id, part = line.split()
        split[case_id] = part
        order.append(case_id)
    cases = tuple(read_case_bundle(root / case_id) for case_id in order)
    return Cohort(cases, split)


def generate_cohort(n: int, seed: int) -> Cohort:
    if n < 1:
        raise DomainError(f"cohort size must be >= 1, got {n}")
    master = np.random.default_rng(int(seed))
    seeds: list[int] = []
    seen = set()
    while len(seeds) < n:
        s = int(master.integers(0, 2 ** 31 - 1))
        if s not in seen:
            seen.add(s)
            seeds.append(s)
    cases = tuple(generate_phantom(random_spec(s)) for s in seeds)
    n_train, n_valid, _ = split_counts(n)
    split = {}
    for i, c in enumerate(cases):
        split[c.case_id] = "train" if i < n_train else ("valid" if i < n_train + n_valid else "test")
    return Cohort(cases, split)
