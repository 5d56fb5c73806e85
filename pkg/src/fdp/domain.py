"""Core dosimetric data types and the on-disk case bundle format.

All volumes share one regular voxel lattice. Arrays are float32, shape
(nx, ny, nz); the file format stores voxels x-fastest, then y, then z
(see docs/format.md).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PTV = "PTV"
OAR = "OAR"

# Slider ranges advertised by the engine and enforced on preferences.
HI_RANGE = (0.02, 0.20)
OAR_WEIGHT_RANGE = (0.7, 1.3)

# Fixed length of the beam-geometry descriptor (angular occupancy bins).
BEAM_DESCRIPTOR_BINS = 12

FORMAT_VERSION = 1


class DomainError(ValueError):
    """Invariant violation in a dosimetric data type."""


class BundleFormatError(DomainError):
    """Malformed or inconsistent case bundle on disk."""


def _as_volume(values, dims, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.shape != tuple(dims):
        raise DomainError(f"{name}: shape {arr.shape} does not match dims {tuple(dims)}")
    return arr


@dataclass(frozen=True)
class DoseGrid:
    """3D scalar field of absorbed dose in Gray on a regular lattice."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    values: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 4 for d in dims):
            raise DomainError(f"dims must be three components >= 4, got {dims}")
        if any(not (s > 0) for s in spacing):
            raise DomainError(f"spacing must be positive, got {spacing}")
        values = _as_volume(self.values, dims, "dose values")
        if not np.all(np.isfinite(values)):
            raise DomainError("dose values must be finite")
        if np.any(values < 0):
            raise DomainError("dose values must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "values", values)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def with_values(self, values) -> "DoseGrid":
        return DoseGrid(self.dims, self.spacing, values)


@dataclass(frozen=True)
class StructureMask:
    """Named binary mask on the shared lattice; PTVs carry a prescription."""

    name: str
    kind: str
    voxels: np.ndarray
    prescription: float | None = None

    def __post_init__(self):
        if self.kind not in (PTV, OAR):
            raise DomainError(f"structure kind must be PTV or OAR, got {self.kind!r}")
        voxels = np.asarray(self.voxels)
        if voxels.ndim != 3:
            raise DomainError(f"{self.name}: mask must be a 3D array")
        voxels = (voxels != 0)
        if not voxels.any():
            raise DomainError(f"{self.name}: mask has no voxels set")
        if self.kind == PTV:
            if self.prescription is None or not (float(self.prescription) > 0):
                raise DomainError(f"{self.name}: PTV requires a positive prescription")
            object.__setattr__(self, "prescription", float(self.prescription))
        elif self.prescription is not None:
            raise DomainError(f"{self.name}: OAR must not carry a prescription")
        voxels.setflags(write=False)
        object.__setattr__(self, "voxels", voxels)

    @property
    def voxel_count(self) -> int:
        return int(self.voxels.sum())


@dataclass(frozen=True)
class CaseBundle:
    """One planning case: CT-like volume, structures, beams, optional reference dose."""

    case_id: str
    ct: DoseGrid
    structures: tuple[StructureMask, ...]
    beam_angles: tuple[float, ...]
    reference_dose: DoseGrid | None = None

    def __post_init__(self):
        structures = tuple(self.structures)
        names = [s.name for s in structures]
        if len(set(names)) != len(names):
            raise DomainError("structure names must be unique")
        if not any(s.kind == PTV for s in structures):
            raise DomainError("case must contain at least one PTV")
        if not any(s.kind == OAR for s in structures):
            raise DomainError("case must contain at least one OAR")
        dims = self.ct.dims
        for s in structures:
            if s.voxels.shape != dims:
                raise DomainError(f"{s.name}: mask shape {s.voxels.shape} != grid dims {dims}")
        angles = tuple(float(a) for a in self.beam_angles)
        if any(not (0 <= a < 360) for a in angles):
            raise DomainError(f"beam angles must lie in [0, 360), got {angles}")
        if self.reference_dose is not None and self.reference_dose.dims != dims:
            raise DomainError("reference dose dims differ from ct dims")
        object.__setattr__(self, "structures", structures)
        object.__setattr__(self, "beam_angles", angles)

    @property
    def ptvs(self) -> list[StructureMask]:
        return [s for s in self.structures if s.kind == PTV]

    @property
    def oars(self) -> list[StructureMask]:
        return [s for s in self.structures if s.kind == OAR]

    def structure(self, name: str) -> StructureMask:
        for s in self.structures:
            if s.name == name:
                return s
        raise KeyError(name)


def beam_descriptor(beam_angles, n_bins: int = BEAM_DESCRIPTOR_BINS) -> np.ndarray:
    """Fixed-length angular occupancy encoding of a beam arrangement."""
    desc = np.zeros(n_bins, dtype=np.float32)
    for a in beam_angles:
        desc[int(float(a) % 360.0 / 360.0 * n_bins) % n_bins] = 1.0
    return desc


@dataclass(frozen=True)
class PreferenceVector:
    """Slider state: target HI per PTV, sparing weight per OAR, beam encoding."""

    hi_target: dict[str, float]
    oar_weight: dict[str, float]
    beam_descriptor: np.ndarray

    def __post_init__(self):
        hi = {str(k): float(v) for k, v in self.hi_target.items()}
        wt = {str(k): float(v) for k, v in self.oar_weight.items()}
        for name, h in hi.items():
            if not (HI_RANGE[0] <= h <= HI_RANGE[1]):
                raise DomainError(f"hi_target[{name}]={h} outside {HI_RANGE}")
        for name, w in wt.items():
            if not (OAR_WEIGHT_RANGE[0] <= w <= OAR_WEIGHT_RANGE[1]):
                raise DomainError(f"oar_weight[{name}]={w} outside {OAR_WEIGHT_RANGE}")
        desc = np.asarray(self.beam_descriptor, dtype=np.float32).ravel()
        if desc.size != BEAM_DESCRIPTOR_BINS:
            raise DomainError(f"beam descriptor must have {BEAM_DESCRIPTOR_BINS} entries")
        desc.setflags(write=False)
        object.__setattr__(self, "hi_target", hi)
        object.__setattr__(self, "oar_weight", wt)
        object.__setattr__(self, "beam_descriptor", desc)

    def validate_for_case(self, case: CaseBundle) -> None:
        """Every PTV/OAR of the case must have exactly one entry."""
        ptv_names = {s.name for s in case.ptvs}
        oar_names = {s.name for s in case.oars}
        if set(self.hi_target) != ptv_names:
            raise DomainError(
                f"hi_target keys {sorted(self.hi_target)} != case PTVs {sorted(ptv_names)}")
        if set(self.oar_weight) != oar_names:
            raise DomainError(
                f"oar_weight keys {sorted(self.oar_weight)} != case OARs {sorted(oar_names)}")

    @staticmethod
    def neutral(case: CaseBundle, hi: float = 0.08) -> "PreferenceVector":
        """Mid-range sliders: given HI target, unit OAR weights."""
        return PreferenceVector(
            hi_target={s.name: hi for s in case.ptvs},
            oar_weight={s.name: 1.0 for s in case.oars},
            beam_descriptor=beam_descriptor(case.beam_angles),
        )


# ---------------------------------------------------------------------------
# Case bundle file format (see docs/format.md)
# ---------------------------------------------------------------------------

def _write_volume(path: Path, arr: np.ndarray) -> None:
    # file order: x fastest, then y, then z
    arr.astype("<f4").transpose(2, 1, 0).tofile(path)


def _read_volume(path: Path, dims) -> np.ndarray:
    nx, ny, nz = dims
    if not path.is_file():
        raise BundleFormatError(f"missing volume file {path}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != nx * ny * nz:
        raise BundleFormatError(
            f"{path.name}: payload holds {raw.size} floats, manifest dims need {nx * ny * nz}")
    return raw.reshape(nz, ny, nx).transpose(2, 1, 0)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dose_volume(path, dose: DoseGrid) -> None:
    """Raw little-endian f32 volume, same voxel order as case bundle fields."""
    _write_volume(Path(path), dose.values)


def read_dose_volume(path, like: DoseGrid) -> DoseGrid:
    """Read a raw volume written by write_dose_volume onto `like`'s lattice."""
    return DoseGrid(like.dims, like.spacing, _read_volume(Path(path), like.dims))


def write_case_bundle(case: CaseBundle, path) -> None:
    """Write `manifest.txt` plus one `.f32le` raw volume per field.

    Re-reading the directory reproduces the case bit-exactly.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    nx, ny, nz = case.ct.dims
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"case_id = {case.case_id}",
        f"dims = {nx} {ny} {nz}",
        "spacing = " + " ".join(_fmt(s) for s in case.ct.spacing),
        "beam_angles = " + " ".join(_fmt(a) for a in case.beam_angles),
        "ct = ct.f32le",
    ]
    _write_volume(out / "ct.f32le", case.ct.values)
    if case.reference_dose is not None:
        lines.append("reference_dose = reference_dose.f32le")
        _write_volume(out / "reference_dose.f32le", case.reference_dose.values)
    for s in case.structures:
        rx = _fmt(s.prescription) if s.kind == PTV else "-"
        fname = f"{s.name}.f32le"
        lines.append(f"structure = {s.name} {s.kind} {rx} {fname}")
        _write_volume(out / fname, s.voxels.astype(np.float32))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_case_bundle(path) -> CaseBundle:
    """Read and validate a case bundle directory written by write_case_bundle."""
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise BundleFormatError(f"no manifest.txt under {root}")
    fields: dict[str, str] = {}
    structure_lines: list[str] = []
    for ln, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise BundleFormatError(f"manifest line {ln}: expected `key = value`")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "structure":
            structure_lines.append(value)
        else:
            fields[key] = value
    try:
        dims = tuple(int(t) for t in fields["dims"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
        angles = tuple(float(t) for t in fields["beam_angles"].split()) \
            if fields.get("beam_angles") else ()
        case_id = fields["case_id"]
        ct_file = fields["ct"]
    except KeyError as exc:
        raise BundleFormatError(f"manifest missing key {exc}") from None
    except ValueError as exc:
        raise BundleFormatError(f"manifest value malformed: {exc}") from None
    if len(dims) != 3 or len(spacing) != 3:
        raise BundleFormatError("dims and spacing must each have three components")

    ct = DoseGrid(dims, spacing, _read_volume(root / ct_file, dims))
    reference = None
    if "reference_dose" in fields:
        reference = DoseGrid(dims, spacing, _read_volume(root / fields["reference_dose"], dims))

    structures = []
    for value in structure_lines:
        parts = value.split()
        if len(parts) != 4:
            raise BundleFormatError(f"structure line needs `name kind rx file`: {value!r}")
        name, kind, rx, fname = parts
        prescription = None if rx == "-" else float(rx)
        voxels = _read_volume(root / fname, dims)
        structures.append(StructureMask(name, kind, voxels, prescription))

    return CaseBundle(case_id, ct, tuple(structures), angles, reference)
