"""Translate a predicted dose into optimizer objectives.

OAR objectives sample the predicted DVH at fixed volume fractions and
subtract a rule-based margin; PTV objectives come from prescriptions, not
from the model.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import dvh
from .domain import CaseBundle, DomainError, DoseGrid

UPPER_DV = "UpperDV"
MEAN_DOSE = "MeanDose"
TARGET_LOWER_DV = "TargetLowerDV"
TARGET_UPPER_DV = "TargetUpperDV"
KINDS = (UPPER_DV, MEAN_DOSE, TARGET_LOWER_DV, TARGET_UPPER_DV)

MODEL_DERIVED = "model-derived"
PRESCRIPTION_DERIVED = "prescription-derived"

OAR_SAMPLE_FRACTIONS = (0.05, 0.30, 0.50, 0.70)


@dataclass(frozen=True)
class Objective:
    structure_name: str
    kind: str
    volume_fraction: float | None
    dose: float
    weight: float
    provenance: str = MODEL_DERIVED

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown objective kind {self.kind!r}")
        if self.kind == MEAN_DOSE:
            if self.volume_fraction is not None:
                raise DomainError("MeanDose objectives carry no volume fraction")
        else:
            vf = self.volume_fraction
            if vf is None or not (0.0 < float(vf) < 1.0):
                raise DomainError(f"{self.kind} needs a volume fraction in (0, 1), got {vf}")
            object.__setattr__(self, "volume_fraction", float(vf))
        if not (float(self.dose) >= 0):
            raise DomainError(f"objective dose must be >= 0, got {self.dose}")
        if not (float(self.weight) > 0):
            raise DomainError(f"objective weight must be positive, got {self.weight}")
        object.__setattr__(self, "dose", float(self.dose))
        object.__setattr__(self, "weight", float(self.weight))


@dataclass(frozen=True)
class ObjectiveSet:
    case_id: str
    objectives: tuple[Objective, ...]

    def __post_init__(self):
        object.__setattr__(self, "objectives", tuple(self.objectives))

    def for_structure(self, name: str) -> list[Objective]:
        return [o for o in self.objectives if o.structure_name == name]

    def validate_for_case(self, case: CaseBundle) -> None:
        """Every PTV needs lower+upper targets; every OAR at least one entry."""
        for s in case.ptvs:
            kinds = {o.kind for o in self.for_structure(s.name)}
            if TARGET_LOWER_DV not in kinds or TARGET_UPPER_DV not in kinds:
                raise DomainError(f"{s.name}: PTV must carry TargetLowerDV and TargetUpperDV")
        for s in case.oars:
            if not self.for_structure(s.name):
                raise DomainError(f"{s.name}: OAR has no objectives")


@dataclass(frozen=True)
class MarginPolicy:
    """Rule-based margins applied to model-derived objectives.

    Margins are fractions of the case's highest prescription and tighten the
    OAR objectives below the predicted values; results are floored at zero.
    `hi_target` feeds the PTV upper bound Rx*(1+h); per-PTV overrides win.
    """

    dv_margin_fraction: float = 0.02
    mean_margin_fraction: float = 0.02
    hi_target: float = 0.08
    hi_by_ptv: dict[str, float] | None = None
    oar_fractions: tuple[float, ...] = OAR_SAMPLE_FRACTIONS
    oar_weight: float = 1.0
    ptv_weight: float = 30.0

    def hi_for(self, ptv_name: str) -> float:
        if self.hi_by_ptv and ptv_name in self.hi_by_ptv:
            return float(self.hi_by_ptv[ptv_name])
        return float(self.hi_target)


def extract_objectives(pred_dose: DoseGrid, case: CaseBundle,
                       margins: MarginPolicy = MarginPolicy()) -> ObjectiveSet:
    """Sample the predicted DVH per OAR (minus margins) and add prescription
    targets per PTV."""
    if pred_dose.dims != case.ct.dims:
        raise DomainError(
            f"predicted dose dims {pred_dose.dims} != case dims {case.ct.dims}")
    rx_max = max(s.prescription for s in case.ptvs)
    dv_margin = margins.dv_margin_fraction * rx_max
    mean_margin = margins.mean_margin_fraction * rx_max

    objectives: list[Objective] = []
    for s in case.oars:
        curve = dvh.compute_dvh(pred_dose, s)
        for f in margins.oar_fractions:
            sampled = float(curve.dose_at_fraction[int(round(f * 100))])
            objectives.append(Objective(s.name, UPPER_DV, f,
                                        max(0.0, sampled - dv_margin),
                                        margins.oar_weight, MODEL_DERIVED))
        mean_pred = dvh.mean_dose(pred_dose, s)
        objectives.append(Objective(s.name, MEAN_DOSE, None,
                                    max(0.0, mean_pred - mean_margin),
                                    margins.oar_weight, MODEL_DERIVED))
    for s in case.ptvs:
        objectives.append(Objective(s.name, TARGET_LOWER_DV, 0.98, s.prescription,
                                    margins.ptv_weight, PRESCRIPTION_DERIVED))
        objectives.append(Objective(s.name, TARGET_UPPER_DV, 0.02,
                                    s.prescription * (1.0 + margins.hi_for(s.name)),
                                    margins.ptv_weight, PRESCRIPTION_DERIVED))
    objset = ObjectiveSet(case.case_id, tuple(objectives))
    objset.validate_for_case(case)
    return objset


# ---------------------------------------------------------------------------
# text serialization (one objective per line)
# ---------------------------------------------------------------------------

def objectives_to_text(objset: ObjectiveSet) -> str:
    lines = [f"# case_id = {objset.case_id}",
             "structure kind volume_fraction dose_gy weight provenance"]
    for o in objset.objectives:
        vf = "-" if o.volume_fraction is None else repr(o.volume_fraction)
        lines.append(f"{o.structure_name} {o.kind} {vf} {o.dose!r} {o.weight!r} {o.provenance}")
    return "\n".join(lines) + "\n"


def parse_objectives(text: str) -> ObjectiveSet:
    case_id = ""
    objectives: list[Objective] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if "case_id" in line and "=" in line:
                case_id = line.split("=", 1)[1].strip()
            continue
        if line.startswith("structure "):
            continue   # header
        parts = line.split()
        if len(parts) != 6:
            raise DomainError(f"objective line needs 6 fields: {line!r}")
        name, kind, vf, dose_s, weight_s, provenance = parts
        objectives.append(Objective(name, kind,
                                    None if vf == "-" else float(vf),
                                    float(dose_s), float(weight_s), provenance))
    if not objectives:
        raise DomainError("no objectives found in text")
    return ObjectiveSet(case_id, tuple(objectives))
