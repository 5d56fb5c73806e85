"""End-to-end: sliders -> predicted dose -> objectives -> mimicked plan.

Uses an untrained-but-small model if no checkpoint is given, so the focus is
on the pipeline mechanics; pass a trained stage-2 checkpoint for meaningful
dose predictions.

Run:  python demos/04_sliders_to_deliverable_plan.py [stage2.ckpt]
"""

import sys

import numpy as np

from fdp import dvh, nets, objectives, phantoms, planner, training
from fdp.compare import DVHDifference, intra_stats
from fdp.domain import PreferenceVector

case = phantoms.generate_phantom(phantoms.random_spec(21))

if len(sys.argv) > 1:
    model, _ = training.load_stage2(sys.argv[1])
    print(f"loaded checkpoint {sys.argv[1]}")
else:
    model = nets.Stage2Model(np.random.default_rng(0), nets.NetConfig())
    print("no checkpoint given: using fresh weights (pipeline demo only)")

# two slider states: spare the first OAR vs. prioritize PTV homogeneity
spare = PreferenceVector({s.name: 0.10 for s in case.ptvs},
                         {s.name: (0.7 if s is case.oars[0] else 1.0) for s in case.oars},
                         nets.beam_descriptor(case.beam_angles))
homog = PreferenceVector({s.name: 0.03 for s in case.ptvs},
                         {s.name: 1.0 for s in case.oars},
                         nets.beam_descriptor(case.beam_angles))

for tag, pref in (("OAR-sparing sliders", spare), ("PTV-homogeneity sliders", homog)):
    pred, _ = nets.stage2_forward(model, case, pref)
    margins = objectives.MarginPolicy(hi_by_ptv=dict(pref.hi_target))
    objset = objectives.extract_objectives(pred, case, margins)
    achieved, report = planner.solve_plan(
        case, objset, planner.PlannerOptions(max_iterations=150))
    diffs = [DVHDifference.between(dvh.compute_dvh(pred, s), dvh.compute_dvh(achieved, s))
             for s in case.structures]
    mu, sigma = intra_stats(diffs)
    print(f"\n{tag}:")
    print(f"  objectives: {len(objset.objectives)}  "
          f"plan penalty: {report.total:.4g} after {report.iterations} iterations")
    for s in case.ptvs:
        print(f"  {s.name}: achieved D95 {dvh.dose_percentile(achieved, s, 95):.1f} Gy "
              f"(Rx {s.prescription:.0f})  HI {dvh.homogeneity_index(achieved, s):.3f}")
    print(f"  expected-vs-achieved intra stats: mu={mu:+.2f} Gy sigma={sigma:.2f} Gy")
