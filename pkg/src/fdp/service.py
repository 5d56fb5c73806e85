"""HTTP engine behind the interactive UI.

Four-step flow per session: load a case (bundle path or phantom spec, with
one-time input preprocessing), predict under slider preferences (response
carries the previous prediction's DVHs for overlay), extract objectives from
the last prediction, and run the plan optimizer (progress is streamed as
text lines followed by a JSON result line).

Sessions are isolated; each holds its own lock, so concurrent requests to
one session serialize while different sessions proceed in parallel. Model
weights are shared read-only.
"""

from __future__ import annotations

import itertools
import json
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import StreamingResponse
from pydantic import BaseModel

from . import dvh, nets, objectives, phantoms, planner
from .domain import (
    BundleFormatError,
    CaseBundle,
    DomainError,
    DoseGrid,
    HI_RANGE,
    OAR_WEIGHT_RANGE,
    PreferenceVector,
    beam_descriptor,
    read_case_bundle,
)


class CreateSessionBody(BaseModel):
    bundle_path: str | None = None
    phantom_seed: int | None = None


class PredictBody(BaseModel):
    hi_target: dict[str, float]
    oar_weight: dict[str, float]
    slice_z: int | None = None


class ObjectivesBody(BaseModel):
    dv_margin_fraction: float = 0.02
    mean_margin_fraction: float = 0.02


class PlanBody(BaseModel):
    max_iterations: int = 300


@dataclass
class Session:
    session_id: str
    case: CaseBundle
    inputs: np.ndarray                      # preprocessed once per case
    lock: threading.Lock = field(default_factory=threading.Lock)
    last_pref: PreferenceVector | None = None
    last_prediction: DoseGrid | None = None
    last_dvhs: dict[str, dvh.DVHCurve] = field(default_factory=dict)
    previous_dvhs: dict[str, dvh.DVHCurve] = field(default_factory=dict)


def _curve_payload(curve: dvh.DVHCurve) -> dict:
    return {"volume_fraction": [float(v) for v in curve.volume_fractions],
            "dose_gy": [float(v) for v in curve.dose_at_fraction]}


def _slice_payload(dose: DoseGrid, z: int | None) -> dict:
    nx, ny, nz = dose.dims
    zi = nz // 2 if z is None else int(z)
    if not (0 <= zi < nz):
        raise DomainError(f"slice index {zi} outside [0, {nz})")
    plane = dose.values[:, :, zi]
    return {"z": zi, "rows": plane.shape[0], "cols": plane.shape[1],
            "values": [[float(v) for v in row] for row in plane],
            "window": [0.0, float(max(plane.max(), 1.0))]}


def create_app(model: nets.Stage2Model, static_dir=None) -> FastAPI:
    app = FastAPI(title="dose proposal engine")
    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(static_dir), html=True), name="ui")
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()
    counter = itertools.count(1)

    def get_session(session_id: str) -> Session:
        with registry_lock:
            sess = sessions.get(session_id)
        if sess is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return sess

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "sessions": len(sessions)}

    @app.post("/cases", status_code=201)
    def create_session(body: CreateSessionBody):
        if (body.bundle_path is None) == (body.phantom_seed is None):
            raise HTTPException(status_code=400,
                                detail="provide exactly one of bundle_path or phantom_seed")
        try:
            if body.bundle_path is not None:
                case = read_case_bundle(body.bundle_path)
            else:
                case = phantoms.generate_phantom(phantoms.random_spec(body.phantom_seed))
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except BundleFormatError as exc:
            detail = str(exc)
            status = 404 if "no manifest" in detail or "missing volume" in detail else 400
            raise HTTPException(status_code=status, detail=detail)
        except DomainError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        inputs = nets.assemble_input(case)   # one-time preprocessing
        session_id = f"s{next(counter):06d}"
        with registry_lock:
            sessions[session_id] = Session(session_id, case, inputs)
        return {
            "session_id": session_id,
            "case_id": case.case_id,
            "structures": [{"name": s.name, "kind": s.kind,
                            "prescription_gy": s.prescription} for s in case.structures],
            "beam_angles": list(case.beam_angles),
            "slider_ranges": {"hi": list(HI_RANGE), "oar_weight": list(OAR_WEIGHT_RANGE)},
            "grid": {"dims": list(case.ct.dims), "spacing_mm": list(case.ct.spacing)},
        }

    @app.post("/cases/{session_id}/predict")
    def predict(session_id: str, body: PredictBody):
        sess = get_session(session_id)
        with sess.lock:
            try:
                pref = PreferenceVector(body.hi_target, body.oar_weight,
                                        beam_descriptor(sess.case.beam_angles))
                pref.validate_for_case(sess.case)
            except DomainError as exc:
                raise HTTPException(status_code=422, detail=str(exc))
            t0 = time.perf_counter()
            pred, _ = nets.stage2_forward(model, sess.case, pref, input_cache=sess.inputs)
            forward_ms = (time.perf_counter() - t0) * 1000.0
            curves = {s.name: dvh.compute_dvh(pred, s) for s in sess.case.structures}
            metrics = {}
            for s in sess.case.structures:
                entry = {"mean_gy": dvh.mean_dose(pred, s), "max_gy": dvh.max_dose(pred, s)}
                if s.kind == "PTV":
                    entry["hi"] = dvh.homogeneity_index(pred, s)
                    entry["ci"] = dvh.conformity_index(pred, s, s.prescription)
                metrics[s.name] = entry
            previous = sess.last_dvhs
            sess.previous_dvhs = previous
            sess.last_dvhs = curves
            sess.last_pref = pref
            sess.last_prediction = pred
            return {
                "dvh": {k: _curve_payload(c) for k, c in curves.items()},
                "previous_dvh": {k: _curve_payload(c) for k, c in previous.items()} or None,
                "metrics": metrics,
                "slice": _slice_payload(pred, body.slice_z),
                "latency_ms": forward_ms,
            }

    @app.post("/cases/{session_id}/objectives")
    def extract(session_id: str, body: ObjectivesBody | None = None):
        sess = get_session(session_id)
        with sess.lock:
            if sess.last_prediction is None:
                raise HTTPException(status_code=409, detail="predict before extracting objectives")
            body = body or ObjectivesBody()
            margins = objectives.MarginPolicy(
                dv_margin_fraction=body.dv_margin_fraction,
                mean_margin_fraction=body.mean_margin_fraction,
                hi_by_ptv=dict(sess.last_pref.hi_target),
            )
            objset = objectives.extract_objectives(sess.last_prediction, sess.case, margins)
            return {
                "case_id": objset.case_id,
                "objectives": [{"structure": o.structure_name, "kind": o.kind,
                                "volume_fraction": o.volume_fraction, "dose_gy": o.dose,
                                "weight": o.weight, "provenance": o.provenance}
                               for o in objset.objectives],
                "text": objectives.objectives_to_text(objset),
            }

    @app.post("/cases/{session_id}/plan")
    def plan(session_id: str, body: PlanBody | None = None):
        sess = get_session(session_id)
        if sess.last_prediction is None:
            raise HTTPException(status_code=409, detail="predict before planning")
        body = body or PlanBody()

        def stream():
            with sess.lock:
                margins = objectives.MarginPolicy(hi_by_ptv=dict(sess.last_pref.hi_target))
                objset = objectives.extract_objectives(sess.last_prediction, sess.case, margins)
                yield f"objectives {len(objset.objectives)}\n"
                opts = planner.PlannerOptions(max_iterations=body.max_iterations)
                yield "building beamlet model\n"
                model_b = planner.BeamletModel(sess.case, opts)
                yield f"beamlets {model_b.n_beamlets}\n"
                achieved, report = planner.solve_plan(sess.case, objset, opts, model=model_b)
                for rnd, hist in enumerate(report.descent_history):
                    yield f"round {rnd} penalty {hist[0]:.4f} -> {hist[-1]:.4f} ({len(hist)} steps)\n"
                expected = sess.last_dvhs
                achieved_curves = {s.name: dvh.compute_dvh(achieved, s)
                                   for s in sess.case.structures}
                result = {
                    "total_penalty": report.total,
                    "iterations": report.iterations,
                    "converged": report.converged,
                    "per_objective": [{"structure": o.structure_name, "kind": o.kind,
                                       "volume_fraction": o.volume_fraction,
                                       "target_dose": o.target_dose, "achieved": o.achieved,
                                       "violation": o.violation,
                                       "weighted_penalty": o.weighted_penalty}
                                      for o in report.outcomes],
                    "achieved_dvh": {k: _curve_payload(c) for k, c in achieved_curves.items()},
                    "expected_dvh": {k: _curve_payload(c) for k, c in expected.items()},
                    "achieved_metrics": {
                        s.name: {"mean_gy": dvh.mean_dose(achieved, s),
                                 "max_gy": dvh.max_dose(achieved, s)}
                        for s in sess.case.structures},
                }
                yield "RESULT " + json.dumps(result) + "\n"

        return StreamingResponse(stream(), media_type="text/plain")

    return app


def load_app(checkpoint_path, static_dir=None) -> FastAPI:
    from .training import load_stage2

    model, _ = load_stage2(checkpoint_path)
    return create_app(model, static_dir=static_dir)
