"""Batch entry points: phantom generation, training, evaluation, objective
extraction, planning, cohort comparison, and serving the HTTP engine.

Every subcommand exits nonzero on failure after printing one line of the form
`FDP-ERROR <ExceptionName>: <message>` to stderr.
"""

from __future__ import annotations

import functools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import compare as cmp
from . import dvh, nets, objectives, phantoms, planner, training
from .domain import (
    DomainError,
    PreferenceVector,
    beam_descriptor,
    read_case_bundle,
    read_dose_volume,
    write_dose_volume,
)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:
            click.echo(f"FDP-ERROR {type(exc).__name__}: {exc}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
@click.option("--seed", type=int, default=None, help="Override the default seed everywhere.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON file with training configuration overrides.")
@click.pass_context
def main(ctx, seed, config_path):
    """Preference-conditioned dose proposal toolbox."""
    overrides = {}
    if config_path:
        overrides = json.loads(Path(config_path).read_text())
    ctx.obj = {"seed": seed, "overrides": overrides}


def _effective_seed(ctx, local_seed):
    if ctx.obj and ctx.obj.get("seed") is not None:
        return ctx.obj["seed"]
    return local_seed


@main.group()
def phantom():
    """Synthetic case generation."""


@phantom.command("generate")
@click.option("--n", "count", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
@_guarded
def phantom_generate(ctx, count, seed, out_dir):
    """Write N case bundles plus the cohort split manifest."""
    cohort = phantoms.generate_cohort(count, _effective_seed(ctx, seed))
    phantoms.write_cohort_dir(cohort, out_dir)
    n_train = len(cohort.subset("train"))
    n_valid = len(cohort.subset("valid"))
    n_test = len(cohort.subset("test"))
    click.echo(f"wrote {count} cases to {out_dir} (train/valid/test {n_train}/{n_valid}/{n_test})")


@main.command()
@click.option("--stage", type=click.Choice(["1", "2"]), required=True)
@click.option("--cohort", "cohort_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--stage1", "stage1_ckpt", type=click.Path(exists=True), default=None,
              help="Stage-1 checkpoint (required for stage 2 unless --no-pretrain).")
@click.option("--no-pretrain", is_flag=True, help="Ablation arm: train the decoder jointly.")
@click.option("--epochs", type=int, default=8, show_default=True)
@click.option("--batch-size", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--log", "log_path", type=click.Path(), default=None)
@click.pass_context
@_guarded
def train(ctx, stage, cohort_dir, out_path, stage1_ckpt, no_pretrain, epochs,
          batch_size, seed, log_path):
    """Train one stage on a cohort directory; writes a weight checkpoint."""
    cohort = phantoms.read_cohort_dir(cohort_dir)
    overrides = (ctx.obj or {}).get("overrides", {})
    cfg = training.TrainConfig(stage=int(stage), epochs=epochs, batch_size=batch_size,
                               seed=_effective_seed(ctx, seed), **overrides)
    if stage == "1":
        result = training.train_stage1(cohort, cfg, out_path)
    else:
        if stage1_ckpt is None and not no_pretrain:
            raise DomainError("stage 2 needs --stage1 CKPT or an explicit --no-pretrain")
        result = training.train_stage2(cohort, stage1_ckpt, cfg, out_path)
    log_text = "\n".join(result.log_lines) + "\n"
    if log_path:
        Path(log_path).write_text(log_text)
    else:
        click.echo(log_text, nl=False)
    status = "diverged (kept last good weights)" if result.diverged else "ok"
    click.echo(f"checkpoint {result.checkpoint_path} [{status}] "
               f"val_mae={result.val_mae_history[-1] if result.val_mae_history else float('nan'):.3f}")


HI_SWEEP = (0.05, 0.125, 0.20)
OAR_SWEEP = (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3)


def _spearman(x, y) -> float:
    from scipy.stats import spearmanr

    rho = spearmanr(x, y).statistic
    return float(rho)


def eval_case(model, case) -> dict:
    """Per-case reconstruction error, HI alignment, and OAR slider response."""
    inputs = nets.assemble_input(case)
    pref0 = training.style_matched_pref(case)
    pred, _ = nets.stage2_forward(model, case, pref0, input_cache=inputs)
    mae = training.masked_mae_gy(pred.values, case.reference_dose.values)

    hi_err = []
    for h in HI_SWEEP:
        pref = PreferenceVector({s.name: h for s in case.ptvs},
                                {s.name: 1.0 for s in case.oars},
                                beam_descriptor(case.beam_angles))
        p, _ = nets.stage2_forward(model, case, pref, input_cache=inputs)
        for s in case.ptvs:
            hi_err.append(abs(dvh.homogeneity_index(p, s) - h))

    rhos = []
    for target in case.oars:
        means = []
        for w in OAR_SWEEP:
            pref = PreferenceVector(pref0.hi_target,
                                    {s.name: (w if s.name == target.name else 1.0)
                                     for s in case.oars},
                                    beam_descriptor(case.beam_angles))
            p, _ = nets.stage2_forward(model, case, pref, input_cache=inputs)
            means.append(dvh.mean_dose(p, target))
        rhos.append(_spearman(OAR_SWEEP, means))
    return {"case_id": case.case_id, "masked_mae_gy": mae,
            "hi_alignment": float(np.mean(hi_err)), "oar_spearman": float(np.mean(rhos))}


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--cohort", "cohort_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--subset", type=click.Choice(["test", "valid", "train", "all"]),
              default="test", show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@_guarded
def eval_cmd(checkpoint, cohort_dir, out_dir, subset, jobs):
    """Masked MAE, HI alignment, and OAR responsiveness over a cohort subset."""
    model, _ = training.load_stage2(checkpoint)
    cohort = phantoms.read_cohort_dir(cohort_dir)
    cases = list(cohort.cases) if subset == "all" else cohort.subset(subset)
    if not cases:
        raise DomainError(f"cohort subset {subset!r} is empty")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda c: eval_case(model, c), cases))
    else:
        rows = [eval_case(model, c) for c in cases]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["case_id,masked_mae_gy,hi_alignment,oar_spearman"]
    for r in rows:
        lines.append(f"{r['case_id']},{r['masked_mae_gy']:.6f},"
                     f"{r['hi_alignment']:.6f},{r['oar_spearman']:.6f}")
    lines.append("MEAN,{:.6f},{:.6f},{:.6f}".format(
        float(np.mean([r["masked_mae_gy"] for r in rows])),
        float(np.mean([r["hi_alignment"] for r in rows])),
        float(np.mean([r["oar_spearman"] for r in rows]))))
    (out / "eval.csv").write_text("\n".join(lines) + "\n")
    click.echo(lines[-1].replace("MEAN,", "mean: mae="))


@main.command("objectives")
@click.option("--case", "case_dir", type=click.Path(exists=True), required=True)
@click.option("--dose", "dose_path", type=click.Path(exists=True), default=None,
              help="Raw f32le dose volume; defaults to the case reference dose.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--dv-margin", type=float, default=0.02, show_default=True)
@click.option("--hi-target", type=float, default=0.08, show_default=True)
@_guarded
def objectives_cmd(case_dir, dose_path, out_path, dv_margin, hi_target):
    """Extract optimizer objectives from a dose volume."""
    case = read_case_bundle(case_dir)
    if dose_path:
        dose = read_dose_volume(dose_path, case.ct)
    elif case.reference_dose is not None:
        dose = case.reference_dose
    else:
        raise DomainError("case has no reference dose; pass --dose")
    margins = objectives.MarginPolicy(dv_margin_fraction=dv_margin,
                                      mean_margin_fraction=dv_margin,
                                      hi_target=hi_target)
    objset = objectives.extract_objectives(dose, case, margins)
    Path(out_path).write_text(objectives.objectives_to_text(objset))
    click.echo(f"wrote {len(objset.objectives)} objectives to {out_path}")


@main.command("plan")
@click.option("--case", "case_dir", type=click.Path(exists=True), required=True)
@click.option("--objectives", "objectives_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--max-iterations", type=int, default=400, show_default=True)
@_guarded
def plan_cmd(case_dir, objectives_path, out_dir, max_iterations):
    """Fit the beamlet model to an objective file; writes dose + report."""
    case = read_case_bundle(case_dir)
    objset = objectives.parse_objectives(Path(objectives_path).read_text())
    opts = planner.PlannerOptions(max_iterations=max_iterations)
    achieved, report = planner.solve_plan(case, objset, opts)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dose_volume(out / "achieved_dose.f32le", achieved)
    (out / "report.csv").write_text(report.to_csv())
    click.echo(f"plan done: penalty={report.total:.6g} iterations={report.iterations} "
               f"converged={report.converged}")


def _write_case_outputs(out: Path, case, expected, achieved, report, objset):
    out.mkdir(parents=True, exist_ok=True)
    write_dose_volume(out / "predicted_dose.f32le", expected)
    write_dose_volume(out / "achieved_dose.f32le", achieved)
    (out / "objectives.txt").write_text(objectives.objectives_to_text(objset))
    (out / "report.csv").write_text(report.to_csv())
    metric_lines = ["structure,kind,metric,value"]
    stats_rows = []
    for s in case.structures:
        exp_curve = dvh.compute_dvh(expected, s)
        ach_curve = dvh.compute_dvh(achieved, s)
        (out / f"expected_dvh_{s.name}.csv").write_text(exp_curve.to_csv())
        (out / f"achieved_dvh_{s.name}.csv").write_text(ach_curve.to_csv())
        diff = cmp.DVHDifference.between(exp_curve, ach_curve)
        mu, sigma = cmp.intra_stats([diff])
        stats_rows.append(f"{s.name},{mu:.6f},{sigma:.6f}")
        if s.kind == "PTV":
            metric_lines.append(f"{s.name},ptv_hi,hi,{dvh.homogeneity_index(achieved, s):.6f}")
            metric_lines.append(f"{s.name},ptv_ci,ci,"
                                f"{dvh.conformity_index(achieved, s, s.prescription):.6f}")
        else:
            metric_lines.append(f"{s.name},oar_mean,mean_gy,{dvh.mean_dose(achieved, s):.6f}")
    (out / "metrics.csv").write_text("\n".join(metric_lines) + "\n")
    (out / "intra_stats.csv").write_text(
        "structure,mu_tra,sigma_tra\n" + "\n".join(stats_rows) + "\n")


@main.command("pipeline")
@click.option("--case", "case_dir", type=click.Path(exists=True), required=True)
@click.option("--pref", "pref_path", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--max-iterations", type=int, default=400, show_default=True)
@_guarded
def pipeline(case_dir, pref_path, checkpoint, out_dir, max_iterations):
    """predict -> extract objectives -> plan -> expected-vs-achieved stats."""
    stage = "predict"
    try:
        case = read_case_bundle(case_dir)
        model, _ = training.load_stage2(checkpoint)
        body = json.loads(Path(pref_path).read_text())
        pref = PreferenceVector(body["hi_target"], body["oar_weight"],
                                beam_descriptor(case.beam_angles))
        pref.validate_for_case(case)
        expected, _ = nets.stage2_forward(model, case, pref)
        stage = "objectives"
        margins = objectives.MarginPolicy(hi_by_ptv=dict(pref.hi_target))
        objset = objectives.extract_objectives(expected, case, margins)
        stage = "plan"
        opts = planner.PlannerOptions(max_iterations=max_iterations)
        achieved, report = planner.solve_plan(case, objset, opts)
        stage = "compare"
        _write_case_outputs(Path(out_dir) / case.case_id, case, expected,
                            achieved, report, objset)
    except Exception as exc:
        raise DomainError(f"[stage={stage}] {exc}") from exc
    click.echo(f"pipeline done for {case.case_id}: penalty={report.total:.6g}")


@main.command("compare")
@click.option("--results", "results_dir", type=click.Path(exists=True), required=True,
              help="Directory of per-case pipeline outputs.")
@click.option("--baseline", "baseline_dir", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_guarded
def compare_cmd(results_dir, baseline_dir, out_dir):
    """Aggregate intra/inter stats per structure; optional categorization vs baseline."""
    results = Path(results_dir)
    case_dirs = sorted(p for p in results.iterdir() if (p / "metrics.csv").is_file())
    if not case_dirs:
        raise DomainError(f"no pipeline case outputs under {results}")
    diffs_by_structure: dict[str, list[cmp.DVHDifference]] = {}
    for cd in case_dirs:
        for exp_file in sorted(cd.glob("expected_dvh_*.csv")):
            name = exp_file.name[len("expected_dvh_"):-len(".csv")]
            ach_file = cd / f"achieved_dvh_{name}.csv"
            if not ach_file.is_file():
                continue
            expected = dvh.DVHCurve.from_csv(name, exp_file.read_text())
            achieved = dvh.DVHCurve.from_csv(name, ach_file.read_text())
            diffs_by_structure.setdefault(name, []).append(
                cmp.DVHDifference.between(expected, achieved))
    stats = [cmp.cohort_stats(name, diffs)
             for name, diffs in sorted(diffs_by_structure.items())]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dvh_stats.csv").write_text(cmp.stats_table_csv(stats))
    (out / "dvh_stats.txt").write_text(cmp.stats_table_text(stats))
    click.echo(cmp.stats_table_text(stats), nl=False)

    if baseline_dir:
        entries = []
        base = Path(baseline_dir)
        for cd in case_dirs:
            base_cd = base / cd.name
            if not (base_cd / "metrics.csv").is_file():
                continue
            ours = _read_metrics(cd / "metrics.csv")
            theirs = _read_metrics(base_cd / "metrics.csv")
            for key, value in ours.items():
                if key in theirs:
                    name, kind = key
                    entries.append((name, kind, value, theirs[key]))
        table = cmp.comparison_table(entries)
        (out / "categories.csv").write_text(table.to_csv())
        (out / "categories.txt").write_text(table.to_text())
        click.echo(table.to_text(), nl=False)


def _read_metrics(path: Path) -> dict[tuple[str, str], float]:
    out = {}
    for line in path.read_text().splitlines()[1:]:
        name, kind, _metric, value = line.split(",")
        out[(name, kind)] = float(value)
    return out


@main.command("serve")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--port", type=int, default=8420, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--ui", "ui_dir", type=click.Path(exists=True), default=None,
              help="Serve a static frontend bundle at /ui.")
@_guarded
def serve(checkpoint, port, host, ui_dir):
    """Serve the interactive engine over HTTP."""
    import uvicorn

    from .service import load_app

    uvicorn.run(load_app(checkpoint, static_dir=ui_dir), host=host, port=port,
                log_level="warning")


if __name__ == "__main__":
    main()
