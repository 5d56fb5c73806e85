"""Training loops for both model stages.

Stage I fits the dose autoencoder (reconstruction + codebook + adversarial
+ latent uniformity) on reference doses re-targeted to random style values
each step, giving the decoder coverage of the whole slider range. Stage II
trains the conditioned image encoder against preference-consistent targets:
sliders are sampled uniformly per step and the phantom reference is rebuilt
at exactly those values, so the preference-alignment penalty and the
reconstruction targets agree.

Everything is single-threaded and fully determined by (seed, config, cohort);
checkpoints are byte-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import nets
from .autodiff import Tensor
from .domain import CaseBundle, DomainError, HI_RANGE, OAR_WEIGHT_RANGE, PreferenceVector
from .dvh import homogeneity_index
from .nets import DOSE_SCALE, NetConfig
from .phantoms import Cohort, rebuild_reference

METRIC_LOG_HEADER = "step,loss_total,loss_recon,loss_vq,loss_adv,loss_unif,loss_obj"


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    epochs: int
    batch_size: int = 3
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-4
    seed: int = 0
    hi_range: tuple[float, float] = HI_RANGE
    oar_weight_range: tuple[float, float] = OAR_WEIGHT_RANGE
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise DomainError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch_size < 2:
            raise DomainError("batch_size must be >= 2 (uniformity loss needs pairs)")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise DomainError("learning rates must be positive")


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_lines: list[str]
    val_mae_history: list[float]
    diverged: bool
    slider_samples: list[float]


class Adam:
    """Momentum-based adaptive steps; parameter order fixed by sorted name."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.items = [(name, t) for name, t in sorted(params.items()) if t.requires_grad]
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in self.items]
        self.v = [np.zeros_like(t.data) for _, t in self.items]

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for i, (_, p) in enumerate(self.items):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * (g * g)
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.items:
            p.grad = None


def _norm_ref(case: CaseBundle) -> np.ndarray:
    return (case.reference_dose.values / DOSE_SCALE)[..., None].astype(np.float32)


def style_matched_pref(case: CaseBundle) -> PreferenceVector:
    """Sliders that reproduce the case's own reference plan (HI as measured, weights 1)."""
    hi = {}
    for s in case.ptvs:
        h = homogeneity_index(case.reference_dose, s)
        hi[s.name] = float(np.clip(h, *HI_RANGE))
    return PreferenceVector(hi, {s.name: 1.0 for s in case.oars}, _beam_desc(case))


def _beam_desc(case: CaseBundle):
    from .domain import beam_descriptor
    return beam_descriptor(case.beam_angles)


def _sample_pref(rng, case: CaseBundle, cfg: TrainConfig,
                 sample_log: list[float]) -> PreferenceVector:
    hi = {s.name: float(rng.uniform(*cfg.hi_range)) for s in case.ptvs}
    wt = {s.name: float(rng.uniform(*cfg.oar_weight_range)) for s in case.oars}
    sample_log.extend(hi.values())
    sample_log.extend(wt.values())
    return PreferenceVector(hi, wt, _beam_desc(case))


def _finite(*vals: float) -> bool:
    return all(np.isfinite(v) for v in vals)


def _snapshot(modules: list[nets.Module]) -> dict[int, np.ndarray]:
    snap = {}
    for m in modules:
        for name, t in m.parameters().items():
            snap[id(t)] = t.data.copy()
    return snap


def _restore(modules: list[nets.Module], snap: dict[int, np.ndarray]) -> None:
    for m in modules:
        for t in m.parameters().values():
            t.data = snap[id(t)].copy()


def _unit_rows(z: Tensor) -> Tensor:
    """Per-sample flattened latents projected to the unit sphere.

    The uniformity term is only bounded on normalized embeddings; feeding raw
    latents lets it grow without limit and blow up training.
    """
    b = z.data.shape[0]
    flat = ad.reshape(z, (b, -1))
    sq = ad.tsum(ad.mul(flat, flat), axis=1)
    inv = ad.exp(ad.mul(ad.log(ad.add(sq, 1e-12)), -0.5))
    ones_row = ad.tensor(np.ones((1, flat.data.shape[1]), flat.data.dtype))
    return ad.mul(flat, ad.matmul(ad.reshape(inv, (b, 1)), ones_row))


def masked_mae_gy(pred: np.ndarray, ref: np.ndarray,
                  threshold: float = L.MASKED_MAE_THRESHOLD_GY) -> float:
    """Evaluation-side masked MAE in Gray over reference >= threshold voxels."""
    sel = ref >= threshold
    if not sel.any():
        raise DomainError(f"no reference voxels reach {threshold} Gy")
    return float(np.mean(np.abs(pred[sel] - ref[sel]), dtype=np.float64))


# ---------------------------------------------------------------------------
# stage I
# ---------------------------------------------------------------------------

def _stage1_val_mae(vqvae: nets.VqVae, cases: list[CaseBundle]) -> float:
    maes = []
    for case in cases:
        x = Tensor(_norm_ref(case)[None, ...])
        grid = vqvae.quantize(vqvae.encode(x))
        recon = vqvae.decode(grid.straight_through)
        maes.append(masked_mae_gy(recon.data[0, ..., 0] * DOSE_SCALE,
                                  case.reference_dose.values))
    return float(np.mean(maes))


def train_stage1(cohort: Cohort, config: TrainConfig, out_path) -> TrainResult:
    """Fit the dose autoencoder and discriminator; returns the checkpoint."""
    if config.stage != 1:
        raise DomainError("train_stage1 requires a stage-1 config")
    rng = np.random.default_rng(config.seed)
    cfg = config.net
    vqvae = nets.VqVae(rng, cfg)
    disc = nets.Discriminator(rng, cfg)
    opt_g = Adam(vqvae.parameters(), config.lr_generator)
    opt_d = Adam(disc.parameters(), config.lr_discriminator)

    train_cases = cohort.subset("train") or list(cohort.cases)
    valid_cases = cohort.subset("valid") or train_cases[:2]
    lc = config.loss
    log_lines = [METRIC_LOG_HEADER]
    val_history = []
    slider_log: list[float] = []
    diverged = False
    step = 0
    good = _snapshot([vqvae, disc])

    for _epoch in range(config.epochs):
        order = rng.permutation(len(train_cases))
        for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
            batch = [train_cases[i] for i in order[start:start + config.batch_size]]
            targets = []
            for case in batch:
                pref = _sample_pref(rng, case, config, slider_log)
                retargeted = rebuild_reference(case, pref.hi_target, pref.oar_weight)
                targets.append((retargeted.values / DOSE_SCALE)[..., None])
            x = Tensor(np.stack(targets).astype(np.float32))

            opt_g.zero_grad()
            with ad.Tape():
                grid = vqvae.quantize(vqvae.encode(x))
                recon = vqvae.decode(grid.straight_through)
                l_rec = L.recon_loss(x, recon)
                l_vq = L.vq_loss(grid.latent, grid.quantized, lc.vq_commitment)
                l_adv = L.adv_loss_g(disc(recon))
                l_unif = L.uniformity_loss(_unit_rows(grid.latent),
                                           lc.uniformity_temperature,
                                           lc.uniformity_weight)
                total = ad.add(ad.add(l_rec, l_vq), ad.add(l_adv, l_unif))
                ad.backward(total)
            vals = (total.item(), l_rec.item(), l_vq.item(), l_adv.item(), l_unif.item())
            if not _finite(*vals):
                diverged = True
                _restore([vqvae, disc], good)
                break
            opt_g.step()

            opt_d.zero_grad()
            with ad.Tape():
                d_loss = L.adv_loss_d(disc(x), disc(Tensor(recon.data)))
                ad.backward(d_loss)
            if not np.isfinite(d_loss.item()):
                diverged = True
                _restore([vqvae, disc], good)
                break
            opt_d.step()

            step += 1
            log_lines.append(f"{step},{vals[0]:.6f},{vals[1]:.6f},{vals[2]:.6f},"
                             f"{vals[3]:.6f},{vals[4]:.6f},0.0")
        if diverged:
            break
        val_history.append(_stage1_val_mae(vqvae, valid_cases))
        good = _snapshot([vqvae, disc])

    out_path = Path(out_path)
    meta = {"stage": 1, "seed": config.seed, "epochs": config.epochs,
            "config": cfg.to_dict(), "val_mae": val_history,
            "format": "fdp-checkpoint-v1"}
    nets.save_checkpoint(out_path, meta, {"vqvae": vqvae, "disc": disc})
    return TrainResult(out_path, log_lines, val_history, diverged, slider_log)


def load_stage1(path) -> tuple[nets.VqVae, nets.Discriminator, NetConfig]:
    meta, tensors = nets.load_checkpoint(path)
    if meta.get("stage") != 1:
        raise DomainError(f"{path}: expected a stage-1 checkpoint")
    cfg = NetConfig.from_dict(meta["config"])
    vqvae = nets.VqVae(np.random.default_rng(0), cfg)
    disc = nets.Discriminator(np.random.default_rng(0), cfg)
    nets.restore_module(vqvae, "vqvae", tensors)
    nets.restore_module(disc, "disc", tensors)
    return vqvae, disc, cfg


# ---------------------------------------------------------------------------
# stage II
# ---------------------------------------------------------------------------

@dataclass
class _CaseCache:
    case: CaseBundle
    inputs: np.ndarray
    summaries: L.ReferenceSummaries


def _normalized_summaries(case: CaseBundle) -> L.ReferenceSummaries:
    s = L.reference_summaries(case)
    return L.ReferenceSummaries(
        ptv_mean={k: v / DOSE_SCALE for k, v in s.ptv_mean.items()},
        oar_mean={k: v / DOSE_SCALE for k, v in s.oar_mean.items()},
    )


def _stage2_val_mae(model: nets.Stage2Model, caches: list[_CaseCache]) -> float:
    maes = []
    for cc in caches:
        pref = style_matched_pref(cc.case)
        pred, _ = nets.stage2_forward(model, cc.case, pref, input_cache=cc.inputs)
        maes.append(masked_mae_gy(pred.values, cc.case.reference_dose.values))
    return float(np.mean(maes))


def train_stage2(cohort: Cohort, stage1_checkpoint, config: TrainConfig,
                 out_path) -> TrainResult:
    """Fit the conditioned encoder; `stage1_checkpoint=None` is the ablation arm
    that trains the decoder jointly from scratch (and has no latent target)."""
    if config.stage != 2:
        raise DomainError("train_stage2 requires a stage-2 config")
    rng = np.random.default_rng(config.seed)
    cfg = config.net

    pretrained = stage1_checkpoint is not None
    if pretrained:
        vqvae, _, ckpt_cfg = load_stage1(stage1_checkpoint)
        if ckpt_cfg != cfg:
            raise DomainError("stage-1 checkpoint config differs from training config")
        model = nets.Stage2Model(rng, cfg, decoder=vqvae.decoder)
        model.decoder.set_trainable(False)
        vqvae.encoder.set_trainable(False)
        vqvae.codebook.vectors.requires_grad = False
    else:
        # ablation arm: same architecture, decoder learned jointly from scratch
        vqvae = None
        model = nets.Stage2Model(rng, cfg)
    disc = nets.Discriminator(rng, cfg)
    opt_g = Adam(model.parameters(), config.lr_generator)
    opt_d = Adam(disc.parameters(), config.lr_discriminator)

    train_cases = cohort.subset("train") or list(cohort.cases)
    valid_cases = cohort.subset("valid") or train_cases[:2]
    caches = {c.case_id: _CaseCache(c, nets.assemble_input(c), _normalized_summaries(c))
              for c in cohort.cases}
    n_vox = train_cases[0].ct.voxel_count
    soft_T = L.DEFAULT_SOFT_TEMPERATURE_GY / DOSE_SCALE

    log_lines = [METRIC_LOG_HEADER]
    val_history = []
    slider_log: list[float] = []
    diverged = False
    step = 0
    good = _snapshot([model, disc])

    for _epoch in range(config.epochs):
        order = rng.permutation(len(train_cases))
        for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
            batch = [train_cases[i] for i in order[start:start + config.batch_size]]
            prefs = [_sample_pref(rng, c, config, slider_log) for c in batch]
            targets, conds, inputs = [], [], []
            for case, pref in zip(batch, prefs):
                retargeted = rebuild_reference(case, pref.hi_target, pref.oar_weight)
                targets.append((retargeted.values / DOSE_SCALE)[..., None])
                conds.append(nets.condition_vector(case, pref)[0])
                inputs.append(caches[case.case_id].inputs[0])
            x_in = Tensor(np.stack(inputs))
            cond = Tensor(np.stack(conds).astype(np.float32))
            target = Tensor(np.stack(targets).astype(np.float32))

            z_target = None
            if pretrained:
                tgrid = vqvae.quantize(vqvae.encode(target))
                z_target = Tensor(tgrid.quantized.data)

            opt_g.zero_grad()
            with ad.Tape():
                pred, zhat = model.forward(x_in, cond)
                l_img = L.recon_loss(target, pred)
                # the ablation arm has no foundational latent to regress onto
                l_lat = L.recon_loss(z_target, zhat) if pretrained else ad.tensor(0.0)
                l_adv = L.adv_loss_g(disc(pred))
                obj_terms = []
                flat = ad.reshape(pred, (len(batch), n_vox))
                for bi, (case, pref) in enumerate(zip(batch, prefs)):
                    item = ad.gather(flat, bi * n_vox + np.arange(n_vox))
                    obj_terms.append(L.objective_loss(
                        item, case, pref, caches[case.case_id].summaries, soft_T))
                l_obj = obj_terms[0]
                for t in obj_terms[1:]:
                    l_obj = ad.add(l_obj, t)
                l_obj = ad.mul(l_obj, 1.0 / len(batch))
                total = ad.add(ad.add(l_img, l_lat), ad.add(l_adv, l_obj))
                ad.backward(total)
            vals = (total.item(), l_img.item(), l_lat.item(), l_adv.item(), l_obj.item())
            if not _finite(*vals):
                diverged = True
                _restore([model, disc], good)
                break
            opt_g.step()

            opt_d.zero_grad()
            with ad.Tape():
                d_loss = L.adv_loss_d(disc(target), disc(Tensor(pred.data)))
                ad.backward(d_loss)
            if not np.isfinite(d_loss.item()):
                diverged = True
                _restore([model, disc], good)
                break
            opt_d.step()

            step += 1
            log_lines.append(f"{step},{vals[0]:.6f},{vals[1]:.6f},{vals[2]:.6f},"
                             f"{vals[3]:.6f},0.0,{vals[4]:.6f}")
        if diverged:
            break
        val_history.append(_stage2_val_mae(model, [caches[c.case_id] for c in valid_cases]))
        good = _snapshot([model, disc])

    out_path = Path(out_path)
    meta = {"stage": 2, "seed": config.seed, "epochs": config.epochs,
            "config": cfg.to_dict(), "pretrained": pretrained,
            "val_mae": val_history, "format": "fdp-checkpoint-v1"}
    nets.save_checkpoint(out_path, meta, {"stage2": model.encoder, "decoder": model.decoder})
    return TrainResult(out_path, log_lines, val_history, diverged, slider_log)


def load_stage2(path) -> tuple[nets.Stage2Model, NetConfig]:
    meta, tensors = nets.load_checkpoint(path)
    if meta.get("stage") != 2:
        raise DomainError(f"{path}: expected a stage-2 checkpoint")
    cfg = NetConfig.from_dict(meta["config"])
    model = nets.Stage2Model(np.random.default_rng(0), cfg)
    nets.restore_module(model.encoder, "stage2", tensors)
    nets.restore_module(model.decoder, "decoder", tensors)
    return model, cfg
