"""Dose networks: two-stage generative model and discriminator.

Stage I is a VQ autoencoder over dose volumes; its decoder is reused
(frozen by default) in Stage II, where a multi-channel image encoder with
per-block adaptive instance normalization maps case + preference sliders to
the latent the decoder turns into a dose.

Channel widths are the desk-scale configuration; the reference configuration
that inspired the layout is kept in `REFERENCE_CONFIG` for comparison.
Volumes are channels-last float32, (batch, nx, ny, nz, channels); doses are
normalized by DOSE_SCALE inside the models.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .domain import CaseBundle, DomainError, DoseGrid, PreferenceVector, beam_descriptor
from .phantoms import beam_plate

DOSE_SCALE = 4.0   # Gy per model-side unit; keeps L1 dose terms dominant over the unit-scale adversarial term

MAX_PTV_SLOTS = 3
MAX_OAR_SLOTS = 6
IN_CHANNELS = 7      # ct, 3 ptv masks, coded oar merge, beam plate, prescription map
COND_DIM = MAX_PTV_SLOTS + MAX_OAR_SLOTS + 12   # hi slots + oar slots + beam bins

# the full-scale layout this model is scaled down from
REFERENCE_CONFIG = {
    "stage1_channels": [32, 256, 512, 512],
    "num_embeddings": 512,
    "embedding_dim": 4,
    "stage2_n_channels": 24,
    "stage2_block_counts": [2, 3, 4, 4, 8, 8, 8, 4, 3],
}


@dataclass(frozen=True)
class NetConfig:
    grid: tuple[int, int, int] = (32, 32, 32)
    embedding_dim: int = 4
    num_embeddings: int = 128
    enc_channels: tuple[int, int] = (16, 64)
    res_hidden: int = 128
    dec_channels: tuple[int, int, int] = (64, 32, 8)
    stage2_channels: tuple[int, int, int] = (16, 32, 64)
    stage2_block_counts: tuple[int, ...] = (1, 2, 2, 2, 2)
    cond_hidden: int = 32
    disc_channels: tuple[int, int, int] = (4, 8, 16)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return NetConfig(**kwargs)


# ---------------------------------------------------------------------------
# parameter plumbing
# ---------------------------------------------------------------------------

def _he_conv(rng, k, cin, cout, gain=2.0) -> np.ndarray:
    std = np.sqrt(gain / (k ** 3 * cin))
    return (rng.standard_normal((k, k, k, cin, cout)) * std).astype(np.float32)


class Module:
    """Minimal parameter container; children registered by attribute assignment."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + name: t for name, t in self._params.items()}
        for name, child in self._children.items():
            out.update(child.parameters(prefix + name + "."))
        return out

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag


class Conv(Module):
    def __init__(self, rng, k, cin, cout, stride=1, pad=1, init_scale=1.0):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.w = Tensor(_he_conv(rng, k, cin, cout) * init_scale, requires_grad=True)
        self.b = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.conv3d(x, self.w, self.b, self.stride, self.pad)


class ConvTranspose(Module):
    def __init__(self, rng, k, cin, cout, stride=2, pad=1):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.w = Tensor(_he_conv(rng, k, cin, cout), requires_grad=True)
        self.b = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.conv3d_transpose(x, self.w, self.b, self.stride, self.pad)


class Linear(Module):
    def __init__(self, rng, cin, cout, zero_init=False):
        super().__init__()
        w = np.zeros((cin, cout), np.float32) if zero_init \
            else (rng.standard_normal((cin, cout)) * np.sqrt(2.0 / cin)).astype(np.float32)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.w, self.b)


# ---------------------------------------------------------------------------
# vector quantization
# ---------------------------------------------------------------------------

@dataclass
class LatentGrid:
    """Encoder latent plus its quantized counterpart and code indices."""

    latent: Tensor                   # (B, s, s, s, embedding_dim)
    quantized: Tensor | None = None  # codebook rows, differentiable to the codebook
    straight_through: Tensor | None = None
    indices: np.ndarray | None = None


class Codebook(Module):
    def __init__(self, rng, num_embeddings: int, embedding_dim: int):
        super().__init__()
        if num_embeddings < 1:
            raise DomainError("codebook must hold at least one embedding")
        self.num_embeddings = num_embeddings
        self.embedding_dim = embedding_dim
        init = (rng.standard_normal((num_embeddings, embedding_dim)) * 0.5).astype(np.float32)
        self.vectors = Tensor(init, requires_grad=True)


def quantize(latent: Tensor, codebook: Codebook) -> LatentGrid:
    """Nearest-codeword replacement, lowest index on ties, straight-through gradient."""
    d = codebook.embedding_dim
    if latent.data.shape[-1] != d:
        raise ad.ShapeError(
            f"quantize: latent channels {latent.data.shape[-1]} != embedding dim {d}")
    flat = latent.data.reshape(-1, d)
    diff = flat[:, None, :] - codebook.vectors.data[None, :, :]
    dist = np.sum(diff * diff, axis=-1)
    idx = np.argmin(dist, axis=1)          # first minimum = lowest index
    gather_idx = (idx[:, None] * d + np.arange(d)[None, :]).ravel()
    zq = ad.reshape(ad.gather(codebook.vectors, gather_idx), latent.data.shape)
    st = ad.add(latent, ad.stop_gradient(ad.sub(zq, latent)))
    return LatentGrid(latent=latent, quantized=zq, straight_through=st,
                      indices=idx.reshape(latent.data.shape[:-1]))


# ---------------------------------------------------------------------------
# stage I autoencoder
# ---------------------------------------------------------------------------

class ResBlock(Module):
    def __init__(self, rng, channels, hidden):
        super().__init__()
        self.c1 = Conv(rng, 3, channels, hidden)
        self.c2 = Conv(rng, 3, hidden, channels)

    def __call__(self, x):
        h = ad.relu(self.c1(x))
        return ad.add(x, self.c2(h))


class DoseEncoder(Module):
    """Two stride-2 stages (4x spatial reduction) into the embedding space."""

    def __init__(self, rng, cfg: NetConfig):
        super().__init__()
        c1, c2 = cfg.enc_channels
        self.down1 = Conv(rng, 4, 1, c1, stride=2, pad=1)
        self.down2 = Conv(rng, 4, c1, c2, stride=2, pad=1)
        self.res = ResBlock(rng, c2, cfg.res_hidden)
        self.proj = Conv(rng, 3, c2, cfg.embedding_dim)

    def __call__(self, x):
        h = ad.relu(self.down1(x))
        h = ad.relu(self.down2(h))
        h = ad.relu(self.res(h))
        return self.proj(h)


class DoseDecoder(Module):
    """Latent back to a non-negative dose volume (softplus rectified)."""

    def __init__(self, rng, cfg: NetConfig):
        super().__init__()
        c1, c2, c3 = cfg.dec_channels
        self.inp = Conv(rng, 3, cfg.embedding_dim, c1)
        self.res = ResBlock(rng, c1, cfg.res_hidden)
        self.up1 = ConvTranspose(rng, 4, c1, c2)
        self.up2 = ConvTranspose(rng, 4, c2, c3)
        self.out = Conv(rng, 3, c3, 1)

    def __call__(self, z):
        h = ad.relu(self.inp(z))
        h = ad.relu(self.res(h))
        h = ad.relu(self.up1(h))
        h = ad.relu(self.up2(h))
        return ad.softplus(self.out(h))


class VqVae(Module):
    def __init__(self, rng, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = DoseEncoder(rng, cfg)
        self.codebook = Codebook(rng, cfg.num_embeddings, cfg.embedding_dim)
        self.decoder = DoseDecoder(rng, cfg)

    def encode(self, x: Tensor) -> LatentGrid:
        return LatentGrid(latent=self.encoder(x))

    def quantize(self, grid: LatentGrid) -> LatentGrid:
        return quantize(grid.latent, self.codebook)

    def decode(self, quantized: Tensor) -> Tensor:
        return self.decoder(quantized)

    def forward(self, x: Tensor) -> tuple[Tensor, LatentGrid]:
        grid = self.quantize(self.encode(x))
        return self.decode(grid.straight_through), grid


class Discriminator(Module):
    """Strided conv stack to a scalar score per item (mean of the score map)."""

    def __init__(self, rng, cfg: NetConfig):
        super().__init__()
        c1, c2, c3 = cfg.disc_channels
        self.c1 = Conv(rng, 4, 1, c1, stride=2, pad=1)
        self.c2 = Conv(rng, 4, c1, c2, stride=2, pad=1)
        self.c3 = Conv(rng, 4, c2, c3, stride=2, pad=1)
        self.out = Conv(rng, 3, c3, 1)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.leaky_relu(self.c1(x))
        h = ad.leaky_relu(self.c2(h))
        h = ad.leaky_relu(self.c3(h))
        score_map = self.out(h)
        return ad.mean(score_map, axis=tuple(range(1, score_map.data.ndim)))


# ---------------------------------------------------------------------------
# stage II: conditioned image encoder
# ---------------------------------------------------------------------------

@dataclass
class ConditionEmbedding:
    """One (scale, shift) pair per conditioned normalization site."""

    pairs: list[tuple[Tensor, Tensor]]


class ConditionMapper(Module):
    """Two-layer perceptron from the preference vector to all AdaIN parameters.

    Heads are zero-initialized: at initialization (and whenever the condition
    input is ignored) every site receives scale=1, shift=0, which reduces the
    conditioned encoder to its unconditioned form exactly.
    """

    def __init__(self, rng, site_channels: list[int], hidden: int):
        super().__init__()
        self.site_channels = list(site_channels)
        self.trunk = Linear(rng, COND_DIM, hidden)
        for i, c in enumerate(self.site_channels):
            setattr(self, f"head{i}", Linear(rng, hidden, 2 * c, zero_init=True))

    def __call__(self, cond: Tensor) -> ConditionEmbedding:
        h = ad.relu(self.trunk(cond))
        pairs = []
        for i, c in enumerate(self.site_channels):
            raw = getattr(self, f"head{i}")(h)
            scale = ad.add(ad.gather(raw, _col_index(raw.data.shape, 0, c)), 1.0)
            shift = ad.gather(raw, _col_index(raw.data.shape, c, 2 * c))
            b = raw.data.shape[0]
            pairs.append((ad.reshape(scale, (b, c)), ad.reshape(shift, (b, c))))
        return ConditionEmbedding(pairs)


def _col_index(shape, start, stop):
    b, n = shape
    cols = np.arange(start, stop)
    return (np.arange(b)[:, None] * n + cols[None, :]).ravel()


class CondResBlock(Module):
    """Residual block with AdaIN after each normalization."""

    def __init__(self, rng, channels):
        super().__init__()
        self.channels = channels
        self.c1 = Conv(rng, 3, channels, channels)
        self.c2 = Conv(rng, 3, channels, channels)

    def __call__(self, x, cond_pairs, site_iter):
        h = ad.instance_norm(self.c1(x))
        h = _adain(h, cond_pairs, site_iter)
        h = ad.relu(h)
        h = ad.instance_norm(self.c2(h))
        h = _adain(h, cond_pairs, site_iter)
        return ad.relu(ad.add(x, h))


def _adain(h, cond_pairs, site_iter):
    if cond_pairs is None:
        return h
    scale, shift = cond_pairs[next(site_iter)]
    return ad.channel_scale_shift(h, scale, shift)


class Stage2Encoder(Module):
    """Multi-channel case encoder, conditioned via AdaIN, to the latent grid."""

    def __init__(self, rng, cfg: NetConfig, proj_scale: float = 1.0):
        super().__init__()
        c1, c2, c3 = cfg.stage2_channels
        n_stem, n1, n2, n3, n4 = cfg.stage2_block_counts
        assert n_stem == 1, "single stem block"
        self.stem = Conv(rng, 4, IN_CHANNELS, c1, stride=2, pad=1)
        self.blocks1 = [CondResBlock(rng, c1) for _ in range(n1)]
        self.down = Conv(rng, 4, c1, c2, stride=2, pad=1)
        self.blocks2 = [CondResBlock(rng, c2) for _ in range(n2)]
        self.grow = Conv(rng, 3, c2, c3)
        self.blocks3 = [CondResBlock(rng, c3) for _ in range(n3)]
        self.blocks4 = [CondResBlock(rng, c3) for _ in range(n4)]
        for i, blk in enumerate(self.blocks1 + self.blocks2 + self.blocks3 + self.blocks4):
            setattr(self, f"block{i}", blk)
        self.proj = Conv(rng, 3, c3, cfg.embedding_dim, init_scale=proj_scale)
        self.site_channels = []
        for blk in self.blocks1 + self.blocks2 + self.blocks3 + self.blocks4:
            self.site_channels += [blk.channels, blk.channels]
        self.cond = ConditionMapper(rng, self.site_channels, cfg.cond_hidden)

    def __call__(self, x: Tensor, cond_vec: Tensor | None) -> Tensor:
        pairs = self.cond(cond_vec).pairs if cond_vec is not None else None
        sites = iter(range(len(self.site_channels)))
        h = ad.relu(self.stem(x))
        for blk in self.blocks1:
            h = blk(h, pairs, sites)
        h = ad.relu(self.down(h))
        for blk in self.blocks2:
            h = blk(h, pairs, sites)
        h = ad.relu(self.grow(h))
        for blk in self.blocks3:
            h = blk(h, pairs, sites)
        for blk in self.blocks4:
            h = blk(h, pairs, sites)
        return self.proj(h)


class Stage2Model(Module):
    """Conditioned encoder plus the (typically frozen) foundational decoder.

    The encoder emits continuous latents (so dose responds smoothly to the
    sliders); its final projection starts near zero, which places the initial
    latents at the center of the codebook cloud the decoder was trained on.
    During training the latent-reconstruction term keeps them near the
    quantized manifold.
    """

    def __init__(self, rng, cfg: NetConfig, decoder: DoseDecoder | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = Stage2Encoder(rng, cfg, proj_scale=0.02)
        self.decoder = decoder if decoder is not None else DoseDecoder(rng, cfg)

    def forward(self, x: Tensor, cond_vec: Tensor | None) -> tuple[Tensor, Tensor]:
        zhat = self.encoder(x, cond_vec)
        return self.decoder(zhat), zhat


# ---------------------------------------------------------------------------
# case/preference encoding
# ---------------------------------------------------------------------------

def assemble_input(case: CaseBundle) -> np.ndarray:
    """7-channel model input (1, nx, ny, nz, 7). Channel map in docs/format.md."""
    dims = case.ct.dims
    chans = np.zeros(dims + (IN_CHANNELS,), np.float32)
    chans[..., 0] = case.ct.values / 1000.0
    ptvs = sorted(case.ptvs, key=lambda s: s.name)
    if len(ptvs) > MAX_PTV_SLOTS:
        raise DomainError(f"{case.case_id}: more than {MAX_PTV_SLOTS} PTVs")
    for i, s in enumerate(ptvs):
        chans[..., 1 + i] = s.voxels
    oars = sorted(case.oars, key=lambda s: s.name)
    if len(oars) > MAX_OAR_SLOTS:
        raise DomainError(f"{case.case_id}: more than {MAX_OAR_SLOTS} OARs")
    for i, s in enumerate(oars):
        # ordinal coding keeps per-OAR identity recoverable from one channel
        chans[..., 4][s.voxels] = (i + 1) / MAX_OAR_SLOTS
    ptv_union = np.zeros(dims, bool)
    for s in ptvs:
        ptv_union |= s.voxels
    focus = np.array(np.nonzero(ptv_union)).mean(axis=1)
    chans[..., 5] = beam_plate(dims, case.ct.spacing, case.beam_angles, focus)
    for s in ptvs:
        chans[..., 6][s.voxels] = s.prescription / DOSE_SCALE
    return chans[None, ...]


def condition_vector(case: CaseBundle, pref: PreferenceVector) -> np.ndarray:
    """Fixed-length conditioning input: normalized sliders + beam descriptor."""
    pref.validate_for_case(case)
    vec = np.zeros(COND_DIM, np.float32)
    for i, s in enumerate(sorted(case.ptvs, key=lambda s: s.name)):
        vec[i] = (pref.hi_target[s.name] - 0.11) / 0.09
    for i, s in enumerate(sorted(case.oars, key=lambda s: s.name)):
        vec[MAX_PTV_SLOTS + i] = (pref.oar_weight[s.name] - 1.0) / 0.3
    vec[MAX_PTV_SLOTS + MAX_OAR_SLOTS:] = pref.beam_descriptor
    return vec[None, :]


def stage2_forward(model: Stage2Model, case: CaseBundle, pref: PreferenceVector,
                   input_cache: np.ndarray | None = None) -> tuple[DoseGrid, np.ndarray]:
    """Predict a dose for one case under the given sliders (no grad recording).

    Returns the dose in Gy plus the latent the decoder consumed.
    """
    x = Tensor(input_cache if input_cache is not None else assemble_input(case))
    cond = Tensor(condition_vector(case, pref))
    pred_norm, zhat = model.forward(x, cond)
    values = pred_norm.data[0, ..., 0] * DOSE_SCALE
    return DoseGrid(case.ct.dims, case.ct.spacing, values), zhat.data


# ---------------------------------------------------------------------------
# checkpoint container (see docs/checkpoint.md)
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FDPW0001"


def save_checkpoint(path, meta: dict, modules: dict[str, Module]) -> None:
    """Versioned binary container of shape-tagged tensors; deterministic bytes."""
    tensors: dict[str, np.ndarray] = {}
    for prefix, module in modules.items():
        for name, t in module.parameters(prefix + ".").items():
            tensors[name] = t.data
    index = []
    payload = io.BytesIO()
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        raw = arr.astype("<" + arr.dtype.str[1:]).tobytes()
        index.append({"name": name, "dtype": str(arr.dtype),
                      "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.write(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise DomainError(f"{path}: not a weight checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    return header["meta"], tensors


def restore_module(module: Module, prefix: str, tensors: dict[str, np.ndarray]) -> None:
    for name, t in module.parameters(prefix + ".").items():
        if name not in tensors:
            raise DomainError(f"checkpoint missing tensor {name}")
        arr = tensors[name]
        if tuple(arr.shape) != t.data.shape:
            raise DomainError(
                f"checkpoint tensor {name} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.astype(t.data.dtype)
