"""Trainable modules: attention-masked generator, patch critic with a
parameter-regression head, and pluggable identity embedders.

The generator is an encoder/residual/decoder stack conditioned by tiling
the target parameter vector into constant feature maps concatenated to
the RGB input.  Its two heads emit a deformation image (tanh) and a blend
mask (sigmoid) which are composited with the input:

    out = mask * deformation + (1 - mask) * input

The critic is a strided conv trunk with a raw patch-score head (the
relativistic sigmoid lives in the loss) and a parallel regression head
(global average pool + affine).
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1
EMBED_DIM = 64


@dataclass(frozen=True)
class NetPreset:
    name: str
    base_width: int
    n_downsample: int
    n_res_blocks: int
    disc_widths: tuple
    entry_kernel: int = 7


PRESETS = {
    # nano exists for finite-difference gradient checks (~1k weights)
    "nano": NetPreset("nano", 4, 1, 0, (4,), entry_kernel=3),
    # micro keeps trainer unit tests fast
    "micro": NetPreset("micro", 8, 1, 1, (8, 16), entry_kernel=3),
    "miniature": NetPreset("miniature", 16, 2, 2, (16, 32)),
    "paper": NetPreset("paper", 64, 2, 6, (64, 128, 256, 512)),
}


def get_preset(name: str) -> NetPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown network preset {name!r}") from None


# --- tensor layout helpers ---------------------------------------------------


def to_nchw(image_hwc: np.ndarray) -> torch.Tensor:
    """H x W x C float image (or batch N x H x W x C) to torch NCHW."""
    arr = np.asarray(image_hwc, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_hwc(image_nchw: torch.Tensor) -> np.ndarray:
    arr = image_nchw.detach().cpu().numpy()
    if arr.ndim == 4:
        arr = arr.transpose(0, 2, 3, 1)
        return arr[0] if arr.shape[0] == 1 else arr
    return arr.transpose(1, 2, 0)


def _init_module(module: nn.Module, gen: torch.Generator, style: str = "gan") -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                if style == "he":
                    fan_in = m.weight[0].numel()
                    std = (2.0 / fan_in) ** 0.5
                else:
                    std = 0.02
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()


@dataclass
class GeneratorOutput:
    mask: torch.Tensor  # (B, 1, H, W) in [0, 1]
    deformation_image: torch.Tensor  # (B, 3, H, W) in (-1, 1)
    composited: torch.Tensor  # (B, 3, H, W)


@dataclass
class DiscriminatorOutput:
    critic_map: torch.Tensor  # (B, 1, H', W') raw scores
    p_est: torch.Tensor  # (B, N)


def composite(mask: torch.Tensor, deformation: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    return mask * deformation + (1.0 - mask) * original


class _ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, 1, 1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(ch, ch, 3, 1, 1, padding_mode="reflect")
        self.norm1 = nn.InstanceNorm2d(ch, affine=True)
        self.norm2 = nn.InstanceNorm2d(ch, affine=True)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class Generator(nn.Module):
    def __init__(self, n_params: int, preset: NetPreset, seed: int = 0):
        super().__init__()
        self.n_params = n_params
        self.preset = preset
        w = preset.base_width
        k = preset.entry_kernel
        layers = [
            nn.Conv2d(3 + n_params, w, k, 1, k // 2, padding_mode="reflect"),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(inplace=True),
        ]
        for _ in range(preset.n_downsample):
            layers += [
                nn.Conv2d(w, w * 2, 3, 2, 1),
                nn.InstanceNorm2d(w * 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            w *= 2
        layers += [_ResBlock(w) for _ in range(preset.n_res_blocks)]
        for _ in range(preset.n_downsample):
            layers += [
                nn.ConvTranspose2d(w, w // 2, 3, 2, 1, output_padding=1),
                nn.InstanceNorm2d(w // 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            w //= 2
        self.trunk = nn.Sequential(*layers)
        self.image_head = nn.Conv2d(w, 3, k, 1, k // 2, padding_mode="reflect")
        self.mask_head = nn.Conv2d(w, 1, k, 1, k // 2, padding_mode="reflect")
        gen = torch.Generator().manual_seed(seed)
        _init_module(self, gen, style="he")

    def forward(self, images: torch.Tensor, params: torch.Tensor) -> GeneratorOutput:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if params.dim() != 2 or params.shape[1] != self.n_params:
            raise ValueError(
                f"expected (B, {self.n_params}) params, got {tuple(params.shape)}"
            )
        if images.shape[0] != params.shape[0]:
            raise ValueError("batch sizes of images and params differ")
        stride = 2**self.preset.n_downsample
        if images.shape[2] % stride or images.shape[3] % stride:
            raise ValueError(
                f"image size {images.shape[2:]} not divisible by {stride}"
            )
        b, _, h, w = images.shape
        cond = params.view(b, self.n_params, 1, 1).expand(b, self.n_params, h, w)
        feats = self.trunk(torch.cat([images, cond], dim=1))
        deformation = torch.tanh(self.image_head(feats))
        mask = torch.sigmoid(self.mask_head(feats))
        return GeneratorOutput(
            mask=mask,
            deformation_image=deformation,
            composited=composite(mask, deformation, images),
        )


class Discriminator(nn.Module):
    """Patch critic + parameter regression.

    The regression head pools trunk features onto a fixed 4x4 grid before
    the affine map: deformation parameters encode *where* landmarks moved,
    and a global 1x1 pool demonstrably averages that signal away.
    """

    REG_POOL = 8

    def __init__(self, n_params: int, preset: NetPreset, seed: int = 0):
        super().__init__()
        self.n_params = n_params
        self.preset = preset
        layers = []
        in_ch = 3
        for width in preset.disc_widths:
            layers += [nn.Conv2d(in_ch, width, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
            in_ch = width
        self.trunk = nn.Sequential(*layers)
        self.critic_head = nn.Conv2d(in_ch, 1, 3, 1, 1)
        self.regression_head = nn.Linear(in_ch * self.REG_POOL * self.REG_POOL, n_params)
        gen = torch.Generator().manual_seed(seed)
        _init_module(self, gen, style="he")

    def forward(self, images: torch.Tensor) -> DiscriminatorOutput:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        feats = self.trunk(images)
        critic = self.critic_head(feats)
        pooled = F.adaptive_avg_pool2d(feats, self.REG_POOL).flatten(1)
        return DiscriminatorOutput(critic_map=critic, p_est=self.regression_head(pooled))


# --- identity embedders ------------------------------------------------------


class ProjectionEmbedder(nn.Module):
    """Fixed seeded affine map of 8x8-pooled pixels; test/debug backend.

    A zero image maps to the bias vector (the map is affine, not linear).
    """

    kind = "projection"

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.seed = seed
        self.proj = nn.Linear(8 * 8 * 3, dim)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(self.proj.weight.shape, generator=gen) / 8.0)
            self.proj.bias.copy_(torch.randn(self.proj.bias.shape, generator=gen) * 0.1)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(images, (8, 8)).flatten(1)
        return self.proj(pooled)


class ConvEmbedder(nn.Module):
    """Small conv encoder fitted by identity classification on renders."""

    kind = "trained"

    def __init__(self, dim: int = EMBED_DIM, n_classes: int = 0, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 8, 4, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(8, 16, 4, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 4, 2, 1), nn.ReLU(inplace=True),
        )
        self.fc = nn.Linear(32, dim)
        self.classifier = nn.Linear(dim, n_classes) if n_classes else None
        self.register_buffer("fitted", torch.tensor(False))
        _init_module(self, torch.Generator().manual_seed(seed), style="he")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if not bool(self.fitted):
            raise RuntimeError("trained embedder used before pretraining")
        feats = self.encoder(images).mean(dim=(2, 3))
        return self.fc(feats)

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        # cosine softmax: normalized embeddings vs normalized class weights,
        # so classification pressure becomes angular separation
        feats = self.encoder(images).mean(dim=(2, 3))
        emb = F.normalize(self.fc(feats), dim=1)
        weight = F.normalize(self.classifier.weight, dim=1)
        return 10.0 * emb @ weight.T


def embed(images: torch.Tensor, embedder: Optional[nn.Module]) -> torch.Tensor:
    """Deterministic embedding of an NCHW image batch."""
    if embedder is None or not isinstance(embedder, nn.Module):
        raise ValueError("embedder is not initialized")
    return embedder(images)


def build_embedder(kind: str, seed: int = 0, dim: int = EMBED_DIM) -> nn.Module:
    if kind == "projection":
        return ProjectionEmbedder(dim=dim, seed=seed)
    if kind == "trained":
        return ConvEmbedder(dim=dim, seed=seed)
    raise ValueError(f"unknown embedder kind {kind!r}")


def pretrain_conv_embedder(
    n_identities: int = 24,
    per_identity: int = 24,
    size: tuple = (32, 32),
    seed: int = 0,
    epochs: int = 8,
    lr: float = 2e-3,
    dim: int = EMBED_DIM,
) -> ConvEmbedder:
    """Fit a ConvEmbedder by identity classification on synthetic renders."""
    from .blendshape import ParameterVector
    from .synth import IdentitySpec, _identity_seed, render_face

    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n_identities):
        ident = IdentitySpec.from_seed(_identity_seed(seed, i))
        for _ in range(per_identity):
            p = ParameterVector(rng.uniform(-1, 1, 8))
            images.append(render_face(ident, p, size))
            labels.append(i)
    x = to_nchw(np.stack(images))
    y = torch.tensor(labels, dtype=torch.long)

    model = ConvEmbedder(dim=dim, n_classes=n_identities, seed=seed)
    model.fitted.fill_(True)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    order_rng = np.random.default_rng(seed + 1)
    n = x.shape[0]
    for _ in range(epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, 32):
            idx = perm[start : start + 32]
            opt.zero_grad()
            loss = F.cross_entropy(model.logits(x[idx]), y[idx])
            loss.backward()
            opt.step()
    model.eval()
    return model


# --- checkpoint format -------------------------------------------------------
#
# A checkpoint is a .npz archive (zip of named arrays) containing:
#   __meta__   uint8 bytes of a UTF-8 JSON record: format_version, preset,
#              n_params, image_size, basis_hash, seed, counters, ...
#   g/<name>, d/<name>         flat float arrays of module parameters/buffers
#   emb/<name>                 trained-embedder arrays (when applicable)
#   optg/..., optd/...         optimizer state (when saved mid-training)
#   rng/numpy, rng/torch       serialized RNG states (when saved mid-training)


class BasisMismatchError(RuntimeError):
    """Checkpoint was trained against a different basis file."""


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _state_to_arrays(prefix: str, module: nn.Module) -> dict:
    return {
        f"{prefix}/{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def _load_state_from_arrays(prefix: str, module: nn.Module, arrays) -> None:
    state = {}
    plen = len(prefix) + 1
    for key in arrays.files:
        if key.startswith(prefix + "/"):
            state[key[plen:]] = torch.from_numpy(np.array(arrays[key]))
    module.load_state_dict(state)


def save_checkpoint(
    path,
    generator: Generator,
    discriminator: Discriminator,
    meta: dict,
    embedder: Optional[nn.Module] = None,
    extra_arrays: Optional[dict] = None,
) -> None:
    meta = dict(meta)
    meta["format_version"] = CHECKPOINT_FORMAT_VERSION
    meta["preset"] = generator.preset.name
    meta["n_params"] = generator.n_params
    if embedder is not None:
        meta["embedder_kind"] = embedder.kind
        meta["embedder_seed"] = getattr(embedder, "seed", 0)
    arrays = {
        "__meta__": np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
        ).copy()
    }
    arrays.update(_state_to_arrays("g", generator))
    arrays.update(_state_to_arrays("d", discriminator))
    if embedder is not None and embedder.kind == "trained":
        arrays.update(_state_to_arrays("emb", embedder))
    if extra_arrays:
        arrays.update(extra_arrays)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as arrays:
        return json.loads(bytes(arrays["__meta__"]).decode("utf-8"))


def load_checkpoint(
    path, basis_path=None
) -> tuple[Generator, Discriminator, Optional[nn.Module], dict, dict]:
    """Rebuild modules from a checkpoint archive.

    When ``basis_path`` is given its content hash must match the hash the
    checkpoint was trained with, otherwise BasisMismatchError is raised.
    Returns (generator, discriminator, embedder, meta, extra_arrays).
    """
    arrays = np.load(path)
    meta = json.loads(bytes(arrays["__meta__"]).decode("utf-8"))
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    if basis_path is not None:
        actual = file_sha256(basis_path)
        if actual != meta.get("basis_hash"):
            raise BasisMismatchError(
                f"basis hash {actual[:12]}... does not match checkpoint "
                f"{str(meta.get('basis_hash'))[:12]}..."
            )
    preset = get_preset(meta["preset"])
    generator = Generator(meta["n_params"], preset)
    discriminator = Discriminator(meta["n_params"], preset)
    _load_state_from_arrays("g", generator, arrays)
    _load_state_from_arrays("d", discriminator, arrays)
    embedder = None
    kind = meta.get("embedder_kind")
    if kind == "projection":
        embedder = ProjectionEmbedder(seed=meta.get("embedder_seed", 0))
    elif kind == "trained":
        embedder = ConvEmbedder()
        _load_state_from_arrays("emb", embedder, arrays)
    extra = {
        key: np.array(arrays[key])
        for key in arrays.files
        if key.split("/")[0] not in ("g", "d", "emb") and key != "__meta__"
    }
    generator.eval()
    discriminator.eval()
    if embedder is not None:
        embedder.eval()
    return generator, discriminator, embedder, meta, extra
