"""Single inference path shared by the CLI, the HTTP service and the
evaluation harnesses: load checkpoint + basis once, then edit/regress
deterministically over an immutable snapshot."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .blendshape import BlendshapeBasis, ParameterVector, clamp_normalized, read_basis
from .networks import Discriminator, Generator, load_checkpoint, to_hwc, to_nchw


@dataclass
class EditResult:
    image: np.ndarray  # H x W x 3 float32 in [-1, 1]
    mask: np.ndarray  # H x W float32 in [0, 1]
    deformation: np.ndarray  # H x W x 3 float32
    p_est: np.ndarray  # regression of the edited image


class InferenceEngine:
    def __init__(
        self,
        generator: Generator,
        discriminator: Discriminator,
        basis: BlendshapeBasis,
        image_size: int,
        meta: Optional[dict] = None,
    ):
        if generator.n_params != basis.n_components:
            raise ValueError(
                f"model N={generator.n_params} != basis h={basis.n_components}"
            )
        self.generator = generator.eval()
        self.discriminator = discriminator.eval()
        self.basis = basis
        self.image_size = int(image_size)
        self.meta = meta or {}
        for p in self.generator.parameters():
            p.requires_grad_(False)
        for p in self.discriminator.parameters():
            p.requires_grad_(False)

    @property
    def n_params(self) -> int:
        return self.generator.n_params

    @property
    def parameter_labels(self) -> list:
        return [f"{self.basis.basis_kind}_{k:02d}" for k in range(self.n_params)]

    @classmethod
    def from_files(cls, checkpoint_path, basis_path) -> "InferenceEngine":
        generator, discriminator, _, meta, _ = load_checkpoint(
            checkpoint_path, basis_path=basis_path
        )
        basis = read_basis(basis_path)
        return cls(generator, discriminator, basis, meta["image_size"], meta)

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 image, got shape {arr.shape}")
        if arr.shape[0] != self.image_size or arr.shape[1] != self.image_size:
            raise ValueError(
                f"expected {self.image_size}x{self.image_size} image, got {arr.shape[:2]}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
            raise ValueError("image values outside [-1, 1]")
        return np.clip(arr, -1.0, 1.0)

    def _check_params(self, params) -> np.ndarray:
        vec = np.asarray(params, dtype=np.float64).reshape(-1)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("parameters contain non-finite values")
        return clamp_normalized(ParameterVector(vec)).values.astype(np.float32)

    def edit(self, image: np.ndarray, params) -> EditResult:
        arr = self._check_image(image)
        vec = self._check_params(params)
        with torch.no_grad():
            out = self.generator(to_nchw(arr), torch.from_numpy(vec).unsqueeze(0))
            p_est = self.discriminator(out.composited).p_est[0].numpy()
        return EditResult(
            image=to_hwc(out.composited).astype(np.float32),
            mask=out.mask[0, 0].numpy().astype(np.float32),
            deformation=to_hwc(out.deformation_image).astype(np.float32),
            p_est=p_est.astype(np.float64),
        )

    def regress(self, image: np.ndarray) -> np.ndarray:
        arr = self._check_image(image)
        with torch.no_grad():
            p = self.discriminator(to_nchw(arr)).p_est[0].numpy()
        return p.astype(np.float64)

    # batched variants for evaluation throughput
    def edit_batch(self, images: np.ndarray, params: np.ndarray) -> np.ndarray:
        x = to_nchw(np.asarray(images, dtype=np.float32))
        p = torch.from_numpy(np.asarray(params, dtype=np.float32))
        with torch.no_grad():
            out = self.generator(x, p)
        return to_hwc(out.composited).astype(np.float32)

    def regress_batch(self, images: np.ndarray) -> np.ndarray:
        x = to_nchw(np.asarray(images, dtype=np.float32))
        with torch.no_grad():
            return self.discriminator(x).p_est.numpy().astype(np.float64)


def load_engine(checkpoint_path: Path, basis_path: Path) -> InferenceEngine:
    return InferenceEngine.from_files(checkpoint_path, basis_path)
