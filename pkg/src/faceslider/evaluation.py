"""Quantitative evaluation: Gaussian-coupled image distance, parameter
regression error reports, and the transfer/interpolation/neutralization
harnesses that exploit the synthetic domain's exact ground truth.

The image distance is the quadratic form

    d(x, y) = (1/2pi) * sum_ij exp(-|P_i - P_j|^2 / (2 sigma^2)) <d_i, d_j>

over pixel locations P with per-pixel RGB difference inner products.  It
is evaluated exactly (up to kernel truncation) with a separable 1-D
Gaussian convolution; the kernel is truncated at ``truncate * sigma``
(default 6, which keeps the dropped tail below ~1e-8 relative).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .blendshape import ParameterVector, clamp_normalized, interpolate_parameters
from .engine import InferenceEngine
from .synth import IdentitySpec, ManifestRecord, image_to_png_bytes, load_png_image, render_face

TWO_PI = 2.0 * np.pi


def _gaussian_kernel(sigma: float, truncate: float) -> np.ndarray:
    radius = int(np.ceil(truncate * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(offsets**2) / (2.0 * sigma * sigma))


def _conv_axis_zero(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate with a symmetric kernel along one axis, zero padding."""
    radius = len(kernel) // 2
    out = np.zeros_like(arr)
    n = arr.shape[axis]
    for i, kv in enumerate(kernel):
        off = i - radius
        if off <= -n or off >= n:
            continue
        src = [slice(None)] * arr.ndim
        dst = [slice(None)] * arr.ndim
        src[axis] = slice(max(0, off), n + min(0, off))
        dst[axis] = slice(max(0, -off), n + min(0, -off))
        out[tuple(dst)] += kv * arr[tuple(src)]
    return out


def image_euclidean_distance(
    x: np.ndarray, y: np.ndarray, sigma: float = 1.0, truncate: float = 6.0
) -> float:
    """Spatially-coupled squared image distance (see module docstring)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    delta = a - b
    if delta.ndim == 2:
        delta = delta[:, :, None]
    kernel = _gaussian_kernel(sigma, truncate)
    smooth = _conv_axis_zero(_conv_axis_zero(delta, kernel, 0), kernel, 1)
    return float(np.sum(delta * smooth) / TWO_PI)


@dataclass
class EvalReport:
    metrics: dict
    sample_count: int
    config_hash: str
    excluded: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "metrics": self.metrics,
            "sample_count": self.sample_count,
            "config_hash": self.config_hash,
            "excluded": self.excluded,
        }
        payload.update(self.extra)
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _config_hash(engine: InferenceEngine, **kwargs) -> str:
    payload = json.dumps(
        {
            "checkpoint_meta": engine.meta.get("config_hash", ""),
            "basis_hash": engine.meta.get("basis_hash", ""),
            **{k: repr(v) for k, v in kwargs.items()},
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _record_image(rec: ManifestRecord, size: int) -> np.ndarray:
    img = load_png_image(rec.image_path)
    if img.shape[0] != size or img.shape[1] != size:
        raise ValueError(f"{rec.image_path}: size {img.shape[:2]} != engine size {size}")
    return img


VS_TRUTH = "vs_truth"
CONSISTENCY = "consistency"


def regression_error_report(
    engine: InferenceEngine,
    records: Sequence[ManifestRecord],
    mode: str = VS_TRUTH,
    seed: int = 0,
    batch_size: int = 64,
) -> EvalReport:
    """Mean relative parameter-regression error.

    vs_truth:     mean ||p_true - D_p(I)|| / ||p_true|| over real images.
    consistency:  sample p_trg, edit, re-regress; error vs p_trg.
    Samples with ||reference|| < 1e-6 are excluded but counted.
    """
    if mode not in (VS_TRUTH, CONSISTENCY):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    images = np.stack([_record_image(r, engine.image_size) for r in records])
    if mode == VS_TRUTH:
        refs = np.stack([r.params for r in records])
        est = np.concatenate(
            [
                engine.regress_batch(images[i : i + batch_size])
                for i in range(0, len(images), batch_size)
            ]
        )
    else:
        refs = rng.uniform(-1.0, 1.0, size=(len(records), engine.n_params))
        est = []
        for i in range(0, len(images), batch_size):
            out = engine.edit_batch(images[i : i + batch_size], refs[i : i + batch_size])
            est.append(engine.regress_batch(np.clip(out, -1.0, 1.0)))
        est = np.concatenate(est)
    norms = np.linalg.norm(refs, axis=1)
    keep = norms >= 1e-6
    rel = np.linalg.norm(refs[keep] - est[keep], axis=1) / norms[keep]
    return EvalReport(
        metrics={"relative_error": float(rel.mean()), "mode": mode},
        sample_count=int(keep.sum()),
        config_hash=_config_hash(engine, mode=mode, seed=seed, n=len(records)),
        excluded=int((~keep).sum()),
    )


def _contact_sheet(rows: list, path: Path) -> None:
    grid = np.concatenate([np.concatenate(row, axis=1) for row in rows], axis=0)
    Path(path).write_bytes(image_to_png_bytes(grid))


def transfer_harness(
    engine: InferenceEngine,
    src_records: Sequence[ManifestRecord],
    trg_records: Sequence[ManifestRecord],
    interpolation_steps: int = 5,
    out_dir: Optional[Path] = None,
    sigma: float = 1.0,
    align: Optional[Callable] = None,
    max_grid_rows: int = 8,
) -> EvalReport:
    """Expression transfer with regressed target parameters.

    For each (src, trg) pair: p_trg = D_p(I_trg); the edit G(I_src, p_trg)
    is scored by IED against the ground-truth render of (id_src, p_trg),
    with IED(I_src, render) as the no-edit baseline.  Also emits an
    interpolation strip whose a=1 endpoint equals the source-parameter
    edit.  ``align`` is a pose-alignment hook applied to each image pair
    before IED; the synthetic domain is pose-fixed so it defaults to None.
    """
    size = engine.image_size
    ied_transfer, ied_baseline, ied_recon = [], [], []
    grid_rows = []
    for row, (src, trg) in enumerate(zip(src_records, trg_records)):
        src_img = _record_image(src, size)
        trg_img = _record_image(trg, size)
        identity = IdentitySpec.from_seed(src.identity_seed)
        p_trg = clamp_normalized(ParameterVector(engine.regress(trg_img)))
        p_src = clamp_normalized(ParameterVector(engine.regress(src_img)))
        edited = engine.edit(src_img, p_trg.values).image
        truth = render_face(identity, p_trg, (size, size))
        pair = (edited, truth) if align is None else align(edited, truth)
        base_pair = (src_img, truth) if align is None else align(src_img, truth)
        ied_transfer.append(image_euclidean_distance(pair[0], pair[1], sigma=sigma))
        ied_baseline.append(image_euclidean_distance(base_pair[0], base_pair[1], sigma=sigma))
        # self-reconstruction reference: edit with the source's own parameters
        recon = engine.edit(src_img, p_src.values).image
        truth_src = render_face(identity, p_src, (size, size))
        ied_recon.append(image_euclidean_distance(recon, truth_src, sigma=sigma))
        if out_dir is not None and row < max_grid_rows:
            strip = [src_img]
            for step in range(interpolation_steps):
                a = 1.0 - step / (interpolation_steps - 1)  # a=1 (source) first
                p = interpolate_parameters(p_src, p_trg, a)
                strip.append(engine.edit(src_img, p.values).image)
            strip += [trg_img, truth]
            grid_rows.append(strip)
    if out_dir is not None and grid_rows:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _contact_sheet(grid_rows, out_dir / "transfer_grid.png")
    mean_transfer = float(np.mean(ied_transfer))
    mean_baseline = float(np.mean(ied_baseline))
    return EvalReport(
        metrics={
            "mean_transfer_ied": mean_transfer,
            "mean_baseline_ied": mean_baseline,
            "improvement": 1.0 - mean_transfer / mean_baseline if mean_baseline else 0.0,
            "mean_self_reconstruction_ied": float(np.mean(ied_recon)),
        },
        sample_count=len(ied_transfer),
        config_hash=_config_hash(engine, op="transfer", n=len(ied_transfer), sigma=sigma),
    )


def neutralize(
    engine: InferenceEngine,
    records: Sequence[ManifestRecord],
    out_dir: Optional[Path] = None,
    sigma: float = 1.0,
    max_grid_rows: int = 8,
) -> EvalReport:
    """Edit with the zero vector and score against ground-truth neutrals."""
    size = engine.image_size
    zeros = np.zeros(engine.n_params)
    ied_out, ied_in, norm_out, norm_in = [], [], [], []
    grid_rows = []
    for row, rec in enumerate(records):
        img = _record_image(rec, size)
        identity = IdentitySpec.from_seed(rec.identity_seed)
        neutral = render_face(identity, ParameterVector(zeros), (size, size))
        result = engine.edit(img, zeros)
        ied_out.append(image_euclidean_distance(result.image, neutral, sigma=sigma))
        ied_in.append(image_euclidean_distance(img, neutral, sigma=sigma))
        norm_out.append(float(np.linalg.norm(result.p_est)))
        norm_in.append(float(np.linalg.norm(engine.regress(img))))
        if out_dir is not None and row < max_grid_rows:
            grid_rows.append([img, result.image, neutral])
    if out_dir is not None and grid_rows:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _contact_sheet(grid_rows, out_dir / "neutralize_grid.png")
    return EvalReport(
        metrics={
            "mean_neutralized_ied": float(np.mean(ied_out)),
            "mean_input_ied": float(np.mean(ied_in)),
            "mean_regressed_norm_out": float(np.mean(norm_out)),
            "mean_regressed_norm_in": float(np.mean(norm_in)),
        },
        sample_count=len(ied_out),
        config_hash=_config_hash(engine, op="neutralize", n=len(ied_out), sigma=sigma),
    )
