"""Deterministic procedural face domain with exact deformation ground truth.

Faces are flat cartoon renders controlled by 16 2D landmarks.  Eight
orthogonal deformation modes (disjoint coordinate supports) displace the
landmarks linearly in a parameter vector, so for every rendered image the
true parameters are known exactly and recoverable by projection.  All
geometry lives in unit coordinates ([0,1] x [0,1], y down); rendering
scales to pixels with 4x supersampled rasterization followed by a box
downsample, so identical inputs give bit-identical images.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .blendshape import DifferenceMatrix, MeshVector, ParameterVector

# landmark indices (16 points, unit coordinates)
MOUTH_LEFT, MOUTH_RIGHT, MOUTH_TOP, MOUTH_BOTTOM = 0, 1, 2, 3
BROW_L_INNER, BROW_L_OUTER, BROW_R_INNER, BROW_R_OUTER = 4, 5, 6, 7
EYE_L_TOP, EYE_L_BOTTOM, EYE_R_TOP, EYE_R_BOTTOM = 8, 9, 10, 11
CHIN, NOSE_TIP, EYE_L_CENTER, EYE_R_CENTER = 12, 13, 14, 15
N_LANDMARKS = 16

MODE_NAMES = (
    "mouth_curve",
    "mouth_open",
    "brow_raise_l",
    "brow_raise_r",
    "eye_open_l",
    "eye_open_r",
    "jaw_shift",
    "lip_pucker",
)
N_MODES = len(MODE_NAMES)

SUPERSAMPLE = 4

_MOUTH_POINTS = (MOUTH_LEFT, MOUTH_RIGHT, MOUTH_TOP, MOUTH_BOTTOM)


def _build_mode_matrix() -> np.ndarray:
    """(2*16) x 8 displacement matrix; columns have disjoint supports."""
    M = np.zeros((2 * N_LANDMARKS, N_MODES))

    def put(mode, point, dx=0.0, dy=0.0):
        M[2 * point, mode] = dx
        M[2 * point + 1, mode] = dy

    put(0, MOUTH_LEFT, dy=-0.055)
    put(0, MOUTH_RIGHT, dy=-0.055)
    put(1, MOUTH_BOTTOM, dy=0.075)
    put(1, MOUTH_TOP, dy=-0.018)
    put(2, BROW_L_INNER, dy=-0.042)
    put(2, BROW_L_OUTER, dy=-0.036)
    put(3, BROW_R_INNER, dy=-0.042)
    put(3, BROW_R_OUTER, dy=-0.036)
    put(4, EYE_L_TOP, dy=-0.022)
    put(4, EYE_L_BOTTOM, dy=0.013)
    put(5, EYE_R_TOP, dy=-0.022)
    put(5, EYE_R_BOTTOM, dy=0.013)
    put(6, CHIN, dx=0.055)
    put(7, MOUTH_LEFT, dx=0.060)
    put(7, MOUTH_RIGHT, dx=-0.060)
    return M


_MODE_MATRIX_2D = _build_mode_matrix()


def generator_mode_matrix() -> np.ndarray:
    """Ground-truth modes in MeshVector layout (48 x 8, z rows zero)."""
    M = np.zeros((3 * N_LANDMARKS, N_MODES))
    M[0::3] = _MODE_MATRIX_2D[0::2]
    M[1::3] = _MODE_MATRIX_2D[1::2]
    return M


@dataclass(frozen=True)
class IdentitySpec:
    """Per-person appearance constants, derived deterministically from seed."""

    seed: int
    proportions: np.ndarray  # [wh_ratio, eye_spacing, skin_rgb..., hair_rgb...]

    @classmethod
    def from_seed(cls, seed: int) -> "IdentitySpec":
        rng = np.random.default_rng(np.random.PCG64(int(seed)))
        wh_ratio = rng.uniform(0.70, 0.85)
        eye_spacing = rng.uniform(0.095, 0.13)
        skin_r = rng.uniform(0.55, 0.95)
        skin = np.array(
            [skin_r, skin_r * rng.uniform(0.72, 0.85), skin_r * rng.uniform(0.50, 0.70)]
        )
        hair = rng.uniform(0.25, 0.90, size=3)
        props = np.concatenate([[wh_ratio, eye_spacing], skin, hair])
        return cls(seed=int(seed), proportions=props)

    # secondary render constants, also pure functions of the seed
    def _extras(self):
        rng = np.random.default_rng(np.random.PCG64(int(self.seed) + 0x5EED))
        half_w = rng.uniform(0.26, 0.32)
        bg = rng.uniform(0.75, 0.92) + rng.uniform(-0.04, 0.04, size=3)
        return half_w, np.clip(bg, 0.0, 1.0)

    @property
    def skin(self) -> np.ndarray:
        return self.proportions[2:5]

    @property
    def hair(self) -> np.ndarray:
        return self.proportions[5:8]


@dataclass(frozen=True)
class FaceLandmarks:
    """16 control points in unit image coordinates."""

    points: np.ndarray  # (16, 2)

    def to_mesh_vector(self) -> MeshVector:
        coords = np.zeros(3 * N_LANDMARKS)
        coords[0::3] = self.points[:, 0]
        coords[1::3] = self.points[:, 1]
        return MeshVector(coords)


@dataclass
class SampleRecord:
    image: np.ndarray  # H x W x 3 float32 in [-1, 1]
    params: ParameterVector
    identity: IdentitySpec
    paired_target: Optional[tuple[np.ndarray, ParameterVector]] = None


def neutral_landmarks(identity: IdentitySpec) -> FaceLandmarks:
    wh_ratio, eye_spacing = identity.proportions[0], identity.proportions[1]
    half_w, _ = identity._extras()
    half_h = min(half_w / wh_ratio, 0.44)
    cx, cy = 0.5, 0.52
    eye_y = cy - 0.075
    brow_y = eye_y - 0.065
    # deformable features sit at identity-independent neutral positions so
    # displacements are readable without inferring a per-identity reference
    mouth_y = 0.67
    mouth_hw = 0.105

    pts = np.zeros((N_LANDMARKS, 2))
    pts[MOUTH_LEFT] = (cx - mouth_hw, mouth_y)
    pts[MOUTH_RIGHT] = (cx + mouth_hw, mouth_y)
    pts[MOUTH_TOP] = (cx, mouth_y - 0.026)
    pts[MOUTH_BOTTOM] = (cx, mouth_y + 0.026)
    pts[BROW_L_INNER] = (cx - (eye_spacing - 0.030), brow_y)
    pts[BROW_L_OUTER] = (cx - (eye_spacing + 0.035), brow_y - 0.004)
    pts[BROW_R_INNER] = (cx + (eye_spacing - 0.030), brow_y)
    pts[BROW_R_OUTER] = (cx + (eye_spacing + 0.035), brow_y - 0.004)
    pts[EYE_L_TOP] = (cx - eye_spacing, eye_y - 0.026)
    pts[EYE_L_BOTTOM] = (cx - eye_spacing, eye_y + 0.026)
    pts[EYE_R_TOP] = (cx + eye_spacing, eye_y - 0.026)
    pts[EYE_R_BOTTOM] = (cx + eye_spacing, eye_y + 0.026)
    pts[CHIN] = (cx, cy + half_h)
    pts[NOSE_TIP] = (cx, cy + 0.045)
    pts[EYE_L_CENTER] = (cx - eye_spacing, eye_y)
    pts[EYE_R_CENTER] = (cx + eye_spacing, eye_y)
    return FaceLandmarks(pts)


def deform_landmarks(identity: IdentitySpec, p: ParameterVector) -> FaceLandmarks:
    """Neutral landmarks plus the linear mode displacements for p.

    Modes beyond the built-in 8 have no geometric effect; parameter
    vectors shorter than 8 drive the first len(p) modes.
    """
    k = min(len(p), N_MODES)
    flat = neutral_landmarks(identity).points.reshape(-1).copy()
    flat += _MODE_MATRIX_2D[:, :k] @ p.values[:k]
    return FaceLandmarks(flat.reshape(N_LANDMARKS, 2))


def ground_truth_parameters(
    identity: IdentitySpec, landmarks: FaceLandmarks, n_params: int = N_MODES
) -> ParameterVector:
    """Exact projection of landmark displacements onto the generator modes."""
    delta = (landmarks.points - neutral_landmarks(identity).points).reshape(-1)
    M = _MODE_MATRIX_2D
    p = (M.T @ delta) / np.sum(M * M, axis=0)
    out = np.zeros(n_params)
    out[: min(n_params, N_MODES)] = p[: min(n_params, N_MODES)]
    return ParameterVector(out)


# --- rasterization -----------------------------------------------------------


def _ellipse(xg, yg, cx, cy, a, b):
    return ((xg - cx) / a) ** 2 + ((yg - cy) / b) ** 2 <= 1.0


def _sheared_head(xg, yg, cx, cy, a, b, chin_dx):
    t = np.clip((yg - cy) / b, 0.0, 1.0)
    return (((xg - cx - chin_dx * t) / a) ** 2 + ((yg - cy) / b) ** 2) <= 1.0


def _triangle(xg, yg, p0, p1, p2):
    def side(a, b):
        return (xg - a[0]) * (b[1] - a[1]) - (yg - a[1]) * (b[0] - a[0])

    s0, s1, s2 = side(p0, p1), side(p1, p2), side(p2, p0)
    return ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | ((s0 <= 0) & (s1 <= 0) & (s2 <= 0))


def _capsule(xg, yg, p0, p1, radius):
    vx, vy = p1[0] - p0[0], p1[1] - p0[1]
    denom = max(vx * vx + vy * vy, 1e-12)
    t = np.clip(((xg - p0[0]) * vx + (yg - p0[1]) * vy) / denom, 0.0, 1.0)
    dx = xg - (p0[0] + t * vx)
    dy = yg - (p0[1] + t * vy)
    return dx * dx + dy * dy <= radius * radius


_LIP_COLOR = np.array([0.62, 0.23, 0.25])
_BROW_COLOR = np.array([0.12, 0.09, 0.07])
_PUPIL_COLOR = np.array([0.10, 0.08, 0.08])
_EYE_WHITE = np.array([0.96, 0.96, 0.96])


def render_face(
    identity: IdentitySpec, p: ParameterVector, size: tuple[int, int] = (64, 64)
) -> np.ndarray:
    """Rasterize the deformed face; returns H x W x 3 float32 in [-1, 1]."""
    H, W = size
    if H < 32 or W < 32:
        raise ValueError(f"image size {size} below the 32-pixel minimum")
    lm = deform_landmarks(identity, p).points
    wh_ratio = identity.proportions[0]
    half_w, bg = identity._extras()
    half_h = min(half_w / wh_ratio, 0.44)
    skin, hair = identity.skin, identity.hair
    cx, cy = 0.5, 0.52

    ss = SUPERSAMPLE
    xs = (np.arange(W * ss) + 0.5) / (W * ss)
    ys = (np.arange(H * ss) + 0.5) / (H * ss)
    xg, yg = np.meshgrid(xs, ys)
    img = np.empty((H * ss, W * ss, 3))
    img[:] = bg

    def paint(mask, color):
        img[mask] = color

    chin_dx = lm[CHIN, 0] - cx
    head = _sheared_head(xg, yg, cx, cy, half_w, half_h, chin_dx)
    paint(head, skin)
    hair_cap = _ellipse(xg, yg, cx, cy, half_w * 1.06, half_h * 1.04) & (
        yg < cy - 0.45 * half_h
    )
    paint(hair_cap, hair)

    brow_r = 0.015
    paint(_capsule(xg, yg, lm[BROW_L_OUTER], lm[BROW_L_INNER], brow_r), _BROW_COLOR)
    paint(_capsule(xg, yg, lm[BROW_R_INNER], lm[BROW_R_OUTER], brow_r), _BROW_COLOR)

    for top_i, bot_i, ctr_i in (
        (EYE_L_TOP, EYE_L_BOTTOM, EYE_L_CENTER),
        (EYE_R_TOP, EYE_R_BOTTOM, EYE_R_CENTER),
    ):
        ecx = lm[ctr_i, 0]
        ecy = 0.5 * (lm[top_i, 1] + lm[bot_i, 1])
        semi_y = max(0.5 * (lm[bot_i, 1] - lm[top_i, 1]), 0.002)
        eye = _ellipse(xg, yg, ecx, ecy, 0.058, semi_y)
        paint(eye, _EYE_WHITE)
        pupil = _ellipse(xg, yg, ecx, ecy, 0.016, 0.016) & eye
        paint(pupil, _PUPIL_COLOR)

    nose = _triangle(
        xg,
        yg,
        (lm[NOSE_TIP, 0], lm[NOSE_TIP, 1] - 0.07),
        (lm[NOSE_TIP, 0] - 0.028, lm[NOSE_TIP, 1]),
        (lm[NOSE_TIP, 0] + 0.028, lm[NOSE_TIP, 1]),
    )
    paint(nose, skin * 0.82)

    mouth = (
        _triangle(xg, yg, lm[MOUTH_LEFT], lm[MOUTH_TOP], lm[MOUTH_BOTTOM])
        | _triangle(xg, yg, lm[MOUTH_TOP], lm[MOUTH_RIGHT], lm[MOUTH_BOTTOM])
        # corner blobs keep the lip ends localizable when the wedge thins
        | _ellipse(xg, yg, lm[MOUTH_LEFT, 0], lm[MOUTH_LEFT, 1], 0.014, 0.014)
        | _ellipse(xg, yg, lm[MOUTH_RIGHT, 0], lm[MOUTH_RIGHT, 1], 0.014, 0.014)
    )
    paint(mouth, _LIP_COLOR)

    small = img.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    return (small * 2.0 - 1.0).astype(np.float32)


def mouth_bounding_box(
    identity: IdentitySpec, p: ParameterVector, size: tuple[int, int], margin: float = 0.05
) -> tuple[int, int, int, int]:
    """Pixel bbox (r0, r1, c0, c1) covering the mouth at neutral and at p."""
    H, W = size
    pts = [deform_landmarks(identity, q).points[list(_MOUTH_POINTS)] for q in (p, ParameterVector(np.zeros(len(p))))]
    pts = np.concatenate(pts, axis=0)
    x0, y0 = pts.min(axis=0) - margin
    x1, y1 = pts.max(axis=0) + margin
    return (
        max(int(y0 * H), 0),
        min(int(np.ceil(y1 * H)), H),
        max(int(x0 * W), 0),
        min(int(np.ceil(x1 * W)), W),
    )


# --- dataset generation ------------------------------------------------------


def image_to_png_bytes(image: np.ndarray) -> bytes:
    import io

    arr = np.clip((image.astype(np.float64) + 1.0) * 0.5 * 255.0, 0, 255)
    pil = Image.fromarray(np.round(arr).astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def load_png_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0 * 2.0 - 1.0


def _identity_seed(root_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=[root_seed, 0x1D, index]).generate_state(1, np.uint64)[0])


def _sample_params(rng: np.random.Generator, n_params: int, dist: str) -> np.ndarray:
    if dist == "uniform":
        return rng.uniform(-1.0, 1.0, n_params)
    if dist == "truncated_gaussian":
        return np.clip(rng.normal(0.0, 0.5, n_params), -1.0, 1.0)
    raise ValueError(f"unknown parameter distribution {dist!r}")


def generate_dataset(
    out_dir,
    n_identities: int,
    per_identity: int,
    paired_fraction: float,
    seed: int,
    size: tuple[int, int] = (64, 64),
    n_params: int = N_MODES,
    param_dist: str = "uniform",
) -> Path:
    """Render a dataset to disk; returns the manifest path.

    Every record's RNG stream is split from (seed, identity, record) by
    counter-based seeding, so output is reproducible regardless of
    generation order or worker fan-out.
    """
    if n_identities < 1 or per_identity < 1:
        raise ValueError("counts must be >= 1")
    if not 0.0 <= paired_fraction <= 1.0:
        raise ValueError("paired_fraction must lie in [0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.jsonl"
    lines = []
    for i in range(n_identities):
        id_seed = _identity_seed(seed, i)
        identity = IdentitySpec.from_seed(id_seed)
        for j in range(per_identity):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, i, j]))
            params = _sample_params(rng, n_params, param_dist)
            name = f"id{i:04d}_s{j:04d}.png"
            (out / name).write_bytes(
                image_to_png_bytes(render_face(identity, ParameterVector(params), size))
            )
            rec = {
                "image": name,
                "params": [float(v) for v in params],
                "identity_seed": id_seed,
                "target_image": None,
                "target_params": None,
            }
            if rng.uniform() < paired_fraction:
                trg_params = _sample_params(rng, n_params, param_dist)
                trg_name = f"id{i:04d}_s{j:04d}_trg.png"
                (out / trg_name).write_bytes(
                    image_to_png_bytes(
                        render_face(identity, ParameterVector(trg_params), size)
                    )
                )
                rec["target_image"] = trg_name
                rec["target_params"] = [float(v) for v in trg_params]
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    header = json.dumps(
        {
            "format": "faceslider-dataset",
            "version": 1,
            "n_identities": n_identities,
            "per_identity": per_identity,
            "paired_fraction": paired_fraction,
            "seed": seed,
            "size": [int(size[0]), int(size[1])],
            "n_params": n_params,
            "param_dist": param_dist,
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    manifest_path.write_text("\n".join([header] + lines) + "\n")
    return manifest_path


def manifest_hash(manifest_path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class ManifestRecord:
    image_path: Path
    params: np.ndarray
    identity_seed: int
    target_path: Optional[Path]
    target_params: Optional[np.ndarray]

    @property
    def paired(self) -> bool:
        return self.target_path is not None


def load_manifest(manifest_path) -> tuple[dict, list[ManifestRecord]]:
    path = Path(manifest_path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "faceslider-dataset":
        raise ValueError(f"{path}: not a dataset manifest")
    root = path.parent
    records = []
    for line in lines[1:]:
        rec = json.loads(line)
        records.append(
            ManifestRecord(
                image_path=root / rec["image"],
                params=np.asarray(rec["params"], dtype=np.float64),
                identity_seed=int(rec["identity_seed"]),
                target_path=(root / rec["target_image"]) if rec["target_image"] else None,
                target_params=(
                    np.asarray(rec["target_params"], dtype=np.float64)
                    if rec["target_params"] is not None
                    else None
                ),
            )
        )
    return header, records


def iter_samples(manifest_path) -> Iterator[SampleRecord]:
    _, records = load_manifest(manifest_path)
    for rec in records:
        identity = IdentitySpec.from_seed(rec.identity_seed)
        paired = None
        if rec.paired:
            paired = (load_png_image(rec.target_path), ParameterVector(rec.target_params))
        yield SampleRecord(
            image=load_png_image(rec.image_path),
            params=ParameterVector(rec.params),
            identity=identity,
            paired_target=paired,
        )


def build_landmark_difference_matrix(manifest_path) -> DifferenceMatrix:
    """Columns of deformed-minus-neutral landmark vectors for every record.

    Records whose identity seed cannot be resolved (so no neutral
    reference exists) are skipped with a warning.
    """
    path = Path(manifest_path)
    lines = path.read_text().splitlines()
    if not lines or json.loads(lines[0]).get("format") != "faceslider-dataset":
        raise ValueError(f"{path}: not a dataset manifest")
    cols = []
    for line in lines[1:]:
        rec = json.loads(line)
        try:
            identity = IdentitySpec.from_seed(int(rec["identity_seed"]))
        except (TypeError, ValueError, OverflowError, KeyError):
            warnings.warn(
                f"record {rec.get('image')}: no usable identity seed, skipped",
                stacklevel=2,
            )
            continue
        p = ParameterVector(np.asarray(rec["params"], dtype=np.float64))
        neutral = ParameterVector(np.zeros(len(p)))
        delta = (
            deform_landmarks(identity, p).to_mesh_vector().coords
            - deform_landmarks(identity, neutral).to_mesh_vector().coords
        )
        cols.append(delta)
    if len(cols) < 2:
        raise ValueError("need at least 2 usable records to build a difference matrix")
    return DifferenceMatrix(np.stack(cols, axis=1))
