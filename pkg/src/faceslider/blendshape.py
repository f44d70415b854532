"""Linear blendshape model over landmark/mesh displacement vectors.

A basis is built from a matrix of expressive-minus-neutral difference
vectors by a sparse matrix factorization

    min_{B,C}  ||D - B C||_F^2 + w * sum_k ||C_k||_2     s.t.  V(B)

where B (3n x h) holds spatial components, C (h x m) per-sample
coefficients, and the group penalty acts on rows of C.  The constraint V
is either max|B_k| = 1 per column, or B_k >= 0 with max B_k = 1.  The
solver alternates exact block-coordinate updates (closed-form group
shrinkage for rows of C, box-clipped least squares for columns of B), so
the objective is nonincreasing by construction; the exact max = 1 rescale
is applied once after convergence with a compensating rescale of C.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

ABS_MAX_ONE = "abs_max_one"
NONNEG_MAX_ONE = "nonneg_max_one"
CONSTRAINT_VARIANTS = (ABS_MAX_ONE, NONNEG_MAX_ONE)

_BASIS_MAGIC = b"BLNDBAS1"


class DimensionError(ValueError):
    """Raised when vector/matrix dimensions do not line up."""


def _as_float_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class MeshVector:
    """Flat xyz coordinate vector (2D landmarks are zero-padded to 3D)."""

    coords: np.ndarray

    def __post_init__(self):
        arr = _as_float_vector(self.coords, "coords")
        if arr.size % 3 != 0:
            raise DimensionError(f"coords length {arr.size} not divisible by 3")
        object.__setattr__(self, "coords", arr)

    @property
    def n_points(self) -> int:
        return self.coords.size // 3


@dataclass(frozen=True)
class DifferenceMatrix:
    """Columns of expressive-minus-neutral difference vectors (3n x m)."""

    columns: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.columns, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"columns must be 2-D, got shape {arr.shape}")
        if arr.shape[0] % 3 != 0:
            raise DimensionError("row count must be divisible by 3")
        if not np.all(np.isfinite(arr)):
            raise ValueError("difference matrix contains non-finite entries")
        object.__setattr__(self, "columns", arr)

    @property
    def n_samples(self) -> int:
        return self.columns.shape[1]


@dataclass(frozen=True)
class ParameterVector:
    """Deformation coefficients; normalized form lives in [-1, 1]^N."""

    values: np.ndarray
    basis_kind: str = "expression"

    def __post_init__(self):
        object.__setattr__(self, "values", _as_float_vector(self.values, "values"))

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class BlendshapeBasis:
    """Mean shape + spatial components + per-component scales.

    ``scales`` are the square roots of the component energies (empirical
    coefficient RMS by default), so dividing raw projections by them puts
    training-data parameters roughly in [-1, 1].
    """

    mean: MeshVector
    components: np.ndarray
    scales: np.ndarray
    constraint_variant: str = ABS_MAX_ONE
    basis_kind: str = "expression"
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        comp = np.asarray(self.components, dtype=np.float64)
        if comp.ndim != 2 or comp.shape[0] != self.mean.coords.size:
            raise DimensionError(
                f"components shape {comp.shape} does not match mean length "
                f"{self.mean.coords.size}"
            )
        scales = _as_float_vector(self.scales, "scales")
        if scales.size != comp.shape[1]:
            raise DimensionError("scales length must equal component count")
        if np.any(scales <= 0):
            raise ValueError("scales must be strictly positive")
        if self.constraint_variant not in CONSTRAINT_VARIANTS:
            raise ValueError(f"unknown constraint variant {self.constraint_variant!r}")
        object.__setattr__(self, "components", comp)
        object.__setattr__(self, "scales", scales)

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    def orthonormalized(self) -> "BlendshapeBasis":
        """QR-orthonormalized copy (components orthonormal, scales 1)."""
        q, _ = np.linalg.qr(self.components)
        return replace(self, components=q, scales=np.ones(q.shape[1]))


def _objective(D: np.ndarray, B: np.ndarray, C: np.ndarray, weight: float) -> float:
    resid = D - B @ C
    return float(np.sum(resid * resid) + weight * np.sum(np.linalg.norm(C, axis=1)))


def _project_box(col: np.ndarray, variant: str) -> np.ndarray:
    if variant == NONNEG_MAX_ONE:
        return np.clip(col, 0.0, 1.0)
    return np.clip(col, -1.0, 1.0)


def _leading_direction(resid: np.ndarray, variant: str) -> np.ndarray:
    """Residual's leading left singular vector, projected to the constraint."""
    u, s, _ = np.linalg.svd(resid, full_matrices=False)
    lead = u[:, 0]
    if variant == NONNEG_MAX_ONE:
        # keep the half with the larger mass, then clamp
        if np.sum(np.maximum(-lead, 0.0)) > np.sum(np.maximum(lead, 0.0)):
            lead = -lead
        lead = np.maximum(lead, 0.0)
    peak = np.max(np.abs(lead))
    if peak < 1e-12:
        lead = np.zeros_like(lead)
        lead[0] = 1.0
        peak = 1.0
    return lead / peak


def build_sparse_basis(
    D: DifferenceMatrix,
    h: int,
    sparsity_weight: float = 0.0,
    variant: str = ABS_MAX_ONE,
    max_iters: int = 500,
    tol: float = 1e-8,
    basis_kind: str = "expression",
) -> tuple[BlendshapeBasis, np.ndarray, list[float]]:
    """Factor a difference matrix into a constrained sparse basis.

    Returns ``(basis, coefficients, objective_trace)`` where coefficients
    is h x m and the trace holds the objective after every alternating
    sweep (nonincreasing).
    """
    data = D.columns
    m = D.n_samples
    if not 1 <= h <= m:
        raise DimensionError(f"component count h={h} must satisfy 1 <= h <= m={m}")
    if sparsity_weight < 0:
        raise ValueError("sparsity_weight must be nonnegative")
    if variant not in CONSTRAINT_VARIANTS:
        raise ValueError(f"unknown constraint variant {variant!r}")
    mean = MeshVector(np.zeros(data.shape[0]))

    if np.max(np.abs(data)) == 0.0:
        basis = BlendshapeBasis(
            mean=mean,
            components=np.zeros((data.shape[0], h)),
            scales=np.ones(h),
            constraint_variant=variant,
            basis_kind=basis_kind,
            degenerate=True,
        )
        return basis, np.zeros((h, m)), [0.0]

    # SVD warm start; left singular vectors already satisfy |entries| <= 1
    u, _, _ = np.linalg.svd(data, full_matrices=False)
    B = np.empty((data.shape[0], h))
    for k in range(h):
        if k < u.shape[1]:
            col = u[:, k]
        else:  # h beyond the data rank budget: unit-vector filler
            col = np.zeros(data.shape[0])
            col[k % data.shape[0]] = 1.0
        B[:, k] = _project_box(col, variant)
        if np.max(np.abs(B[:, k])) < 1e-12:
            B[:, k] = _project_box(-col, variant)
    C = np.zeros((h, m))

    trace = [_objective(data, B, C, sparsity_weight)]
    for _ in range(max_iters):
        # coefficient rows: per-row least squares + group shrinkage (exact)
        for k in range(h):
            resid_k = data - B @ C + np.outer(B[:, k], C[k])
            g = B[:, k] @ resid_k
            a = float(B[:, k] @ B[:, k])
            gnorm = float(np.linalg.norm(g))
            if a < 1e-14 or gnorm < 1e-300:
                C[k] = 0.0
                continue
            t = max(0.0, (2.0 * gnorm - sparsity_weight) / (2.0 * a))
            C[k] = (t / gnorm) * g
        # component columns: box-clipped least squares (exact in the box hull)
        for k in range(h):
            cnorm2 = float(C[k] @ C[k])
            if cnorm2 < 1e-14:
                continue
            resid_k = data - B @ C + np.outer(B[:, k], C[k])
            B[:, k] = _project_box(resid_k @ C[k] / cnorm2, variant)
        trace.append(_objective(data, B, C, sparsity_weight))
        prev, cur = trace[-2], trace[-1]
        if prev - cur < tol * max(prev, 1e-300):
            break

    # revive dead components from the residual, then exact max = 1 rescale
    resid = data - B @ C
    for k in range(h):
        if np.max(np.abs(B[:, k])) < 1e-12 or np.linalg.norm(C[k]) < 1e-12:
            B[:, k] = _leading_direction(resid, variant)
            C[k] = 0.0
    peaks = np.max(np.abs(B), axis=0)
    B = B / peaks
    C = C * peaks[:, None]

    scales = np.linalg.norm(C, axis=1) / np.sqrt(m)
    scales[scales < 1e-12] = 1.0
    basis = BlendshapeBasis(
        mean=mean,
        components=B,
        scales=scales,
        constraint_variant=variant,
        basis_kind=basis_kind,
    )
    return basis, C, trace


def instantiate_shape(basis: BlendshapeBasis, p: ParameterVector) -> MeshVector:
    """mean + components @ (p * scales); exact linear map, no clamping."""
    if len(p) != basis.n_components:
        raise DimensionError(
            f"parameter length {len(p)} != component count {basis.n_components}"
        )
    return MeshVector(basis.mean.coords + basis.components @ (p.values * basis.scales))


def project_parameters(basis: BlendshapeBasis, shape: MeshVector) -> ParameterVector:
    """components^T (S - mean), divided by scales to normalized form."""
    if shape.coords.size != basis.mean.coords.size:
        raise DimensionError(
            f"shape length {shape.coords.size} != basis dimension {basis.mean.coords.size}"
        )
    raw = basis.components.T @ (shape.coords - basis.mean.coords)
    return ParameterVector(raw / basis.scales, basis_kind=basis.basis_kind)


def interpolate_parameters(
    p_src: ParameterVector, p_trg: ParameterVector, a: float
) -> ParameterVector:
    """a * p_src + (1 - a) * p_trg; a = 1 yields the source."""
    if p_src.basis_kind != p_trg.basis_kind:
        raise ValueError(
            f"basis kinds differ: {p_src.basis_kind!r} vs {p_trg.basis_kind!r}"
        )
    if len(p_src) != len(p_trg):
        raise DimensionError("parameter vectors have different lengths")
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"interpolation factor {a} outside [0, 1]")
    return ParameterVector(
        a * p_src.values + (1.0 - a) * p_trg.values, basis_kind=p_src.basis_kind
    )


def clamp_normalized(p: ParameterVector) -> ParameterVector:
    """Elementwise clamp to [-1, 1]."""
    return ParameterVector(np.clip(p.values, -1.0, 1.0), basis_kind=p.basis_kind)


# ---------------------------------------------------------------------------
# Basis file format
#
#   bytes 0..7    magic "BLNDBAS1"
#   bytes 8..11   uint32 LE header length L
#   bytes 12..12+L  UTF-8 JSON {"version":1,"n":n,"h":h,"basis_kind":...,
#                   "constraint_variant":...} (sorted keys, no whitespace)
#   then little-endian float64 arrays, back to back:
#     mean        3n values
#     components  3n*h values, column-major
#     scales      h values
# ---------------------------------------------------------------------------

BASIS_FORMAT_VERSION = 1


def write_basis(basis: BlendshapeBasis, path) -> None:
    header = json.dumps(
        {
            "version": BASIS_FORMAT_VERSION,
            "n": basis.mean.n_points,
            "h": basis.n_components,
            "basis_kind": basis.basis_kind,
            "constraint_variant": basis.constraint_variant,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_BASIS_MAGIC)
    buf.write(len(header).to_bytes(4, "little"))
    buf.write(header)
    buf.write(basis.mean.coords.astype("<f8").tobytes())
    buf.write(np.asfortranarray(basis.components).astype("<f8").tobytes(order="F"))
    buf.write(basis.scales.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_basis(path) -> BlendshapeBasis:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _BASIS_MAGIC:
        raise ValueError(f"{path}: not a basis file (bad magic)")
    hlen = int.from_bytes(blob[8:12], "little")
    meta = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    if meta.get("version") != BASIS_FORMAT_VERSION:
        raise ValueError(f"unsupported basis version {meta.get('version')}")
    n, h = meta["n"], meta["h"]
    off = 12 + hlen
    dim = 3 * n

    def take(count):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
        off += count * 8
        return arr

    mean = take(dim)
    comps = take(dim * h).reshape((dim, h), order="F")
    scales = take(h)
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in basis file")
    return BlendshapeBasis(
        mean=MeshVector(mean),
        components=comps,
        scales=scales,
        constraint_variant=meta["constraint_variant"],
        basis_kind=meta["basis_kind"],
    )
