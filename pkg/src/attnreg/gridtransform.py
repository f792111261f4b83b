"""Spatial transforms of a patch grid and their action on attention matrices.

A mini ViT flattens an h x w patch grid into n = h*w tokens in row-major
order, plus a class token at index 0. A flip or right-angle rotation of
the image permutes the patches, so it conjugates the (n+1) x (n+1)
attention matrix by a token permutation. This module knows that
permutation in two independent ways:

* the fast path: build the permutation directly from the pixel
  coordinate maps and re-index rows/columns (a differentiable gather);
* the oracle: materialize the same conjugation from dense Kronecker
  products of flip matrices and a commutation matrix, in the
  column-major vec convention, and convert token order on both sides.

The two must agree to float precision; the test-suite and the
``check-inversion`` CLI command hold them against each other.

Conventions: grid coordinates are (row i, column j) with i in [0, h) and
j in [0, w); Rot90 is counter-clockwise, (i, j) -> (w-1-j, i), so
Rot180 == FlipHV and Rot270 == Rot90 applied three times. vec() stacks
columns (column-major), and row-major flattening of X equals
vec(X^T), which is why the order-conversion permutation below is itself
a commutation matrix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, ResourceError


@dataclass(frozen=True, order=True)
class GridShape:
    """Patch-grid extent: h rows by w columns."""

    h: int
    w: int

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ContractError(f"grid dimensions must be positive, got {self.h}x{self.w}")

    @property
    def n(self) -> int:
        return self.h * self.w

    @classmethod
    def parse(cls, text: str) -> "GridShape":
        try:
            h, w = text.lower().split("x")
            return cls(int(h), int(w))
        except (ValueError, TypeError):
            raise ContractError(f"cannot parse grid shape {text!r}; expected e.g. '8x8'") from None

    def __str__(self) -> str:
        return f"{self.h}x{self.w}"


class TransformKind(enum.Enum):
    IDENTITY = "identity"
    FLIP_H = "fliph"
    FLIP_V = "flipv"
    FLIP_HV = "fliphv"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    RESIZE = "resize"


# kinds realized by a token permutation (everything except RESIZE)
PERMUTATION_KINDS = tuple(k for k in TransformKind if k is not TransformKind.RESIZE)
_ROTATING = (TransformKind.ROT90, TransformKind.ROT270)


@dataclass(frozen=True)
class SpatialTransform:
    """A grid-level spatial transform; RESIZE carries its target grid."""

    kind: TransformKind
    resize_target: GridShape | None = None

    def __post_init__(self):
        if self.kind is TransformKind.RESIZE:
            if self.resize_target is None:
                raise ContractError("resize transform needs a resize_target grid")
        elif self.resize_target is not None:
            raise ContractError(f"{self.kind.value} does not take a resize_target")

    def target_grid(self, grid: GridShape) -> GridShape:
        """Grid shape of the transformed view."""
        if self.kind is TransformKind.RESIZE:
            return self.resize_target
        if self.kind in _ROTATING:
            return GridShape(grid.w, grid.h)
        return grid

    def inverse(self) -> "SpatialTransform":
        """The transform that undoes this one. Flips and 180-degree
        rotation are involutions; rot90/rot270 swap. A resize has no
        exact inverse (interpolation loses information), so it is
        rejected rather than silently approximated."""
        if self.kind is TransformKind.RESIZE:
            raise ContractError("resize has no exact inverse transform")
        if self.kind is TransformKind.ROT90:
            return ROT270
        if self.kind is TransformKind.ROT270:
            return ROT90
        return self

    @classmethod
    def parse(cls, text: str) -> "SpatialTransform":
        text = text.strip().lower()
        if text.startswith("resize:"):
            return cls(TransformKind.RESIZE, GridShape.parse(text.split(":", 1)[1]))
        for kind in TransformKind:
            if kind.value == text and kind is not TransformKind.RESIZE:
                return cls(kind)
        raise ContractError(f"unknown transform {text!r}")

    def __str__(self) -> str:
        if self.kind is TransformKind.RESIZE:
            return f"resize:{self.resize_target}"
        return self.kind.value


IDENTITY = SpatialTransform(TransformKind.IDENTITY)
FLIP_H = SpatialTransform(TransformKind.FLIP_H)
FLIP_V = SpatialTransform(TransformKind.FLIP_V)
FLIP_HV = SpatialTransform(TransformKind.FLIP_HV)
ROT90 = SpatialTransform(TransformKind.ROT90)
ROT180 = SpatialTransform(TransformKind.ROT180)
ROT270 = SpatialTransform(TransformKind.ROT270)

# source coordinate (i, j) on an (h, w) grid -> target coordinate
_COORD_MAPS = {
    TransformKind.IDENTITY: lambda i, j, h, w: (i, j),
    TransformKind.FLIP_H: lambda i, j, h, w: (i, w - 1 - j),
    TransformKind.FLIP_V: lambda i, j, h, w: (h - 1 - i, j),
    TransformKind.FLIP_HV: lambda i, j, h, w: (h - 1 - i, w - 1 - j),
    TransformKind.ROT180: lambda i, j, h, w: (h - 1 - i, w - 1 - j),
    TransformKind.ROT90: lambda i, j, h, w: (w - 1 - j, i),
    TransformKind.ROT270: lambda i, j, h, w: (j, h - 1 - i),
}


@dataclass(frozen=True)
class TokenPermutation:
    """sigma[target_token] = source_token, row-major token order.

    Gather semantics: a field F on the source grid transforms to
    F'[t] = F[sigma[t]] on the target grid.
    """

    sigma: np.ndarray
    source: GridShape
    target: GridShape

    def __post_init__(self):
        sig = np.asarray(self.sigma, dtype=np.intp)
        object.__setattr__(self, "sigma", sig)
        n = self.source.n
        if self.target.n != n or sig.shape != (n,):
            raise DimensionError("permutation length must match both grids")
        if not np.array_equal(np.sort(sig), np.arange(n)):
            raise ContractError("sigma is not a permutation of token indices")

    def inverse(self) -> "TokenPermutation":
        inv = np.empty_like(self.sigma)
        inv[self.sigma] = np.arange(self.sigma.size)
        return TokenPermutation(inv, self.target, self.source)

    def compose(self, then: "TokenPermutation") -> "TokenPermutation":
        """Permutation of `self` followed by `then`."""
        if self.target != then.source:
            raise DimensionError(f"cannot compose: {self.target} feeds into {then.source}")
        return TokenPermutation(self.sigma[then.sigma], self.source, then.target)

    def is_identity(self) -> bool:
        return self.source == self.target and np.array_equal(self.sigma, np.arange(self.sigma.size))


def token_permutation(transform: SpatialTransform, grid: GridShape) -> TokenPermutation:
    """Patch-level permutation realizing `transform` on `grid`."""
    if transform.kind is TransformKind.RESIZE:
        raise ContractError("resize is not a token permutation; use resize_attention")
    h, w = grid.h, grid.w
    coord = _COORD_MAPS[transform.kind]
    target = transform.target_grid(grid)
    sigma = np.empty(grid.n, dtype=np.intp)
    for i in range(h):
        for j in range(w):
            ti, tj = coord(i, j, h, w)
            sigma[ti * target.w + tj] = i * w + j
    return TokenPermutation(sigma, grid, target)


def invert_attention_fast(a_prime, transform: SpatialTransform, grid: GridShape) -> Tensor:
    """Map an augmented view's attention matrix back into the source view's
    token order by pure re-indexing (differentiable; class row/column are
    re-indexed along their patch axis only, the (0,0) entry is untouched).

    `a_prime` is the (n+1) x (n+1) attention of the transformed view,
    `grid` the source grid."""
    if transform.kind is TransformKind.RESIZE:
        raise ContractError("resize inversions go through resize_attention")
    a_prime = a_prime if isinstance(a_prime, Tensor) else Tensor(a_prime)
    n = grid.n
    if a_prime.shape != (n + 1, n + 1):
        raise DimensionError(f"attention must be {(n + 1, n + 1)} for grid {grid}, got {a_prime.shape}")
    perm = token_permutation(transform, grid)
    inv = perm.inverse().sigma  # inv[source_token] = target_token
    idx = np.concatenate(([0], inv + 1))
    return ad.permute_rc(a_prime, idx, idx)


# ---------------------------------------------------------------------------
# dense oracle


def vec(x: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.asarray(x).ravel(order="F")


def commutation_matrix(rows: int, cols: int) -> np.ndarray:
    """K with K @ vec(H) = vec(H^T) for H of shape (rows, cols).

    K is a permutation matrix, orthogonal, and K(rows, cols).T equals
    K(cols, rows); for the square case K is an involution."""
    if rows < 1 or cols < 1:
        raise ContractError("commutation matrix needs positive dimensions")
    n = rows * cols
    # vec(H)[i + j*rows] = H[i, j]; vec(H^T)[j + i*cols] = H[i, j]
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    k = np.zeros((n, n))
    k[jj + ii * cols, ii + jj * rows] = 1.0
    return k


def _exchange(k: int) -> np.ndarray:
    j = np.zeros((k, k))
    j[np.arange(k), k - 1 - np.arange(k)] = 1.0
    return j


def _oracle_factors(transform: SpatialTransform, grid: GridShape):
    """(P_h, P_w, C) with the forward action on the column-major-vec'd
    patch field q: vec(q') = (P_w^T kron P_h) C vec(q).

    Flip family: q' = P_h q P_w with P_h (h x h), P_w (w x w), C = I.
    Rotations: q' = P_h q^T P_w with P_h (w x w), P_w (h x h), and C the
    commutation matrix of the source grid (vec of the transpose)."""
    h, w = grid.h, grid.w
    kind = transform.kind
    eye_h, eye_w = np.eye(h), np.eye(w)
    ex_h, ex_w = _exchange(h), _exchange(w)
    if kind is TransformKind.IDENTITY:
        return eye_h, eye_w, np.eye(grid.n)
    if kind is TransformKind.FLIP_H:
        return eye_h, ex_w, np.eye(grid.n)
    if kind is TransformKind.FLIP_V:
        return ex_h, eye_w, np.eye(grid.n)
    if kind in (TransformKind.FLIP_HV, TransformKind.ROT180):
        return ex_h, ex_w, np.eye(grid.n)
    comm = commutation_matrix(h, w)
    if kind is TransformKind.ROT90:
        return ex_w, eye_h, comm  # flipud of the transpose
    if kind is TransformKind.ROT270:
        return eye_w, ex_h, comm  # fliplr of the transpose
    raise ContractError(f"{kind.value} has no permutation oracle")


def invert_attention_kronecker(a_prime_patch, transform: SpatialTransform, grid: GridShape,
                               cap: int = 1024) -> np.ndarray:
    """Brute-force inversion of the patch-to-patch attention block via
    dense Kronecker algebra: conjugate by C^T (P_w kron P_h^T) in the
    column-major vec convention, converting row-major token order in and
    out with the grid's commutation matrix. Intended as an oracle for
    invert_attention_fast; refuses grids beyond `cap` tokens."""
    if transform.kind is TransformKind.RESIZE:
        raise ContractError("resize inversions go through resize_attention")
    n = grid.n
    if n > cap:
        raise ResourceError(f"oracle capped at {cap} tokens, grid {grid} has {n}")
    a = np.asarray(a_prime_patch.data if isinstance(a_prime_patch, Tensor) else a_prime_patch,
                   dtype=np.float64)
    if a.shape != (n, n):
        raise DimensionError(f"patch block must be {(n, n)} for grid {grid}, got {a.shape}")
    p_h, p_w, comm = _oracle_factors(transform, grid)
    target = transform.target_grid(grid)
    m = np.kron(p_w, p_h.T)
    to_rm_src = commutation_matrix(grid.h, grid.w)      # column-major -> row-major, source grid
    to_rm_tgt = commutation_matrix(target.h, target.w)  # same, target grid
    a_cm = to_rm_tgt.T @ a @ to_rm_tgt
    inverted = comm.T @ m @ a_cm @ m.T @ comm
    return to_rm_src @ inverted @ to_rm_src.T


# ---------------------------------------------------------------------------
# bilinear resize


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation weights, half-pixel-center convention with
    border clamp. Rows sum to 1; src == dst yields the identity exactly."""
    if src < 1 or dst < 1:
        raise ContractError("bilinear_matrix needs positive sizes")
    out = np.zeros((dst, src))
    scale = src / dst
    for o in range(dst):
        u = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(u))
        t = u - i0
        lo = min(max(i0, 0), src - 1)
        hi = min(max(i0 + 1, 0), src - 1)
        out[o, lo] += 1.0 - t
        out[o, hi] += t
    return out


def grid_interp_matrix(source: GridShape, target: GridShape) -> np.ndarray:
    """(target.n, source.n) bilinear weights over row-major token fields:
    kron of the per-axis matrices."""
    return np.kron(bilinear_matrix(source.h, target.h), bilinear_matrix(source.w, target.w))


def resize_attention(a_prime, source: GridShape, target: GridShape) -> Tensor:
    """Bilinearly resize an attention matrix between patch grids.

    The class-to-patch row and patch-to-class column are interpolated
    over their patch grid; the patch-to-patch block is interpolated
    along both its query and key grids; (0,0) is kept. Each row of the
    result is then rescaled so its sum equals the interpolation of the
    source row sums (the class row keeps its own sum), which makes the
    operation exact for source == target and keeps row-stochastic
    matrices row-stochastic. Differentiable end to end."""
    a_prime = a_prime if isinstance(a_prime, Tensor) else Tensor(a_prime)
    ns, nt = source.n, target.n
    if a_prime.shape != (ns + 1, ns + 1):
        raise DimensionError(f"attention must be {(ns + 1, ns + 1)} for grid {source}, got {a_prime.shape}")
    wq = Tensor(grid_interp_matrix(source, target))  # (nt, ns) constant
    corner = ad.slice2d(a_prime, 0, 1, 0, 1)
    cls_row = ad.matmul(ad.slice2d(a_prime, 0, 1, 1, None), ad.transpose(wq))
    cls_col = ad.matmul(wq, ad.slice2d(a_prime, 1, None, 0, 1))
    block = ad.matmul(ad.matmul(wq, ad.slice2d(a_prime, 1, None, 1, None)), ad.transpose(wq))
    assembled = ad.concat([ad.concat([corner, cls_row], axis=1),
                           ad.concat([cls_col, block], axis=1)], axis=0)
    # sum_rows (not a matmul with ones) so the source sums reduce in the
    # same order as the rescale's own row sums: source == target is then
    # an exact identity
    src_sums = ad.sum_rows(a_prime)  # (ns+1, 1)
    patch_sums = ad.matmul(wq, ad.slice2d(src_sums, 1, None, None, None))
    target_sums = ad.concat([ad.slice2d(src_sums, 0, 1, None, None), patch_sums], axis=0)
    return ad.scale_rows_to_sums(assembled, target_sums)


def invert_attention(a_prime, transform: SpatialTransform, grid: GridShape) -> Tensor:
    """Undo a transform's action on an attention matrix: permutation kinds
    re-index, resize interpolates back to `grid`."""
    if transform.kind is TransformKind.RESIZE:
        return resize_attention(a_prime, transform.resize_target, grid)
    return invert_attention_fast(a_prime, transform, grid)
