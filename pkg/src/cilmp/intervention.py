"""Low-rank subspace edits of frozen concept sequences.

An intervention rewrites a representation only inside the row space of a
learned projection ``basis``: the edit is basis^T (W u + b - basis h), where
u is either the representation itself (unconditional) or a relationship
descriptor that couples it to the image embedding (conditional). Bilateral
application targets the first ``l_prefix`` and last ``l_suffix`` positions
of a sequence with independent parameter sets; every other row passes
through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateInputError, DimensionError

Mode = str  # "conditional" | "unconditional" | "identity"
_MODES = ("conditional", "unconditional", "identity")


@dataclass
class InterventionParams:
    """Learnable edit for one position set (prefix or suffix).

    ``basis`` spans the edited subspace (rank x width); ``weight`` maps the
    conditioning input (the representation itself, or its relationship
    descriptor of twice the width) into that subspace.
    """

    basis: Tensor
    weight: Tensor
    bias: Tensor
    conditional: bool

    def __post_init__(self):
        r, d = self.basis.shape
        expect_in = 2 * d if self.conditional else d
        if r < 1:
            raise ConfigError("intervention rank must be at least 1")
        if self.weight.shape != (r, expect_in):
            raise DimensionError(f"weight shape {self.weight.shape}, expected ({r}, {expect_in})")
        if self.bias.shape != (r,):
            raise DimensionError(f"bias shape {self.bias.shape}, expected ({r},)")

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    @property
    def width(self) -> int:
        return self.basis.shape[1]


@dataclass
class ZProjection:
    """Low-rank factors mapping the image embedding into concept width."""

    up: Tensor  # (width, rank)
    down: Tensor  # (rank, embed_dim)

    def __post_init__(self):
        if self.up.ndim != 2 or self.down.ndim != 2 or self.up.shape[1] != self.down.shape[0]:
            raise DimensionError(f"projection factors {self.up.shape} and {self.down.shape} do not chain")

    def apply(self, z: Tensor) -> Tensor:
        """(width,) image-conditioned vector from a unit embedding."""
        return ad.matvec(self.up, ad.matvec(self.down, z))


@dataclass(frozen=True)
class PositionSets:
    """Bilateral target positions: the first and last rows of a sequence.

    In 1-indexed terms the prefix covers positions 1..l_prefix and the
    suffix the final l_suffix positions.
    """

    l_prefix: int
    l_suffix: int

    def __post_init__(self):
        if self.l_prefix < 0 or self.l_suffix < 0:
            raise ConfigError(f"negative intervention lengths ({self.l_prefix}, {self.l_suffix})")

    def validate_for(self, seq_len: int) -> None:
        if self.l_prefix + self.l_suffix > seq_len:
            raise ConfigError(
                f"prefix {self.l_prefix} + suffix {self.l_suffix} overlap in a sequence of {seq_len}"
            )


def init_intervention_params(rng: np.random.Generator, rank: int, width: int, conditional: bool) -> InterventionParams:
    in_dim = 2 * width if conditional else width
    return InterventionParams(
        basis=Tensor(rng.normal(size=(rank, width)) * 0.02, requires_grad=True),
        weight=Tensor(rng.normal(size=(rank, in_dim)) * 0.02, requires_grad=True),
        bias=Tensor(np.zeros(rank), requires_grad=True),
        conditional=conditional,
    )


def init_z_projection(rng: np.random.Generator, width: int, rank: int, embed_dim: int) -> ZProjection:
    # scaled so the projected embedding has O(1) norm at initialization,
    # keeping the matching channel alive from the first step
    return ZProjection(
        up=Tensor(rng.normal(size=(width, rank)) / np.sqrt(rank), requires_grad=True),
        down=Tensor(rng.normal(size=(rank, embed_dim)) / np.sqrt(embed_dim), requires_grad=True),
    )


def _check_unit(z: Tensor) -> None:
    if z.ndim != 1:
        raise DimensionError(f"image embedding must be a vector, got {z.shape}")
    if abs(float(np.linalg.norm(z.data)) - 1.0) > 1e-6:
        raise DegenerateInputError("image embedding must be unit norm")


def relationship_descriptor(h: Tensor, z: Tensor, proj: ZProjection) -> Tensor:
    """concat[h, h ⊙ projected(z)]: the image-concept matching prior."""
    _check_unit(z)
    if h.ndim != 1 or h.shape[0] != proj.up.shape[0]:
        raise DimensionError(f"concept vector {h.shape} vs projection width {proj.up.shape[0]}")
    zmap = proj.apply(z)
    return ad.concat([h, ad.mul(h, zmap)], axis=0)


def _edit_block(block: Tensor, cond_input: Tensor, params: InterventionParams) -> Tensor:
    """block + (cond_input W^T + b - block basis^T) basis, row-wise."""
    projected = ad.add_rowvec(ad.matmul(cond_input, ad.transpose(params.weight)), params.bias)
    current = ad.matmul(block, ad.transpose(params.basis))
    return ad.add(block, ad.matmul(ad.sub(projected, current), params.basis))


def _conditional_input(block: Tensor, zmap: Tensor, matching_prior: bool) -> Tensor:
    if matching_prior:
        return ad.concat([block, ad.mul_rowvec(block, zmap)], axis=1)
    ones = Tensor(np.ones((block.shape[0], 1)))
    tiled = ad.matmul(ones, ad.reshape(zmap, (1, zmap.shape[0])))
    return ad.concat([block, tiled], axis=1)


def intervene_unconditional(h: Tensor, params: InterventionParams) -> Tensor:
    """Edit one vector inside the basis row space, conditioned on itself."""
    if params.conditional:
        raise ConfigError("unconditional intervention with conditional parameters")
    if h.ndim != 1 or h.shape[0] != params.width:
        raise DimensionError(f"vector {h.shape} vs intervention width {params.width}")
    block = ad.reshape(h, (1, params.width))
    return ad.reshape(_edit_block(block, block, params), (params.width,))


def intervene_conditional(
    h: Tensor, z: Tensor, params: InterventionParams, proj: ZProjection, matching_prior: bool = True
) -> Tensor:
    """Edit one vector inside the basis row space, conditioned on the image."""
    if not params.conditional:
        raise ConfigError("conditional intervention with unconditional parameters")
    if h.ndim != 1 or h.shape[0] != params.width:
        raise DimensionError(f"vector {h.shape} vs intervention width {params.width}")
    _check_unit(z)
    block = ad.reshape(h, (1, params.width))
    cond = _conditional_input(block, proj.apply(z), matching_prior)
    return ad.reshape(_edit_block(block, cond, params), (params.width,))


def apply_bilateral(
    h_seq: Tensor,
    z: Tensor | None,
    prefix: InterventionParams | None,
    suffix: InterventionParams | None,
    proj: ZProjection | None,
    pos: PositionSets,
    mode: Mode,
    matching_prior: bool = True,
) -> Tensor:
    """Intervene on the prefix and suffix rows of a concept sequence.

    ``identity`` returns the input unchanged; ``unconditional`` ignores the
    image embedding; ``conditional`` builds per-row descriptors from it
    (without the matching prior the projected embedding is broadcast raw).
    """
    if mode not in _MODES:
        raise ConfigError(f"unknown intervention mode {mode!r}")
    if h_seq.ndim != 2:
        raise DimensionError(f"concept sequence must be 2-D, got {h_seq.shape}")
    n = h_seq.shape[0]
    pos.validate_for(n)
    if mode == "identity" or (pos.l_prefix == 0 and pos.l_suffix == 0):
        return h_seq

    zmap = None
    if mode == "conditional":
        if z is None or proj is None:
            raise ConfigError("conditional intervention needs an image embedding and a projection")
        _check_unit(z)
        zmap = proj.apply(z)

    def edit(block: Tensor, params: InterventionParams) -> Tensor:
        if mode == "unconditional":
            if params.conditional:
                raise ConfigError("unconditional mode with conditional parameters")
            return _edit_block(block, block, params)
        if not params.conditional:
            raise ConfigError("conditional mode with unconditional parameters")
        return _edit_block(block, _conditional_input(block, zmap, matching_prior), params)

    parts = []
    if pos.l_prefix > 0:
        if prefix is None:
            raise ConfigError("prefix length set but no prefix parameters")
        parts.append(edit(h_seq[: pos.l_prefix], prefix))
    middle_hi = n - pos.l_suffix
    if middle_hi > pos.l_prefix:
        parts.append(h_seq[pos.l_prefix : middle_hi])
    if pos.l_suffix > 0:
        if suffix is None:
            raise ConfigError("suffix length set but no suffix parameters")
        parts.append(edit(h_seq[middle_hi:], suffix))
    return ad.concat(parts, axis=0)


@dataclass(frozen=True)
class SubspaceResidual:
    value: float
    rank_deficient: bool


def subspace_residual(h: Tensor | np.ndarray, h_bar: Tensor | np.ndarray, basis: Tensor | np.ndarray) -> SubspaceResidual:
    """Norm of the edit component outside the basis row space.

    The basis rows are orthonormalized by thin QR before projecting; a
    rank-deficient basis is flagged rather than rejected.
    """
    h = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    h_bar = h_bar.data if isinstance(h_bar, Tensor) else np.asarray(h_bar, dtype=np.float64)
    b = basis.data if isinstance(basis, Tensor) else np.asarray(basis, dtype=np.float64)
    delta = (h_bar - h).reshape(-1)
    q, r = np.linalg.qr(b.T)
    diag = np.abs(np.diag(r))
    rank_deficient = bool(np.any(diag < max(b.shape) * np.finfo(np.float64).eps * max(diag.max(), 1.0)))
    projected = q @ (q.T @ delta)
    return SubspaceResidual(value=float(np.linalg.norm(delta - projected)), rank_deficient=rank_deficient)


def orthonormalize_rows(basis: np.ndarray) -> np.ndarray:
    """Nearest row-orthonormal frame spanning the same row space (thin QR)."""
    q, _ = np.linalg.qr(np.asarray(basis, dtype=np.float64).T)
    return q.T.copy()
