"""Spectral subspace maintenance for adapter factors.

Rank selection keeps the smallest eigenvalue prefix whose cumulative energy
reaches the threshold tau; the corresponding top-k eigenvectors define
idempotent projectors that are applied to the adapter factors (a from the
left, b from the right), optionally blended. Directions outside the retained
subspace are zeroed, not deleted: tensors keep their shape, so suppressed
directions can re-enter later.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .kfac import RankSpaceStats
from .linalg import SpectralDecomp, sym_eig, symmetrize
from .model import AdapterPair


@dataclass
class ReprojectionPolicy:
    """Gates and knobs for the periodic reprojection step."""

    tau: float = 0.99
    min_rank: int = 4
    reproj_freq: int = 50
    warmup_steps: int = 0
    two_sided: bool = False
    blend_gamma: float = 1.0
    g_gate_min_samples: int = 64
    hysteresis_eps: float = 0.0  # 0 disables the band (the default run mode)

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValidationError("tau must lie in (0, 1]")
        if self.min_rank < 1:
            raise ValidationError("min_rank must be positive")
        if not 0.0 <= self.blend_gamma <= 1.0:
            raise ValidationError("blend_gamma must lie in [0, 1]")


@dataclass(frozen=True)
class Projector:
    """Column-orthonormal basis of the retained subspace; P = basis @ basis.T."""

    basis: np.ndarray
    k: int

    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def apply_left(self, mat: np.ndarray) -> np.ndarray:
        return self.basis @ (self.basis.T @ mat)

    def apply_right(self, mat: np.ndarray) -> np.ndarray:
        return (mat @ self.basis) @ self.basis.T


def select_rank(
    eigenvalues: np.ndarray, tau: float, min_rank: int
) -> tuple[int, bool]:
    """Smallest k with cumulative energy >= tau, clamped to [min_rank, r].

    Returns (k, degenerate) where degenerate marks an all-zero spectrum
    (which falls back to min_rank).
    """
    eigs = np.asarray(eigenvalues, dtype=np.float64)
    if eigs.ndim != 1 or eigs.size == 0:
        raise ShapeError("eigenvalues must be a non-empty vector")
    if np.any(np.diff(eigs) > 0.0):
        raise ValidationError("eigenvalues must be sorted non-increasing")
    eigs = np.maximum(eigs, 0.0)  # tolerate tiny negative tails from covariance noise
    r = eigs.size
    total = float(np.sum(eigs))
    if total <= 0.0:
        return min(min_rank, r), True
    cum = np.cumsum(eigs)
    k = int(np.searchsorted(cum, tau * total, side="left")) + 1
    k = max(min(k, r), min(min_rank, r))
    return k, False


def cumulative_energy(eigenvalues: np.ndarray) -> np.ndarray:
    """Prefix energy fractions E(j); ends at 1 for a non-degenerate spectrum."""
    eigs = np.asarray(eigenvalues, dtype=np.float64)
    total = float(np.sum(eigs))
    if total <= 0.0:
        return np.zeros_like(eigs)
    return np.cumsum(eigs) / total


def make_projector(decomp: SpectralDecomp, k: int) -> Projector:
    """Top-k eigenprojector from a spectral decomposition."""
    if not 1 <= k <= decomp.dim:
        raise ValidationError(f"k = {k} out of range [1, {decomp.dim}]")
    return Projector(basis=decomp.eigenvectors[:, :k].copy(), k=k)


def curvature_energy(h: np.ndarray, sigma: np.ndarray) -> float:
    """tr(h @ sigma), the curvature-weighted update energy."""
    h = symmetrize(h)
    sigma = symmetrize(sigma)
    if h.shape != sigma.shape:
        raise ShapeError(f"dimension mismatch: {h.shape} vs {sigma.shape}")
    return float(np.trace(h @ sigma))


@dataclass
class ReprojectionEvent:
    """Outcome of one reprojection attempt (applied or gated)."""

    step: int
    applied: bool
    gate: str | None = None
    k: int = 0
    side_used: str = ""
    tau: float = 0.0
    retained_mass: float = 1.0
    degenerate: bool = False
    delta_w_norm_before: float = 0.0
    delta_w_norm_after: float = 0.0


def reproject(
    adapter: AdapterPair,
    stats: RankSpaceStats,
    policy: ReprojectionPolicy,
    step: int,
    fixed_k: int | None = None,
    prev_k: int | None = None,
) -> ReprojectionEvent:
    """Project adapter factors onto the leading eigenspaces of the covariances.

    a <- (1 - gamma) a + gamma * P_a a and b <- (1 - gamma) b + gamma * b P_side,
    where P_side uses the gradient-side basis when two_sided is on and that
    side has accumulated at least g_gate_min_samples, else the activation-side
    basis. k comes from the activation-side spectrum (or fixed_k when rank
    adaptation is off) and truncates both bases.
    """
    if step < policy.warmup_steps:
        return ReprojectionEvent(step=step, applied=False, gate="warmup")
    if step % policy.reproj_freq != 0:
        return ReprojectionEvent(step=step, applied=False, gate="frequency")
    if stats.n_cov == 0:
        return ReprojectionEvent(step=step, applied=False, gate="no-samples")
    if policy.min_rank > adapter.rank:
        raise ValidationError("policy min_rank exceeds adapter rank")

    decomp_a = sym_eig(stats.a_cov, name="a_cov")
    degenerate = False
    if fixed_k is not None:
        k = max(1, min(fixed_k, adapter.rank))
    else:
        k, degenerate = select_rank(decomp_a.eigenvalues, policy.tau, policy.min_rank)
        if policy.hysteresis_eps > 0.0 and prev_k is not None and not degenerate:
            energy = cumulative_energy(decomp_a.eigenvalues)
            prev_energy = energy[min(prev_k, adapter.rank) - 1]
            if abs(prev_energy - policy.tau) <= policy.hysteresis_eps:
                k = min(prev_k, adapter.rank)

    proj_a = make_projector(decomp_a, k)
    side_used = "a"
    proj_side = proj_a
    if policy.two_sided and stats.n_cov >= policy.g_gate_min_samples:
        decomp_g = sym_eig(stats.g_cov, name="g_cov")
        proj_side = make_projector(decomp_g, k)
        side_used = "g"

    gamma = policy.blend_gamma
    norm_before = float(np.linalg.norm(adapter.scaling * adapter.delta_w()))
    a_proj = proj_a.apply_left(adapter.a)
    b_proj = proj_side.apply_right(adapter.b)
    mass_before = float(np.sum(adapter.a**2) + np.sum(adapter.b**2))
    mass_after = float(np.sum(a_proj**2) + np.sum(b_proj**2))
    retained = mass_after / mass_before if mass_before > 0.0 else 1.0
    adapter.a = (1.0 - gamma) * adapter.a + gamma * a_proj
    adapter.b = (1.0 - gamma) * adapter.b + gamma * b_proj
    norm_after = float(np.linalg.norm(adapter.scaling * adapter.delta_w()))
    return ReprojectionEvent(
        step=step,
        applied=True,
        k=k,
        side_used=side_used,
        tau=policy.tau,
        retained_mass=retained,
        degenerate=degenerate,
        delta_w_norm_before=norm_before,
        delta_w_norm_after=norm_after,
    )
