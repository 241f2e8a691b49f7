"""Brute-force oracle suites runnable from the command line.

Each suite compares a fast-path implementation against an independent
reference (materialized Kronecker products, LAPACK eigensolves, explicit
prefix scans, finite differences, self-generated law data) and reports the
worst observed error against the suite tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forgetting import fit_baseline_law, fit_xi_coefficients, predict
from .kfac import RankSpaceStats, refresh_inverses
from .linalg import sym_eig, symmetrize
from .model import build_model
from .reprojection import make_projector, select_rank
from .runio import GeometrySummary, RunRecord
from .telemetry import effective_rank, xi_multiplier


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: float
    tolerance: float


def _random_psd(rng: np.random.Generator, dim: int) -> np.ndarray:
    m = rng.normal(size=(dim, dim))
    return m @ m.T / dim


def suite_kron(cases: int = 500, seed: int = 20240) -> list[CheckResult]:
    """Two-sided factor application vs the materialized Kronecker inverse."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        r = int(rng.integers(1, 5))
        stats = RankSpaceStats(rank=r, damping=float(rng.uniform(1e-4, 1e-2)))
        stats.a_cov = _random_psd(rng, r)
        stats.g_cov = _random_psd(rng, r)
        stats.n_cov = 10**6
        refresh_inverses(stats, min_samples=1)
        grad = rng.normal(size=(r, r))
        fast = stats.inv_g @ grad @ stats.inv_a
        explicit = np.kron(stats.inv_g, stats.inv_a) @ grad.ravel()
        worst = max(worst, float(np.max(np.abs(fast.ravel() - explicit))))
    return [CheckResult("factor-wise vs materialized kronecker inverse", worst < 1e-10, worst, 1e-10)]


def suite_eig(cases: int = 200, seed: int = 20241) -> list[CheckResult]:
    """Jacobi eigensolver vs reconstruction and a LAPACK cross-check."""
    rng = np.random.default_rng(seed)
    worst_recon = 0.0
    worst_orth = 0.0
    worst_lapack = 0.0
    for _ in range(cases):
        dim = int(rng.integers(1, 17))
        m = symmetrize(rng.normal(size=(dim, dim)))
        dec = sym_eig(m)
        denom = max(np.linalg.norm(m), 1e-30)
        worst_recon = max(worst_recon, float(np.linalg.norm(dec.reconstruct() - m) / denom))
        gram = dec.eigenvectors.T @ dec.eigenvectors
        worst_orth = max(worst_orth, float(np.max(np.abs(gram - np.eye(dim)))))
        reference = np.sort(np.linalg.eigvalsh(m))[::-1]
        worst_lapack = max(worst_lapack, float(np.max(np.abs(dec.eigenvalues - reference))))
    return [
        CheckResult("reconstruction error (relative frobenius)", worst_recon < 1e-8, worst_recon, 1e-8),
        CheckResult("eigenvector orthonormality", worst_orth < 1e-8, worst_orth, 1e-8),
        CheckResult("eigenvalues vs lapack", worst_lapack < 1e-8, worst_lapack, 1e-8),
    ]


def suite_projector(pairs: int = 200, seed: int = 20242) -> list[CheckResult]:
    """Idempotence, non-expansiveness, and the top-k spectral trace inequality."""
    rng = np.random.default_rng(seed)
    worst_idem = 0.0
    worst_expand = 0.0
    violations = 0
    for _ in range(pairs):
        dim = int(rng.integers(2, 9))
        sigma = _random_psd(rng, dim)
        h = _random_psd(rng, dim)
        k = int(rng.integers(1, dim + 1))
        proj = make_projector(sym_eig(sigma), k)
        p = proj.matrix()
        worst_idem = max(worst_idem, float(np.linalg.norm(p @ p - p)))
        v = rng.normal(size=dim)
        worst_expand = max(
            worst_expand, float(np.linalg.norm(p @ v) - np.linalg.norm(v))
        )
        before = float(np.trace(h @ sigma))
        after = float(np.trace(h @ p @ sigma @ p))
        if after > before + 1e-10 * max(1.0, abs(before)):
            violations += 1
    return [
        CheckResult("idempotence ||P^2 - P||_F", worst_idem < 1e-9, worst_idem, 1e-9),
        CheckResult("non-expansiveness ||Pv|| - ||v||", worst_expand <= 1e-12, worst_expand, 1e-12),
        CheckResult("trace inequality violations", violations == 0, float(violations), 0.0),
    ]


def suite_gradcheck(models: int = 100, seed: int = 20243) -> list[CheckResult]:
    """Analytic adapter gradients vs central finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(models):
        n_layers = int(rng.integers(1, 4))
        dims = [int(rng.integers(2, 17)) for _ in range(n_layers + 1)]
        rank = int(rng.integers(1, min(dims) + 1))
        acts = [str(rng.choice(["tanh", "identity"])) for _ in range(n_layers)]
        model = build_model(dims, rank=rank, scaling=1.0, rng=rng, activations=acts)
        for _, adapter in model.layers:
            adapter.b = rng.normal(0.0, 0.3, size=adapter.b.shape)
        x = rng.normal(size=(4, dims[0]))
        target = rng.normal(size=(4, dims[-1]))

        def loss_of_model() -> float:
            pred = model.forward(x)
            return float(0.5 * np.sum((pred - target) ** 2))

        pred = model.forward(x)
        model.backward(pred - target)
        analytic = [
            (tape.grad_a.copy(), tape.grad_b.copy()) for tape in model.tapes
        ]
        gmax = max(
            max(np.max(np.abs(ga)), np.max(np.abs(gb))) for ga, gb in analytic
        )
        # balanced central-difference step; near-zero entries are compared with
        # a floor tied to the model's gradient scale
        step = 1e-5
        floor = 1e-3 * (1.0 + gmax)
        for layer_idx, (_, adapter) in enumerate(model.layers):
            grad_a, grad_b = analytic[layer_idx]
            for mat, grad in ((adapter.a, grad_a), (adapter.b, grad_b)):
                it = np.nditer(mat, flags=["multi_index"])
                while not it.finished:
                    idx = it.multi_index
                    orig = mat[idx]
                    mat[idx] = orig + step
                    up = loss_of_model()
                    mat[idx] = orig - step
                    down = loss_of_model()
                    mat[idx] = orig
                    fd = (up - down) / (2.0 * step)
                    denom = max(abs(fd), abs(grad[idx]), floor)
                    worst = max(worst, abs(fd - grad[idx]) / denom)
                    it.iternext()
    return [CheckResult("max relative gradient error vs central differences", worst < 1e-6, worst, 1e-6)]


def suite_rankselect(spectra: int = 1000, seed: int = 20244) -> list[CheckResult]:
    """select_rank / effective_rank vs an explicit prefix scan."""
    rng = np.random.default_rng(seed)
    thresholds = (0.5, 0.9, 0.95, 0.99)
    mismatches = 0
    for _ in range(spectra):
        r = int(rng.integers(1, 17))
        eigs = np.sort(rng.uniform(0.0, 1.0, size=r))[::-1]
        total = float(np.sum(eigs))
        for tau in thresholds:
            prefix = 0.0
            brute = r
            for j in range(r):
                prefix += eigs[j]
                if prefix >= tau * total:
                    brute = j + 1
                    break
            k, _ = select_rank(eigs, tau, min_rank=1)
            if k != brute:
                mismatches += 1
            r_eff, _ = effective_rank(eigs, tau)
            if r_eff != brute:
                mismatches += 1
    return [CheckResult("prefix-scan agreement (exact)", mismatches == 0, float(mismatches), 0.0)]


def _synthetic_law_records(
    rng: np.random.Generator,
    c0: float,
    a_coef: float,
    alpha: float,
    beta: float,
    gammas: tuple[float, float, float],
    noise: float = 0.0,
) -> tuple[list[RunRecord], list[RunRecord]]:
    """Baseline and geometry-varying record grids evaluated from the law itself."""
    d_grid = np.geomspace(1e3, 1e5, 6)
    n_grid = (1e4, 1e5)
    base_records = []
    grit_records = []
    for n in n_grid:
        for d in d_grid:
            d = int(d)
            loss = c0 + a_coef * d**beta / n**alpha
            if noise > 0.0:
                loss += noise * rng.normal()
            base_records.append(
                RunRecord(
                    d_ft=int(d), n_params=int(n), final_task_loss=0.0,
                    pt_loss_before=c0, pt_loss_after=float(loss),
                    mode="lora_control", seed=0, task="synthetic",
                )
            )
            r_eff = float(rng.integers(1, 9))
            rho = float(rng.uniform(0.0, 1.0))
            pi = float(rng.uniform(0.0, 1.0))
            xi = xi_multiplier(r_eff, rho, pi, gammas)
            loss_g = c0 + a_coef * d**beta / (xi * n) ** alpha
            if noise > 0.0:
                loss_g += noise * rng.normal()
            grit_records.append(
                RunRecord(
                    d_ft=int(d), n_params=int(n), final_task_loss=0.0,
                    pt_loss_before=c0, pt_loss_after=float(loss_g),
                    mode="grit", seed=0, task="synthetic",
                    geometry_summary=GeometrySummary(r_eff=r_eff, rho_align=rho, pi_proj=pi, max_rank=8),
                )
            )
    return base_records, grit_records


def suite_fitlaw(seed: int = 20245) -> list[CheckResult]:
    """Round trip: generate law data, refit, compare constants."""
    rng = np.random.default_rng(seed)
    truth = dict(c0=2.0, a_coef=1.0, alpha=0.3, beta=0.5)
    gammas = (0.1, 0.5, 0.3)
    base, grit = _synthetic_law_records(rng, gammas=gammas, **truth)
    fit = fit_baseline_law(base)
    base_err = max(
        abs(fit.c0 - truth["c0"]) / truth["c0"],
        abs(fit.a_coef - truth["a_coef"]) / truth["a_coef"],
        abs(fit.alpha - truth["alpha"]) / truth["alpha"],
        abs(fit.beta - truth["beta"]) / truth["beta"],
    )
    xi_fit = fit_xi_coefficients(grit, fit)
    gamma_err = max(
        abs(xi_fit.gamma_r - gammas[0]) / gammas[0],
        abs(xi_fit.gamma_a - gammas[1]) / gammas[1],
        abs(xi_fit.gamma_p - gammas[2]) / gammas[2],
    )
    pred_err = 0.0
    for rec in grit:
        s = rec.geometry_summary
        pred = predict(xi_fit, rec.d_ft, rec.n_params, (s.r_eff, s.rho_align, s.pi_proj))
        pred_err = max(pred_err, abs(pred - rec.pt_loss_after))
    return [
        CheckResult("baseline constants relative error", base_err < 1e-4, base_err, 1e-4),
        CheckResult("gamma coefficients relative error", gamma_err < 1e-3, gamma_err, 1e-3),
        CheckResult("round-trip prediction error", pred_err < 1e-5, pred_err, 1e-5),
    ]


SUITES = {
    "kron": suite_kron,
    "eig": suite_eig,
    "projector": suite_projector,
    "gradcheck": suite_gradcheck,
    "rankselect": suite_rankselect,
    "fitlaw": suite_fitlaw,
}


def run_suite(name: str) -> list[CheckResult]:
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name]()
