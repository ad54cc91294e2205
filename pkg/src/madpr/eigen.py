"""Lanczos eigensolver for the largest eigenpairs of a symmetric operator.

Shared by the spectral embedding (on ``D^-1/2 W D^-1/2``) and PCA (on the
covariance matrix).  Only matrix-vector products are required.
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from .errors import ConvergenceError, ValidationError
from .rng import CounterRNG

log = logging.getLogger(__name__)


def _orthogonalize(v: np.ndarray, bases) -> np.ndarray:
    # classical Gram-Schmidt, applied twice
    for _ in range(2):
        for B in bases:
            if B.shape[1]:
                v -= B @ (B.T @ v)
    return v


def lanczos_largest(
    matvec: Callable[[np.ndarray], np.ndarray],
    n: int,
    nev: int,
    tol: float = 1e-6,
    max_iter: int | None = None,
    seed: int = 0,
    krylov_dim: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return the ``nev`` largest eigenvalues (descending) and eigenvectors.

    Lanczos with full reorthogonalization.  Each pass grows a Krylov basis
    from a random start vector orthogonal to everything already locked,
    locks the leading Ritz pairs whose true residual ``||A u - theta u||``
    is below ``tol / 10``, and starts again.  Repeated eigenvalues are picked
    up by later passes (a single Krylov space holds one vector per distinct
    eigenvalue).  The search ends once a fresh pass finds nothing above the
    ``nev``-th locked value, or the locked set spans the whole space.

    ``max_iter`` bounds the total number of Lanczos steps across passes.
    """
    if nev < 1 or nev > n:
        raise ValidationError(f"cannot compute {nev} eigenpairs of a {n}x{n} operator")
    if max_iter is None:
        max_iter = max(1000, 50 * n)
    rng = CounterRNG(seed)
    lock_tol = tol / 10.0
    locked_vecs = np.zeros((n, 0))
    locked_vals = np.zeros(0)
    steps = 0
    best_residual = np.inf
    restart = None
    growth = 1

    while True:
        free = n - locked_vecs.shape[1]
        if free == 0:
            break
        have = locked_vals.size
        need = max(nev - have, 1)
        p = min(free, growth * (krylov_dim or max(2 * need + 20, 40)))

        v = restart if restart is not None else rng.normal(n)
        restart = None
        v = _orthogonalize(v.copy(), [locked_vecs])
        nv = np.linalg.norm(v)
        if nv < 1e-10:
            v = _orthogonalize(rng.normal(n), [locked_vecs])
            nv = np.linalg.norm(v)
        V = np.zeros((n, p))
        V[:, 0] = v / nv
        alpha = np.zeros(p)
        beta = np.zeros(p)
        j = 0
        while True:
            w = matvec(V[:, j])
            steps += 1
            alpha[j] = V[:, j] @ w
            w = w - alpha[j] * V[:, j]
            if j > 0:
                w -= beta[j - 1] * V[:, j - 1]
            w = _orthogonalize(w, [locked_vecs, V[:, : j + 1]])
            b = np.linalg.norm(w)
            beta[j] = b
            j += 1
            if j == p or b <= 1e-12 * max(1.0, abs(alpha[:j]).max()):
                # basis full, or invariant subspace reached (breakdown)
                break
            if steps >= max_iter:
                break
            V[:, j] = w / b

        T = np.diag(alpha[:j]) + np.diag(beta[: j - 1], 1) + np.diag(beta[: j - 1], -1)
        theta, S = np.linalg.eigh(T)
        theta, S = theta[::-1], S[:, ::-1]
        estimates = np.abs(beta[j - 1] * S[-1, :])

        new_vals, new_vecs = [], []
        for t in range(j):
            if estimates[t] > lock_tol:
                break
            u = V[:, :j] @ S[:, t]
            u = _orthogonalize(u, [locked_vecs] + ([np.column_stack(new_vecs)] if new_vecs else []))
            u /= np.linalg.norm(u)
            Au = matvec(u)
            lam = float(u @ Au)
            res = float(np.linalg.norm(Au - lam * u))
            if res > lock_tol:
                best_residual = min(best_residual, res)
                break
            new_vals.append(lam)
            new_vecs.append(u)

        if have >= nev and new_vals:
            threshold = np.sort(locked_vals)[::-1][nev - 1]
            if new_vals[0] <= threshold + lock_tol:
                # the top of the complement is not above the nev-th locked value
                break

        if new_vals:
            locked_vecs = np.column_stack([locked_vecs] + new_vecs)
            locked_vals = np.concatenate([locked_vals, new_vals])
            growth = 1
        else:
            best_residual = min(best_residual, float(estimates[0]))
            # explicit restart from the leading Ritz vectors with a larger basis
            restart = V[:, :j] @ S[:, : min(need, j)].sum(axis=1)
            growth *= 2

        if steps >= max_iter:
            if locked_vals.size >= nev:
                break
            raise ConvergenceError(
                f"Lanczos did not converge within {max_iter} steps "
                f"({locked_vals.size}/{nev} eigenpairs)",
                best_residual,
            )

    order = np.argsort(-locked_vals, kind="stable")[:nev]
    log.debug("lanczos: %d eigenpairs in %d steps", nev, steps)
    return locked_vals[order], locked_vecs[:, order]
