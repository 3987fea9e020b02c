"""Mixture-weight optimization on a fixed grid and its optimality certificate.

The objective is the mean log-likelihood ``l(w) = (1/n) sum_i log (L w)_i``
over the probability simplex. Its gradient is ``1 + D`` where ``D`` is the
gradient functional evaluated at each grid atom; ``max_j D_j <= 0`` is the
first-order optimality condition and ``log(1 + max_j D_j)`` bounds the
remaining log-likelihood gap.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import nnls

from .exceptions import NonConvergence, ZeroLikelihoodRow
from .kernels import TINY, LogKernelMatrix, kernel_matrix
from .model import LOG_2PI, Dataset

logger = logging.getLogger(__name__)

ALGORITHMS = ("em", "frank_wolfe", "proj_newton")
_ALIASES = {"fw": "frank_wolfe", "newton": "proj_newton", "cnm": "proj_newton"}


@dataclass
class SolverConfig:
    algorithm: str = "proj_newton"
    max_iters: int = 10_000
    dual_gap_tol: float = 1e-6
    rel_loglik_tol: float = 1e-10
    prune_weight_tol: float = 1e-10
    em_warm_start: int = 50
    #: squared-extrapolation acceleration for ``em``
    em_accelerate: bool = True

    def __post_init__(self):
        self.algorithm = _ALIASES.get(self.algorithm, self.algorithm)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be >= 1")
        self.max_iters = int(self.max_iters)
        for name in ("dual_gap_tol", "rel_loglik_tol", "prune_weight_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.em_warm_start < 0:
            raise ValueError("em_warm_start must be >= 0")


@dataclass
class FitCertificate:
    loglik: float
    fitted_L: np.ndarray
    log_fitted_L: np.ndarray
    dual_gap: float
    iters: int
    trace: list = field(default_factory=list)
    converged: bool = False
    algorithm: str = ""

    @property
    def suboptimality_bound(self) -> float:
        return loglik_suboptimality_bound(self)


# ---------------------------------------------------------------- primitives

def _row_sums(Ls, w):
    f = Ls @ w
    bad = np.flatnonzero(~(f > 0))
    if bad.size:
        raise ZeroLikelihoodRow(bad)
    return f


def _gradient(Ls, f):
    return (Ls.T @ (1.0 / f)) / Ls.shape[0]


def em_step(K: LogKernelMatrix, w) -> np.ndarray:
    """One EM update of the mixing proportions."""
    w = np.asarray(w, dtype=float)
    Ls = K.scaled
    g = _gradient(Ls, _row_sums(Ls, w))
    out = w * g
    return out / out.sum()


def dual_values(K: LogKernelMatrix, w) -> np.ndarray:
    """Gradient functional ``D(G_w, a_j)`` at every grid atom."""
    Ls = K.scaled
    return _gradient(Ls, _row_sums(Ls, np.asarray(w, dtype=float))) - 1.0


def dual_density(theta, data: Dataset, fitted_L) -> np.ndarray | float:
    """Dual mixture density: Gaussians at the data weighted by ``1/L_i``.

    ``theta`` may be a single point or an ``(k, p)`` array of points.
    """
    fitted_L = np.asarray(fitted_L, dtype=float)
    th = np.asarray(theta, dtype=float)
    if data.dim == 1:
        single = th.ndim == 0
        pts = th.reshape(-1, 1)
    else:
        single = th.ndim == 1
        pts = np.atleast_2d(th)
    inv = 1.0 / fitted_L
    K = kernel_matrix(data, pts)
    out = (inv / inv.sum()) @ np.exp(K.entries)
    return float(out[0]) if single else out


def loglik_suboptimality_bound(cert: FitCertificate) -> float:
    """``log(1 + dual_gap)``: bounds (grid optimum - achieved) mean log-likelihood."""
    return math.log1p(max(cert.dual_gap, 0.0))


def log_likelihood_floor(data: Dataset, q: float) -> np.ndarray:
    """Log of the per-observation likelihood floor of a ``q``-approximate NPMLE."""
    n, p = data.n, data.dim
    return -n * q - math.log(n) - 1.0 - 0.5 * (p * LOG_2PI + data.logdets)


def certify(K: LogKernelMatrix, w, *, iters=0, trace=None, converged=None, tol=None, algorithm="") -> FitCertificate:
    """Certificate (fitted likelihoods, mean log-likelihood, dual gap) for ``w``."""
    w = np.asarray(w, dtype=float)
    Ls = K.scaled
    f = _row_sums(Ls, w)
    D = _gradient(Ls, f) - 1.0
    logL = np.log(f) + K.row_max
    gap = float(D.max())
    if converged is None:
        converged = tol is not None and gap <= tol
    return FitCertificate(
        loglik=float(logL.mean()),
        fitted_L=np.exp(logL),
        log_fitted_L=logL,
        dual_gap=gap,
        iters=int(iters),
        trace=list(trace or []),
        converged=bool(converged),
        algorithm=algorithm,
    )


# ---------------------------------------------------------------- algorithms

class _Run:
    """Shared iteration bookkeeping: trace, callback, stopping."""

    def __init__(self, K, config, callback):
        self.K = K
        self.Ls = K.scaled
        self.offset = float(K.row_max.mean())
        self.config = config
        self.callback = callback
        self.trace: list[float] = []
        self.iters = 0

    def evaluate(self, w):
        f = _row_sums(self.Ls, w)
        g = _gradient(self.Ls, f)
        D = g - 1.0
        ll = float(np.mean(np.log(f))) + self.offset
        self.trace.append(ll)
        if self.callback is not None:
            self.callback(self.iters, w, D)
        return f, g, D

    def done(self, D):
        return float(D.max()) <= self.config.dual_gap_tol


def _run_em(run: _Run, w, n_iters):
    for _ in range(n_iters):
        f, g, D = run.evaluate(w)
        if run.done(D):
            return w, True
        w = w * g
        w[w < TINY] = 0.0
        w /= w.sum()
        run.iters += 1
    return w, False


def _em_map(Ls, w):
    f = _row_sums(Ls, w)
    out = w * _gradient(Ls, f)
    out[out < TINY] = 0.0
    return out / out.sum()


def _mean_log(Ls, w):
    with np.errstate(divide="ignore", invalid="ignore"):
        f = Ls @ w
        return float(np.mean(np.log(f))) if np.all(f > 0) else -np.inf


def _run_squarem(run: _Run, w, n_iters):
    """EM with squared-extrapolation acceleration.

    Each cycle takes two EM updates ``w1 = F(w)``, ``w2 = F(w1)`` and tries
    the extrapolated point ``w - 2 a r + a^2 v`` (``r = w1 - w``,
    ``v = w2 - 2 w1 + w``) followed by one more EM update. The step length is
    halved toward ``a = -1`` (which reproduces ``w2``) until the point stays
    in the simplex; if the result has lower likelihood than ``w2`` the cycle
    keeps ``w2``, so accepted iterates are monotone like plain EM.
    """
    Ls = run.Ls
    while run.iters < n_iters:
        f, g, D = run.evaluate(w)
        if run.done(D):
            return w, True
        w1 = w * g
        w1[w1 < TINY] = 0.0
        w1 /= w1.sum()
        w2 = _em_map(Ls, w1)
        run.iters += 2
        r = w1 - w
        v = w2 - w1 - r
        nv = float(np.linalg.norm(v))
        best = w2
        if nv > 0:
            a = min(-1.0, -float(np.linalg.norm(r)) / nv)
            trial = w - 2.0 * a * r + a * a * v
            # shorten the step until it stays in the simplex
            while a < -1.0 and not np.all(trial[w > 0] > 0):
                a = 0.5 * (a - 1.0) if a < -1.01 else -1.0
                trial = w - 2.0 * a * r + a * a * v
            if a < -1.0:
                trial = _em_map(Ls, trial / trial.sum())
                run.iters += 1
                if _mean_log(Ls, trial) >= _mean_log(Ls, w2):
                    best = trial
        w = best
    f, g, D = run.evaluate(w)
    return w, run.done(D)


def _line_search(f, Ld, tmax):
    """Maximize the concave ``t -> sum log(f + t Ld)`` on ``[0, tmax]``.

    Newton's method on the derivative, safeguarded by a bisection bracket.
    """
    if math.isfinite(tmax):
        with np.errstate(divide="ignore", invalid="ignore"):
            if float(np.sum(Ld / (f + tmax * Ld))) >= 0:
                return tmax
        lo, hi = 0.0, tmax
    else:
        lo, hi = 0.0, 1.0
        while float(np.sum(Ld / (f + hi * Ld))) > 0:
            lo, hi = hi, 2.0 * hi
    t = lo
    for _ in range(80):
        r = Ld / (f + t * Ld)
        s = float(r.sum())
        if s > 0:
            lo = t
        else:
            hi = t
        curv = float(r @ r)
        if s == 0 or curv == 0:
            return t
        new_t = t + s / curv
        if not lo < new_t < hi:
            new_t = 0.5 * (lo + hi)
        if abs(new_t - t) <= 1e-12 * new_t or hi - lo <= 1e-15 * hi:
            return new_t
        t = new_t
    return t


def _run_frank_wolfe(run: _Run, w):
    """Pairwise Frank-Wolfe: shift mass from the worst active atom to the best atom.

    The Frank-Wolfe vertex maximizes ``D``; the away vertex minimizes ``D``
    over the current support. Each step moves weight ``t`` from the away atom
    to the Frank-Wolfe atom with ``t`` found by an exact line search on
    ``[0, w_away]``.
    """
    Ls = run.Ls
    for _ in range(run.config.max_iters):
        f, g, D = run.evaluate(w)
        if run.done(D):
            return w, True
        s = int(np.argmax(D))
        active = np.flatnonzero(w > 0)
        a = int(active[np.argmin(D[active])])
        run.iters += 1
        if a == s:
            break
        Ld = Ls[:, s] - Ls[:, a]
        wa = w[a]
        t = _line_search(f, Ld, wa)
        w = w.copy()
        w[s] += t
        # a full step drops the away atom exactly
        w[a] = 0.0 if t >= wa or wa - t < TINY else wa - t
        w /= w.sum()
    f, g, D = run.evaluate(w)
    return w, run.done(D)


def _run_proj_newton(run: _Run, w, n_candidates=30):
    """EM warm start, then Newton steps on an active set.

    Each step maximizes the second-order expansion of the log-likelihood in
    the fitted values, which reduces to a nonnegative least-squares problem
    ``min ||S v - 2||, v >= 0, sum(v) = 1`` with ``S = L[:, active] / f``; the
    result is
    renormalized onto the simplex and followed by an Armijo backtracking search.
    """
    cfg = run.config
    Ls = run.Ls
    n = Ls.shape[0]
    w, ok = _run_em(run, w, min(cfg.em_warm_start, cfg.max_iters))
    if ok:
        return w, True
    max_active = max(2 * n, 200)
    penalty = 1e3 * math.sqrt(n)
    while run.iters < cfg.max_iters:
        f, g, D = run.evaluate(w)
        if run.done(D):
            return w, True
        run.iters += 1
        ll = run.trace[-1] - run.offset
        support = np.flatnonzero(w > 1e-3 * w.max())
        if support.size > max_active:
            support = support[np.argsort(-w[support])[:max_active]]
        pos = np.flatnonzero(D > 0)
        if pos.size > n_candidates:
            pos = pos[np.argpartition(-D[pos], n_candidates)[:n_candidates]]
        active = np.union1d(support, pos)
        S = Ls[:, active] / f[:, None]
        # the simplex constraint enters as one heavily weighted extra row
        A = np.vstack([S, np.full((1, active.size), penalty)])
        b = np.append(np.full(n, 2.0), penalty)
        try:
            v, _ = nnls(A, b, maxiter=50 * active.size)
        except RuntimeError:
            v = np.zeros(active.size)
        total = v.sum()
        new_f = None
        if total > 0:
            v /= total
            slope = float(g[active] @ v) - 1.0
            if slope > 0:
                cand_f = Ls[:, active] @ v
                t = 1.0
                with np.errstate(divide="ignore", invalid="ignore"):
                    while t > 1e-10:
                        trial = (1.0 - t) * f + t * cand_f
                        val = float(np.mean(np.log(trial)))
                        if np.isfinite(val) and val >= ll + 1e-4 * t * slope:
                            new_f = trial
                            break
                        t *= 0.5
        if new_f is None:
            # no productive Newton step: fall back to one EM update
            w = w * g
        else:
            d = -w
            d[active] += v
            w = w + t * d
            w[w < TINY] = 0.0
        w = np.clip(w, 0.0, None)
        w /= w.sum()
    f, g, D = run.evaluate(w)
    return w, run.done(D)


def solve_weights(K: LogKernelMatrix, config: SolverConfig | None = None, *, w0=None,
                  callback: Callable | None = None, raise_on_failure: bool = False):
    """Maximize the grid-restricted mean log-likelihood over the simplex.

    Returns ``(weights, certificate)``. Weights below
    ``config.prune_weight_tol`` are zeroed and the certificate is recomputed
    after pruning; if pruning undoes convergence the unpruned weights are
    returned instead. ``callback(iteration, w, D)`` is invoked at every iterate.
    If the dual-gap target is not met within ``max_iters`` the certificate is
    flagged ``converged=False``, or :class:`NonConvergence` is raised when
    ``raise_on_failure`` is set.
    """
    config = config or SolverConfig()
    if not np.all(np.isfinite(K.entries)):
        raise FloatingPointError("kernel matrix has non-finite entries")
    m = K.m
    w = np.full(m, 1.0 / m) if w0 is None else np.asarray(w0, dtype=float) / np.sum(w0)
    run = _Run(K, config, callback)
    if config.algorithm == "em":
        if config.em_accelerate:
            w, ok = _run_squarem(run, w, config.max_iters)
        else:
            w, ok = _run_em(run, w, config.max_iters)
            if not ok:
                run.evaluate(w)
    elif config.algorithm == "frank_wolfe":
        w, ok = _run_frank_wolfe(run, w)
    else:
        w, ok = _run_proj_newton(run, w)

    pruned = np.where(w < config.prune_weight_tol, 0.0, w)
    pruned /= pruned.sum()
    cert = certify(K, pruned, iters=run.iters, trace=run.trace, tol=config.dual_gap_tol, algorithm=config.algorithm)
    if ok and not cert.converged:
        # the small weights were not noise: pruning broke the certificate
        logger.info("pruning raised the dual gap to %.3g; keeping unpruned weights", cert.dual_gap)
        cert = certify(K, w, iters=run.iters, trace=run.trace, tol=config.dual_gap_tol, algorithm=config.algorithm)
    else:
        w = pruned
    if not cert.converged:
        msg = (f"{config.algorithm}: dual gap {cert.dual_gap:.3g} > {config.dual_gap_tol:.3g} "
               f"after {run.iters} iterations")
        if raise_on_failure:
            raise NonConvergence(msg, w, cert)
        logger.warning(msg)
    return w, cert
