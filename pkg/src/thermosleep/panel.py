"""Multi-way fixed-effects OLS with cluster-robust (CR1) covariance.

Fixed effects are absorbed by alternating projections: a sweep subtracts
group means for every FE dimension in turn (Gauss-Seidel). By default the
symmetric sweep is accelerated with conjugate gradients; iteration stops
once the largest absolute change in any column falls below ``tol``. Group
sums are sparse matrix products, so results do not depend on scheduling.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

COLLINEAR_RTOL = 1e-10
# above this many FE levels the absorbed rank uses the component approximation
EXACT_DOF_MAX_LEVELS = 1500
CG_RESIDUAL_RTOL = 1e-13


class ConvergenceError(RuntimeError):
    def __init__(self, last_delta: float, iterations: int):
        self.last_delta = last_delta
        self.iterations = iterations
        super().__init__(f"demeaning did not converge after {iterations} sweeps (last delta {last_delta:.3g})")


class CollinearityError(ValueError):
    pass


@dataclass
class Panel:
    """Regression input: outcome, covariates, FE group ids and cluster ids."""

    y: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    fe: np.ndarray
    cluster: np.ndarray
    fe_names: tuple[str, ...] = ()
    outcome: str = "y"

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        self.X = np.zeros((len(self.y), 0)) if X.size == 0 else X.reshape(len(self.y), -1)
        self.names = tuple(self.names)
        fe = np.asarray(self.fe)
        self.fe = fe.reshape(len(self.y), -1) if fe.ndim == 1 else fe
        self.cluster = np.asarray(self.cluster)
        if not self.fe_names:
            self.fe_names = tuple(f"fe{d}" for d in range(self.fe.shape[1]))
        n = len(self.y)
        if self.X.shape[0] != n or self.fe.shape[0] != n or len(self.cluster) != n:
            raise ValueError("panel arrays must share their first dimension")
        if self.X.shape[1] != len(self.names):
            raise ValueError("one name per covariate column is required")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.y)):
            raise ValueError("y and X must be finite")
        if pd.isna(self.cluster).any() or pd.isna(self.fe).any():
            raise ValueError("FE ids and cluster ids must be non-null")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask) -> "Panel":
        return Panel(self.y[mask], self.X[mask], self.names, self.fe[mask], self.cluster[mask],
                     self.fe_names, self.outcome)

    @classmethod
    def from_frame(cls, df: pd.DataFrame, y: str, x: Sequence[str], fe: Sequence[str], cluster: str) -> "Panel":
        return cls(df[y].to_numpy(float), df[list(x)].to_numpy(float).reshape(len(df), len(x)), tuple(x),
                   df[list(fe)].to_numpy(), df[cluster].to_numpy(), tuple(fe), y)


def factorize(col) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(np.asarray(col), sort=True)
    return codes.astype(np.int64), len(uniques)


def prune_singletons(fe: np.ndarray) -> np.ndarray:
    """Boolean mask of rows kept after iteratively dropping singleton groups."""
    n, d = fe.shape
    keep = np.ones(n, dtype=bool)
    codes = [factorize(fe[:, j])[0] for j in range(d)]
    while True:
        drop = np.zeros(n, dtype=bool)
        for c in codes:
            counts = np.bincount(c[keep], minlength=c.max() + 1 if n else 0)
            drop |= keep & (counts[c] == 1)
        if not drop.any():
            return keep
        keep &= ~drop


def _indicator(codes: np.ndarray, n_levels: int) -> sp.csr_matrix:
    n = len(codes)
    return sp.csr_matrix((np.ones(n), (codes, np.arange(n))), shape=(n_levels, n))


@dataclass
class Demeaned:
    values: np.ndarray
    keep: np.ndarray
    n_singletons: int
    iterations: int
    last_delta: float


def _group_ops(fe: np.ndarray):
    ops = []
    for j in range(fe.shape[1]):
        codes, g = factorize(fe[:, j])
        D = _indicator(codes, g)
        ops.append((codes, D, np.asarray(D.sum(axis=1)).ravel()))
    return ops


def _remove_means(M, op):
    codes, D, counts = op
    return M - (D @ M / counts[:, None])[codes]


def _sweep(M, ops):
    for op in ops:
        M = _remove_means(M, op)
    return M


def _symmetric_sweep(M, ops):
    for op in ops:
        M = _remove_means(M, op)
    for op in ops[-2::-1]:
        M = _remove_means(M, op)
    return M


def _demean_plain(M, ops, tol, max_iter):
    delta = np.inf
    for it in range(1, max_iter + 1):
        new = _sweep(M, ops)
        delta = float(np.max(np.abs(new - M)))
        M = new
        if delta < tol:
            return M, it, delta
    raise ConvergenceError(delta, max_iter)


def _demean_cg(M, ops, tol, max_iter):
    # T = symmetric sweep; solve (I - T) w = (I - T) M by CG, result M - w.
    # A column stops once its update is below tol or its residual is at
    # rounding level; CG past that point only amplifies noise.
    r = M - _symmetric_sweep(M, ops)
    w = np.zeros_like(M)
    p = r.copy()
    rs = np.einsum("ij,ij->j", r, r)
    floor = rs * CG_RESIDUAL_RTOL**2
    active = rs > 0
    delta = 0.0
    for it in range(1, max_iter + 1):
        if not active.any():
            return M - w, it - 1, delta
        Ap = p - _symmetric_sweep(p, ops)
        pAp = np.einsum("ij,ij->j", p, Ap)
        alpha = np.divide(rs, pAp, out=np.zeros_like(rs), where=active & (pAp > 0))
        step = p * alpha
        w += step
        r -= Ap * alpha
        col_delta = np.max(np.abs(step), axis=0)
        delta = float(col_delta[active].max())
        rs_new = np.einsum("ij,ij->j", r, r)
        active &= (col_delta >= tol) & (rs_new > floor)
        beta = np.divide(rs_new, rs, out=np.zeros_like(rs), where=active & (rs > 0))
        p = r + p * beta
        rs = rs_new
    if active.any():
        raise ConvergenceError(delta, max_iter)
    return M - w, max_iter, delta


def demean_hdfe(values, fe, tol: float = 1e-8, max_iter: int = 10_000, drop_singletons: bool = True,
                accelerate: bool = True) -> Demeaned:
    """Project FE group means out of every column of ``values``.

    Parameters
    ----------
    values : array (n,) or (n, k)
    fe : array (n, d) of group labels, one column per FE dimension
    tol : float
        Stop once an iteration changes no entry by more than this.
    max_iter : int
        Iteration budget; exceeding it raises ConvergenceError.
    drop_singletons : bool
        Drop rows alone in any FE cell, iterated to a fixed point.
    accelerate : bool
        Conjugate-gradient acceleration of the symmetric sweep. The plain
        Gauss-Seidel sweep (``False``) has the same limit but can need many
        thousands of sweeps on weakly connected panels.

    Returns
    -------
    Demeaned
        ``values`` holds only kept rows; ``keep`` marks them in the input.
    """
    M = np.array(values, dtype=float)
    squeeze = M.ndim == 1
    M = M.reshape(len(M), -1)
    fe = np.asarray(fe)
    fe = fe.reshape(len(fe), -1)
    if len(M) < 2:
        raise ValueError("need at least 2 rows")
    keep = prune_singletons(fe) if drop_singletons else np.ones(len(M), dtype=bool)
    M = M[keep]
    ops = _group_ops(fe[keep])
    it, delta = 0, 0.0
    if M.size and ops:
        if len(ops) == 1:
            M, it = _remove_means(M, ops[0]), 1
        elif accelerate:
            M, it, delta = _demean_cg(M, ops, tol, max_iter)
        else:
            M, it, delta = _demean_plain(M, ops, tol, max_iter)
    out = M[:, 0] if squeeze else M
    return Demeaned(out, keep, int((~keep).sum()), it, delta)


@dataclass
class OLSResult:
    beta: np.ndarray
    kept: np.ndarray
    dropped: tuple[str, ...]


def ols(X: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None, rtol: float = COLLINEAR_RTOL) -> OLSResult:
    """Least squares with rank-revealing pruning of collinear columns.

    Columns whose pivot in a column-pivoted QR falls below ``rtol`` times the
    largest pivot are dropped and reported by name.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    p = X.shape[1]
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if p == 0:
        return OLSResult(np.empty(0), np.empty(0, dtype=int), ())
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        raise CollinearityError("all covariates are collinear with the fixed effects or zero")
    rank = int(np.sum(diag > rtol * diag[0]))
    kept = np.sort(piv[:rank])
    dropped = tuple(names[j] for j in sorted(piv[rank:]))
    if dropped:
        logger.warning("dropping collinear covariate(s): %s", ", ".join(dropped))
    beta, *_ = np.linalg.lstsq(X[:, kept], y, rcond=None)
    return OLSResult(beta, kept, dropped)


def cluster_sums(scores: np.ndarray, clusters) -> np.ndarray:
    codes, g = factorize(clusters)
    return _indicator(codes, g) @ scores


def cluster_robust_vcov(X: np.ndarray, resid: np.ndarray, clusters, k_absorbed: int = 0) -> np.ndarray:
    """CR1 sandwich covariance.

    ``(X'X)^-1 [sum_g X_g' e_g e_g' X_g] (X'X)^-1 * G/(G-1) * (N-1)/(N-K)``
    with ``K = columns of X + k_absorbed``.
    """
    X = np.asarray(X, float)
    resid = np.asarray(resid, float)
    n, p = X.shape
    _, g = factorize(clusters)
    if g < 2:
        raise ValueError("cluster-robust inference needs at least 2 clusters")
    k = p + k_absorbed
    if n <= k:
        raise ValueError(f"no residual degrees of freedom (N={n}, K={k})")
    bread = np.linalg.inv(X.T @ X)
    S = cluster_sums(X * resid[:, None], clusters)
    meat = S.T @ S
    V = bread @ meat @ bread
    V = (V + V.T) / 2
    return V * (g / (g - 1)) * ((n - 1) / (n - k))


def absorbed_dof(fe: np.ndarray) -> int:
    """Rank of the FE indicator matrix (intercept included).

    Exact for small problems. Otherwise ``L1 + L2 - C12 + sum(L_d - 1)`` for
    d >= 3, where C12 counts connected components of the first two
    dimensions; exact for two dimensions and an upper bound beyond that.
    """
    fe = np.asarray(fe).reshape(len(fe), -1)
    n, d = fe.shape
    if d == 0:
        return 0
    coded = [factorize(fe[:, j]) for j in range(d)]
    total = sum(g for _, g in coded)
    if total <= EXACT_DOF_MAX_LEVELS:
        D = sp.hstack([_indicator(c, g).T for c, g in coded]).toarray()
        return int(np.linalg.matrix_rank(D))
    (c1, g1) = coded[0]
    k = g1
    if d >= 2:
        c2, g2 = coded[1]
        adj = sp.csr_matrix((np.ones(n), (c1, c2 + g1)), shape=(g1 + g2, g1 + g2))
        n_comp, _ = connected_components(adj, directed=False)
        k += g2 - n_comp
    k += sum(g - 1 for _, g in coded[2:])
    return int(k)


@dataclass(frozen=True)
class FitResult:
    names: tuple[str, ...]
    beta: np.ndarray
    vcov: np.ndarray
    n_obs: int
    n_clusters: int
    dropped_singletons: int
    converged: bool
    iterations: int
    k_absorbed: int
    dropped_columns: tuple[str, ...] = ()
    outcome: str = "y"
    residuals: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def stderr(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"coef": self.beta, "se": self.se}, index=pd.Index(self.names, name="term"))

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "coefficients": dict(zip(self.names, map(float, self.beta))),
            "se": dict(zip(self.names, map(float, self.se))),
            "vcov": [[float(v) for v in row] for row in self.vcov],
            "terms": list(self.names),
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "dropped_singletons": self.dropped_singletons,
            "dropped_columns": list(self.dropped_columns),
            "k_absorbed": self.k_absorbed,
            "converged": self.converged,
            "iterations": self.iterations,
            "vcov_type": "CR1",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        names = tuple(d["terms"])
        return cls(names, np.array([d["coefficients"][k] for k in names], float),
                   np.array(d["vcov"], float).reshape(len(names), len(names)),
                   d["n_obs"], d["n_clusters"], d["dropped_singletons"], d["converged"],
                   d["iterations"], d["k_absorbed"], tuple(d.get("dropped_columns", ())),
                   d.get("outcome", "y"))


def fit(panel: Panel, tol: float = 1e-8, max_iter: int = 10_000) -> FitResult:
    """Absorb fixed effects, run OLS and compute CR1 covariance."""
    dm = demean_hdfe(np.column_stack([panel.y, panel.X]), panel.fe, tol, max_iter)
    yt, Xt = dm.values[:, 0], dm.values[:, 1:]
    res = ols(Xt, yt, panel.names)
    Xk = Xt[:, res.kept]
    resid = yt - Xk @ res.beta
    fe = panel.fe[dm.keep]
    k_abs = absorbed_dof(fe)
    clusters = panel.cluster[dm.keep]
    vcov = cluster_robust_vcov(Xk, resid, clusters, k_abs)
    return FitResult(
        names=tuple(panel.names[j] for j in res.kept),
        beta=res.beta,
        vcov=vcov,
        n_obs=int(dm.keep.sum()),
        n_clusters=factorize(clusters)[1],
        dropped_singletons=dm.n_singletons,
        converged=True,
        iterations=dm.iterations,
        k_absorbed=k_abs,
        dropped_columns=res.dropped,
        outcome=panel.outcome,
        residuals=resid,
    )


BRUTE_FORCE_MAX_OBS = 2000


def brute_force_fit(panel: Panel, max_obs: int = BRUTE_FORCE_MAX_OBS) -> FitResult:
    """Reference fit with one explicit indicator column per FE level.

    Independent of :func:`fit`: singletons are pruned with a pandas loop,
    coefficients come from the pseudo-inverse of the full dummy design, and
    the covariance is summed cluster by cluster.
    """
    if len(panel) > max_obs:
        raise ValueError(f"brute force limited to {max_obs} rows (got {len(panel)})")
    df = pd.DataFrame(panel.fe, columns=[f"f{j}" for j in range(panel.fe.shape[1])])
    keep = pd.Series(True, index=df.index)
    changed = True
    while changed:
        changed = False
        for col in df.columns:
            counts = df.loc[keep, col].map(df.loc[keep, col].value_counts())
            single = counts[counts == 1].index
            if len(single):
                keep.loc[single] = False
                changed = True
    mask = keep.to_numpy()
    y = panel.y[mask]
    X = panel.X[mask]
    dummies = [pd.get_dummies(df.loc[mask, c].astype(str)).to_numpy(float) for c in df.columns]
    D = np.hstack(dummies) if dummies else np.ones((len(y), 1))
    rank_d = np.linalg.matrix_rank(D)
    cols, dropped = [], []
    for j, name in enumerate(panel.names):
        trial = np.hstack([D, X[:, cols + [j]]])
        if np.linalg.matrix_rank(trial) > rank_d + len(cols):
            cols.append(j)
        else:
            dropped.append(name)
    Xf = np.hstack([X[:, cols], D])
    A = np.linalg.pinv(Xf)
    coef = A @ y
    resid = y - Xf @ coef
    slopes = A[: len(cols)]
    beta = coef[: len(cols)]
    n, k = len(y), len(cols) + rank_d
    labels = panel.cluster[mask]
    groups = sorted(set(labels.tolist()), key=str)
    if len(groups) < 2:
        raise ValueError("cluster-robust inference needs at least 2 clusters")
    V = np.zeros((len(cols), len(cols)))
    for gid in groups:
        idx = labels == gid
        u = slopes[:, idx] @ resid[idx]
        V += np.outer(u, u)
    G = len(groups)
    V *= G / (G - 1) * (n - 1) / (n - k)
    return FitResult(
        names=tuple(panel.names[j] for j in cols),
        beta=beta,
        vcov=V,
        n_obs=n,
        n_clusters=G,
        dropped_singletons=int((~mask).sum()),
        converged=True,
        iterations=0,
        k_absorbed=int(rank_d),
        dropped_columns=tuple(dropped),
        outcome=panel.outcome,
        residuals=resid,
    )


PANEL_FE_COLUMNS = ("fe_user", "fe_date", "fe_adm1month")


def read_panel(path) -> Panel:
    """Read ``panel.csv`` (y, x_1..x_p, fe_user, fe_date, fe_adm1month, cluster)."""
    from .io import SchemaError, read_table

    header = pd.read_csv(path, nrows=0).columns.tolist()
    xs = [c for c in header if c not in ("y", "cluster", *PANEL_FE_COLUMNS)]
    fe_cols = [c for c in header if c.startswith("fe_")]
    xs = [c for c in xs if c not in fe_cols]
    if not fe_cols:
        raise SchemaError(f"{path}:1: no fe_* columns")
    schema = {"y": float, "cluster": str, **{c: float for c in xs}, **{c: str for c in fe_cols}}
    df = read_table(path, schema)
    bad = df[["y", *xs]].isna().any(axis=1)
    if bad.any():
        raise SchemaError(f"{path}:{int(np.flatnonzero(bad.to_numpy())[0]) + 2}: missing numeric value")
    return Panel.from_frame(df, "y", xs, fe_cols, "cluster")
