"""Point-identified Poisson log-linear models for capture-recapture tables."""
from __future__ import annotations

import itertools
import logging
import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .tables import ContingencyTable, history_matrix

log = logging.getLogger(__name__)

CHI2_1_95 = 3.841458820694124


class FitError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelFormula:
    """Hierarchical log-linear model, e.g. ``[12,13]``.

    ``generators`` are the maximal interaction terms (1-based sample ids);
    ``samples`` are the samples the model uses. A model on fewer samples than
    the table is fitted to the table collapsed onto those samples.
    """

    generators: frozenset
    samples: tuple[int, ...]

    def __post_init__(self):
        gens = frozenset(frozenset(g) for g in self.generators)
        object.__setattr__(self, "generators", gens)
        object.__setattr__(self, "samples", tuple(sorted(self.samples)))
        used = set(self.samples)
        if len(used) < 2:
            raise ValueError("a model needs at least two samples")
        for g in gens:
            if not g or not g <= used:
                raise ValueError(f"term {sorted(g)} uses samples outside {sorted(used)}")
            if g == used:
                raise ValueError("the full interaction term is not identifiable")

    @classmethod
    def parse(cls, label: str) -> "ModelFormula":
        body = label.strip()
        if not re.fullmatch(r"\[\s*\d+(\s*,\s*\d+)*\s*\]", body):
            raise ValueError(f"cannot parse model label {label!r}")
        parts = [p.strip() for p in body[1:-1].split(",")]
        gens = [frozenset(int(ch) for ch in p) for p in parts]
        samples = sorted(set().union(*gens))
        return cls(frozenset(gens), tuple(samples))

    @property
    def terms(self) -> list[tuple[int, ...]]:
        """Every non-intercept term, closed under subsets, in design column order."""
        out = {(s,) for s in self.samples}
        for g in self.generators:
            g = sorted(g)
            for size in range(2, len(g) + 1):
                out.update(itertools.combinations(g, size))
        return sorted(out, key=lambda t: (len(t), t))

    @property
    def label(self) -> str:
        inter = sorted((tuple(sorted(g)) for g in self.generators if len(g) > 1))
        covered = set().union(*map(set, inter)) if inter else set()
        singles = [(s,) for s in self.samples if s not in covered]
        return "[" + ",".join("".join(map(str, t)) for t in inter + singles) + "]"

    def __str__(self):
        return self.label


def build_design(formula: ModelFormula, k: int, include_missing: bool = False) -> np.ndarray:
    """0/1 design over the cells of the table collapsed onto ``formula.samples``.

    One row per observed cell (plus the unobserved cell first when
    ``include_missing``), one column for the intercept and one per term.
    """
    if max(formula.samples) > k:
        raise ValueError(f"model {formula} needs more than {k} samples")
    kk = len(formula.samples)
    pos = {s: j for j, s in enumerate(formula.samples)}
    h = history_matrix(kk) if kk >= 2 else None
    rows = h if include_missing else h[1:]
    cols = [np.ones(len(rows))]
    for term in formula.terms:
        cols.append(np.prod(rows[:, [pos[s] for s in term]], axis=1))
    return np.column_stack(cols).astype(float)


@dataclass
class FitResult:
    model: str
    lambda_hat: np.ndarray
    M_hat: float
    m0_hat: float
    se: float
    loglik: float
    aic: float
    bic: float
    n_obs: float
    n_params: int
    converged: bool
    iterations: int
    ci_lo: float | None = None
    ci_hi: float | None = None
    best_bic: bool = False
    samples: tuple[int, ...] = ()
    fitted: np.ndarray = field(default=None, repr=False)
    error: str | None = None

    def row(self) -> dict:
        return {
            "model": self.model,
            "M_hat": self.M_hat,
            "se": self.se,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "aic": self.aic,
            "bic": self.bic,
            "best_bic": self.best_bic,
            "converged": self.converged,
            "error": self.error,
        }


def fit_poisson(X: np.ndarray, counts, *, max_iter: int = 200, tol: float = 1e-8, model: str = "") -> FitResult:
    """Poisson maximum likelihood for ``log m = X @ lam`` by Newton with step halving.

    The unobserved cell is the all-zero history, so its log-mean is the intercept.
    """
    X = np.asarray(X, dtype=float)
    N = np.asarray(counts, dtype=float)
    c, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        raise FitError(f"design for {model or 'model'} is rank deficient")
    n_obs = float(N.sum())
    if n_obs <= 0:
        raise FitError("table has no observed units")
    lam = np.zeros(p)
    lam[0] = math.log(n_obs / (c + 1))

    def objective(l):
        eta = X @ l
        return float(N @ eta - np.exp(eta).sum())

    cur = objective(lam)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        m = np.exp(X @ lam)
        grad = X.T @ (N - m)
        if np.linalg.norm(grad) <= tol:
            converged = True
            break
        H = X.T @ (m[:, None] * X)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            trial = lam + t * step
            val = objective(trial)
            if np.isfinite(val) and val >= cur - 1e-12 * abs(cur):
                break
            t *= 0.5
            if t < 1e-10:
                break
        lam, cur = trial, val
        if np.max(np.abs(t * step)) < 1e-14:
            # stalled at machine precision; accept a slightly looser gradient
            converged = np.linalg.norm(X.T @ (N - np.exp(X @ lam))) <= 1e3 * tol
            break
    m = np.exp(X @ lam)
    if not converged:
        raise FitError(f"Newton iterations did not converge for {model or 'model'}")
    if np.any(m <= 0) or not np.all(np.isfinite(m)):
        raise FitError(f"fitted cell mean underflowed for {model or 'model'}")
    H = X.T @ (m[:, None] * X)
    cov = np.linalg.inv(H)
    m0 = math.exp(lam[0])
    x0 = np.zeros(p)
    x0[0] = 1.0
    # delta-method variance of the fitted missing cell plus its own Poisson variance
    se = math.sqrt(m0 * m0 * float(x0 @ cov @ x0) + m0)
    loglik = float(N @ np.log(m) - m.sum() - special.gammaln(N + 1).sum())
    return FitResult(
        model=model,
        lambda_hat=lam,
        M_hat=n_obs + m0,
        m0_hat=m0,
        se=se,
        loglik=loglik,
        aic=-2 * loglik + 2 * p,
        bic=-2 * loglik + p * math.log(n_obs),
        n_obs=n_obs,
        n_params=p,
        converged=True,
        iterations=it,
        fitted=m,
    )


def fit_model(tbl: ContingencyTable, formula: ModelFormula | str, *, ci: bool = True, alpha: float = 0.05) -> FitResult:
    if isinstance(formula, str):
        formula = ModelFormula.parse(formula)
    sub = tbl if len(formula.samples) == tbl.k else tbl.collapse(formula.samples)
    X = build_design(formula, tbl.k)
    res = fit_poisson(X, sub.array(), model=formula.label)
    res.samples = formula.samples
    if ci:
        res.ci_lo, res.ci_hi = profile_ci(formula, sub, res, alpha=alpha)
    return res


def _profile_loglik(Xfull: np.ndarray, N: np.ndarray, M: float, start: np.ndarray) -> tuple[float, np.ndarray]:
    """Max observed-cell Poisson log-likelihood with total mean fixed at M.

    The intercept is eliminated: with cell probabilities pi = softmax(Xfull
    lam) over all cells, m = M * pi.
    """
    Xt = Xfull[:, 1:]
    Xo = Xt[1:]
    n = N.sum()
    XtN = Xo.T @ N

    def negll(l):
        eta = Xt @ l
        lse = special.logsumexp(eta)
        logpi = eta - lse
        pi0 = math.exp(logpi[0])
        val = N @ (math.log(M) + logpi[1:]) - M * (1.0 - pi0)
        pi = np.exp(logpi)
        xbar = Xt.T @ pi
        grad = XtN - (n + M * pi0) * xbar
        return -val, -grad

    with warnings.catch_warnings():
        # a stalled line search at this tolerance still leaves the optimum to ~1e-9
        warnings.filterwarnings("ignore", message="The line search algorithm did not converge")
        res = optimize.minimize(negll, start, jac=True, method="BFGS", options={"gtol": 1e-9, "maxiter": 2000})
    return -float(res.fun), res.x


def profile_ci(formula: ModelFormula, tbl: ContingencyTable, fit: FitResult, *, alpha: float = 0.05,
               delta: float = 1e8, resolution: float = 0.05) -> tuple[float, float]:
    """Profile-likelihood interval for M under a log-linear model.

    The upper end is ``inf`` when the likelihood ratio stays below the
    threshold up to ``delta``.
    """
    from scipy.stats import chi2

    thr = float(chi2.ppf(1 - alpha, 1))
    N = tbl.array()
    Xfull = build_design(formula, max(formula.samples), include_missing=True)
    lhat = float(N @ np.log(fit.fitted) - fit.fitted.sum())
    warm = {"x": fit.lambda_hat[1:].copy()}
    cache: dict[float, float] = {}

    def lr(M):
        if M not in cache:
            val, warm["x"] = _profile_loglik(Xfull, N, M, warm["x"])
            cache[M] = max(0.0, 2.0 * (lhat - val))
        return cache[M]

    Mhat, n = fit.M_hat, fit.n_obs
    lo = _bracket_root(lr, thr, Mhat, lambda M: n + (M - n) / 2.0, stop=lambda M: M - n < 1e-6)
    lo = n if lo is None else _crossing(lr, thr, lo, Mhat, resolution)
    warm["x"] = fit.lambda_hat[1:].copy()
    hi = _bracket_root(lr, thr, Mhat, lambda M: n + (M - n) * 2.0, stop=lambda M: M > delta)
    hi = math.inf if hi is None else _crossing(lr, thr, Mhat, hi, resolution)
    return lo, hi


def _bracket_root(f, thr, start, step, stop):
    """Walk away from ``start`` until ``f`` exceeds ``thr``; None if ``stop`` first."""
    M = start
    for _ in range(200):
        M = step(M)
        if stop(M):
            return None
        if f(M) > thr:
            return M
    return None


def _crossing(f, thr, a, b, resolution):
    """Point in [a, b] where f crosses thr, to within ``resolution``."""
    return optimize.brentq(lambda M: f(M) - thr, a, b, xtol=resolution)


def hierarchy_formulas(k: int) -> list[ModelFormula]:
    """Models built from pairwise interactions over all k samples, then every two-sample collapse."""
    if k > 5:
        raise ValueError("the model hierarchy is only enumerated for k <= 5")
    samples = tuple(range(1, k + 1))
    pairs = [frozenset(p) for p in itertools.combinations(samples, 2)]
    out = []
    if k > 2:
        for size in range(len(pairs), -1, -1):
            for chosen in itertools.combinations(pairs, size):
                gens = set(chosen)
                gens.update(frozenset({s}) for s in samples)
                out.append(ModelFormula(frozenset(gens), samples))
    for r, t in itertools.combinations(samples, 2):
        out.append(ModelFormula(frozenset({frozenset({r}), frozenset({t})}), (r, t)))
    return out


def fit_hierarchy(tbl: ContingencyTable, *, ci: bool = True, alpha: float = 0.05) -> list[FitResult]:
    """Fit the hierarchy; k-sample models first, each group sorted by BIC.

    The k-sample model with the smallest BIC is flagged ``best_bic``. A model
    that fails to fit is reported with ``error`` set rather than aborting.
    """
    results = []
    for f in hierarchy_formulas(tbl.k):
        try:
            results.append(fit_model(tbl, f, ci=ci, alpha=alpha))
        except (FitError, np.linalg.LinAlgError, ValueError) as e:
            log.warning("fit of %s failed: %s", f.label, e)
            results.append(FitResult(f.label, np.array([]), math.nan, math.nan, math.nan, math.nan,
                                     math.nan, math.nan, tbl.n_obs, 0, False, 0, samples=f.samples,
                                     error=str(e)))
    full = [r for r in results if len(r.samples) == tbl.k]
    part = [r for r in results if len(r.samples) != tbl.k]
    key = lambda r: (math.isnan(r.bic), r.bic)
    full.sort(key=key)
    part.sort(key=key)
    if full and not math.isnan(full[0].bic):
        full[0].best_bic = True
    return full + part


def lincoln_petersen(n11: float, n10: float, n01: float) -> float:
    return n11 + n10 + n01 + n10 * n01 / n11
