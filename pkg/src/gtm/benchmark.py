"""Synthetic data with known conditional independence, baselines and scores."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata, spearmanr

from .errors import ConfigError, GtmError, MetricError
from .io import atomic_write_text

LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# marginal warps


def _warp_parts(w):
    if isinstance(w, str):
        return w, {}
    w = dict(w)
    return w.pop("kind"), w


def warp_forward(w, x):
    kind, p = _warp_parts(w)
    if kind == "identity":
        return x.copy()
    if kind == "exp":
        return np.exp(x)
    if kind == "sinh_arcsinh":
        return np.sinh(p.get("tail", 1.0) * np.arcsinh(x) - p.get("skew", 0.0))
    raise ConfigError(f"unknown warp {kind!r}")


def warp_inverse(w, y):
    kind, p = _warp_parts(w)
    if kind == "identity":
        return y.copy()
    if kind == "exp":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(y)
    if kind == "sinh_arcsinh":
        return np.sinh((np.arcsinh(y) + p.get("skew", 0.0)) / p.get("tail", 1.0))
    raise ConfigError(f"unknown warp {kind!r}")


def warp_log_deriv(w, x):
    """log dy/dx of the warp at the latent value ``x``."""
    kind, p = _warp_parts(w)
    if kind == "identity":
        return np.zeros_like(x)
    if kind == "exp":
        return x.copy()
    if kind == "sinh_arcsinh":
        tail, skew = p.get("tail", 1.0), p.get("skew", 0.0)
        return np.log(np.cosh(tail * np.arcsinh(x) - skew)) + math.log(tail) - 0.5 * np.log1p(x * x)
    raise ConfigError(f"unknown warp {kind!r}")


def _check_warp(w):
    kind, p = _warp_parts(w)
    if kind not in ("identity", "exp", "sinh_arcsinh"):
        raise ConfigError(f"unknown warp {kind!r}")
    if kind == "sinh_arcsinh" and not p.get("tail", 1.0) > 0:
        raise ConfigError("sinh_arcsinh tail must be positive")


# --------------------------------------------------------------------------
# generators


@dataclass
class SyntheticSpec:
    """Gaussian copula with a sparse precision matrix and per-dimension warps."""

    precision: np.ndarray
    warps: list | None = None
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.precision, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ConfigError("precision must be a square matrix")
        if not np.allclose(p, p.T):
            raise ConfigError("precision must be symmetric")
        try:
            self._chol_prec = np.linalg.cholesky(p)
        except np.linalg.LinAlgError:
            raise ConfigError("precision is not positive definite") from None
        self.precision = p
        if self.warps is None:
            self.warps = ["identity"] * p.shape[0]
        if len(self.warps) != p.shape[0]:
            raise ConfigError("need one warp per dimension")
        for w in self.warps:
            _check_warp(w)

    @property
    def dim(self) -> int:
        return self.precision.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.precision)

    @property
    def labels(self) -> np.ndarray:
        """labels[u, v] is True when u and v are conditionally independent."""
        lab = self.precision == 0
        np.fill_diagonal(lab, False)
        return lab

    def log_density(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        x = np.column_stack([warp_inverse(w, y[:, j]) for j, w in enumerate(self.warps)])
        # log N(x; 0, P^-1) with P = C C^T
        q = x @ self._chol_prec
        log_det_p = 2.0 * np.sum(np.log(np.diag(self._chol_prec)))
        lp = -0.5 * np.sum(q * q, axis=1) - 0.5 * self.dim * LOG_2PI + 0.5 * log_det_p
        jac = sum(warp_log_deriv(w, x[:, j]) for j, w in enumerate(self.warps))
        with np.errstate(invalid="ignore"):
            out = lp - jac
        return np.where(np.all(np.isfinite(x), axis=1), out, -np.inf)

    def to_dict(self) -> dict:
        return {"precision": self.precision.tolist(), "warps": list(self.warps), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        try:
            return cls(np.asarray(d["precision"], dtype=float), d.get("warps"), int(d.get("seed", 0)))
        except KeyError as exc:
            raise ConfigError(f"spec is missing field {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1) + "\n")


def sparse_precision(dim: int, zero_fraction: float = 0.5, seed=0, magnitude=(0.3, 0.5)) -> np.ndarray:
    """Random unit-diagonal precision with a given share of zero off-diagonal pairs."""
    rng = np.random.default_rng(seed)
    rows, cols = np.tril_indices(dim, k=-1)
    n_pairs = len(rows)
    n_zero = int(round(zero_fraction * n_pairs))
    active = rng.permutation(n_pairs)[n_zero:]
    p = np.eye(dim)
    vals = rng.uniform(*magnitude, size=active.size) * rng.choice([-1.0, 1.0], size=active.size)
    p[rows[active], cols[active]] = vals
    p[cols[active], rows[active]] = vals
    # shrink off-diagonals until the smallest eigenvalue is comfortably positive
    while np.linalg.eigvalsh(p).min() < 0.2:
        off = p - np.eye(dim)
        p = np.eye(dim) + 0.9 * off
    return p


def gen_synthetic(spec: SyntheticSpec, n: int, seed=None):
    """``n`` draws from the spec, plus its conditional-independence labels."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    e = rng.standard_normal((n, spec.dim))
    # x = C^-T e has covariance (C C^T)^-1
    x = np.linalg.solve(spec._chol_prec.T, e.T).T
    y = np.column_stack([warp_forward(w, x[:, j]) for j, w in enumerate(spec.warps)])
    return y, spec.labels


@dataclass(frozen=True)
class BananaSpec:
    """y1 ~ N(0, 1), y2 = curvature * y1^2 + noise * N(0, 1)."""

    curvature: float = 1.0
    noise: float = 0.5

    def sample(self, n: int, seed=None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(n)
        return np.column_stack([x, self.curvature * x * x + self.noise * rng.standard_normal(n)])

    def log_density(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        r = (y[:, 1] - self.curvature * y[:, 0] ** 2) / self.noise
        return -0.5 * y[:, 0] ** 2 - 0.5 * r * r - LOG_2PI - math.log(self.noise)


# --------------------------------------------------------------------------
# Gaussian baseline


@dataclass
class GaussianBaseline:
    mean: np.ndarray
    covariance: np.ndarray
    ridge: float = 0.0

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.covariance)

    @property
    def partial_correlations(self) -> np.ndarray:
        p = self.precision
        d = np.sqrt(np.diag(p))
        r = -p / np.outer(d, d)
        np.fill_diagonal(r, 1.0)
        return r

    def log_density(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        c = np.linalg.cholesky(self.covariance)
        q = np.linalg.solve(c, (y - self.mean).T)
        return -0.5 * np.sum(q * q, axis=0) - 0.5 * len(self.mean) * LOG_2PI - np.sum(np.log(np.diag(c)))


def fit_gaussian(data) -> GaussianBaseline:
    """Maximum likelihood mean and covariance; a small ridge rescues singular fits."""
    y = np.atleast_2d(np.asarray(data, dtype=float))
    n, dim = y.shape
    if n <= dim:
        raise ConfigError(f"need more observations ({n}) than dimensions ({dim})")
    mean = y.mean(axis=0)
    cov = np.cov(y.T, bias=True).reshape(dim, dim)
    ridge = 0.0
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        ridge = 1e-8 * np.trace(cov) / dim
        cov = cov + ridge * np.eye(dim)
    return GaussianBaseline(mean, cov, ridge)


# --------------------------------------------------------------------------
# scores


@dataclass(frozen=True)
class MonteCarloKld:
    value: float
    std_error: float
    n_used: int
    n_excluded: int

    def __float__(self):
        return self.value


def mc_kld(true_logpdf, model_logpdf, test_data) -> MonteCarloKld:
    """Mean of log p_true - log p_model over rows drawn from the true distribution."""
    test_data = np.asarray(test_data, dtype=float)
    d = np.asarray(true_logpdf(test_data), dtype=float) - np.asarray(model_logpdf(test_data), dtype=float)
    ok = np.isfinite(d)
    if not np.any(ok):
        raise MetricError("no finite log-density differences")
    v = d[ok]
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
    return MonteCarloKld(float(v.mean()), se, int(v.size), int((~ok).sum()))


def rkld(kld_model: float, kld_ref: float, kld_gauss: float) -> float:
    """0 for the reference model, 1 for the Gaussian fit."""
    den = float(kld_gauss) - float(kld_ref)
    if den == 0:
        raise MetricError("rKLD is undefined when the Gaussian and reference KLDs coincide")
    return (float(kld_model) - float(kld_ref)) / den


def auc(scores, labels) -> float:
    """Probability that a positive (dependent) pair outscores a negative one; ties count half."""
    s = np.asarray(scores, dtype=float).ravel()
    lab = np.asarray(labels, dtype=bool).ravel()
    if s.shape != lab.shape:
        raise MetricError("scores and labels differ in length")
    n_pos, n_neg = int(lab.sum()), int((~lab).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one dependent and one independent pair")
    ranks = rankdata(s)
    return float((ranks[lab].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# --------------------------------------------------------------------------
# benchmark loop


@dataclass
class BenchmarkResult:
    rows: list = field(default_factory=list)  # (method, metric, value, seed, n_train)
    errors: list = field(default_factory=list)
    models: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)

    def value(self, method: str, metric: str) -> float:
        for r in self.rows:
            if r[0] == method and r[1] == metric:
                return r[2]
        raise KeyError((method, metric))

    def to_csv(self) -> str:
        lines = ["method,metric,value,seed,n_train"]
        for m, k, v, s, n in sorted(self.rows, key=lambda r: (r[0], r[1])):
            lines.append(f"{m},{k},{v!r},{s},{n}")
        return "\n".join(lines) + "\n"


def _spearman(a, b) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise MetricError("rank correlation is undefined for constant scores")
    return float(spearmanr(a, b).statistic)


def _pair_vectors(dim, labels):
    rows, cols = np.tril_indices(dim, k=-1)
    us, vs = cols, rows
    dependent = ~np.asarray(labels)[us, vs]
    return list(zip(us.tolist(), vs.tolist())), dependent


def run_ci_benchmark(
    spec: SyntheticSpec,
    n_train: int,
    configs: dict,
    seed: int = 0,
    *,
    n_test: int = 10_000,
    n_samples: int = 2000,
    quad_n: int = 40,
) -> BenchmarkResult:
    """Fit every configured GTM variant and the Gaussian baseline on one draw.

    ``configs`` maps a method name to ``(ModelConfig, PenaltyConfig, FitConfig)``
    with an optional fourth entry ``"adaptive"``, which runs the two-stage
    adaptive fit using the penalty's tau3 in the second stage. Each
    (method, metric) cell is computed independently; failures are recorded in
    ``errors`` and leave the cell as NaN.
    """
    from .independence import ci_metrics
    from .training import fit, fit_adaptive

    y_train, labels = gen_synthetic(spec, n_train, seed=np.random.default_rng([seed, 0]))
    y_test, _ = gen_synthetic(spec, n_test, seed=np.random.default_rng([seed, 1]))
    pairs, dependent = _pair_vectors(spec.dim, labels)
    out = BenchmarkResult()

    def cell(method, metric, fn):
        try:
            v = float(fn())
        except (GtmError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            out.errors.append({"method": method, "metric": metric, "error": f"{type(exc).__name__}: {exc}"})
            v = float("nan")
        out.rows.append((method, metric, v, seed, n_train))
        return v

    try:
        gauss = fit_gaussian(y_train)
        pc = gauss.partial_correlations
        cell("gaussian", "auc_partial_corr", lambda: auc([abs(pc[u, v]) for u, v in pairs], dependent))
        kld_gauss = cell("gaussian", "mc_kld", lambda: mc_kld(spec.log_density, gauss.log_density, y_test))
    except (GtmError, ValueError, np.linalg.LinAlgError) as exc:
        out.errors.append({"method": "gaussian", "metric": "*", "error": f"{type(exc).__name__}: {exc}"})
        kld_gauss = float("nan")

    for method, entry in configs.items():
        mcfg, pen, fcfg = entry[:3]
        adaptive = len(entry) > 3 and entry[3] == "adaptive"
        fcfg = replace(fcfg, seed=int(np.random.default_rng([seed, 2]).integers(2**31)))
        try:
            if adaptive:
                res = fit_adaptive(y_train, mcfg, pen, fcfg)
                model, report = res.model, res.report
            else:
                model, report = fit(y_train, mcfg, pen, fcfg)
            rep = ci_metrics(model, n_samples, quad_n, seed=seed)
        except (GtmError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            out.errors.append({"method": method, "metric": "*", "error": f"{type(exc).__name__}: {exc}"})
            continue
        out.models[method], out.reports[method] = model, rep
        metrics = {p: rep.pair(*p) for p in pairs}
        for name, attr in (("iae", "iae"), ("kld", "kld"), ("mean_abs_p", "mean_abs_p"), ("mean_abs_rho", "mean_abs_rho")):
            cell(method, f"auc_{name}", lambda a=attr: auc([getattr(metrics[p], a) for p in pairs], dependent))
        cell(method, "spearman_rho_iae", lambda: _spearman([metrics[p].mean_abs_rho for p in pairs],
                                                           [metrics[p].iae for p in pairs]))
        k = cell(method, "mc_kld", lambda: mc_kld(spec.log_density, model.log_density, y_test))
        cell(method, "rkld", lambda: rkld(k, 0.0, kld_gauss))
        true_zero = [p for p, d in zip(pairs, dependent) if not d]
        if true_zero:
            cell(method, "mean_abs_p_true_zero", lambda: np.mean([metrics[p].mean_abs_p for p in true_zero]))
    return out
