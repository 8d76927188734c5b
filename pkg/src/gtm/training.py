"""Penalised maximum likelihood fitting, adaptive refits and penalty search."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from ._tensor import as_tensor
from .decorrelation import DecorrelationLayer, decorrelate_t, pair_index
from .errors import ConfigError, DataError, FitError
from .marginal import (
    MarginalTransform,
    TransformationLayer,
    marginal_penalty_matrix,
    pretrain_marginal,
)
from .model import GtmModel, std_normal_logpdf_t
from .optim import FitReport, lbfgs
from .splines import KnotGrid

LASSO_MODES = ("none", "lasso", "adaptive")
WEIGHT_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    marginal_basis: int = 15
    conditioner_basis: int = 40
    span: tuple = (-15.0, 15.0)
    linear: bool = False  # every conditioner is a single constant

    def __post_init__(self):
        if self.n_layers < 0:
            raise ConfigError("n_layers must be non-negative")
        if self.marginal_basis < 4 or self.conditioner_basis < 4:
            raise ConfigError("need at least 4 basis functions per spline")
        if not (len(self.span) == 2 and self.span[0] < self.span[1]):
            raise ConfigError("span must be (lower, upper) with lower < upper")

    @property
    def marginal_grid(self) -> KnotGrid:
        return KnotGrid(float(self.span[0]), float(self.span[1]), self.marginal_basis)

    @property
    def conditioner_grid(self) -> KnotGrid:
        return KnotGrid(float(self.span[0]), float(self.span[1]), self.conditioner_basis)


@dataclass(frozen=True)
class PenaltyConfig:
    tau1: float = 0.0
    tau2: float = 0.0
    tau3: float = 0.0
    mode: str = "none"
    tau4: float = 0.0
    adaptive_weights: np.ndarray | None = None
    epsilon_smooth: float = 1e-8

    def __post_init__(self):
        for name in ("tau1", "tau2", "tau3", "tau4", "epsilon_smooth"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a finite non-negative number, got {v!r}")
        if self.mode not in LASSO_MODES:
            raise ConfigError(f"mode must be one of {LASSO_MODES}, got {self.mode!r}")
        if self.mode == "adaptive":
            if self.adaptive_weights is None:
                raise ConfigError("adaptive mode needs adaptive_weights")
            w = np.asarray(self.adaptive_weights, dtype=float)
            rows, cols = pair_index(w.shape[0]) if w.ndim == 2 and w.shape[0] == w.shape[1] else (None, None)
            if rows is None:
                raise ConfigError("adaptive_weights must be a square matrix")
            if not np.all(np.isfinite(w[rows, cols])) or np.any(w[rows, cols] <= 0):
                raise ConfigError("adaptive weights must be finite and strictly positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.adaptive_weights is not None:
            d["adaptive_weights"] = np.asarray(self.adaptive_weights, dtype=float).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        d = dict(d)
        if d.get("adaptive_weights") is not None:
            d["adaptive_weights"] = np.asarray(d["adaptive_weights"], dtype=float)
        return cls(**d)


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 500
    grad_tol: float = 1e-6  # per observation, on the max-norm of the gradient
    rel_obj_tol: float = 1e-10
    validation_fraction: float = 0.2
    patience: int = 20
    seed: int = 0
    lbfgs_memory: int = 10
    pretrain_iters: int = 500

    def __post_init__(self):
        if not 0.0 <= self.validation_fraction < 0.5:
            raise ConfigError("validation_fraction must lie in [0, 0.5)")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.max_iters < 0 or self.lbfgs_memory < 1:
            raise ConfigError("max_iters must be >= 0 and lbfgs_memory >= 1")


# --------------------------------------------------------------------------
# parameter packing


class ParamLayout:
    """Flat parameter vector <-> (marginal thetas, conditioner coefficient blocks).

    In linear mode each conditioner is stored as one number and broadcast to
    all basis coefficients, so it evaluates to a constant.
    """

    def __init__(self, dim, marginal_sizes, n_layers, conditioner_basis, linear=False):
        self.dim = dim
        self.marginal_sizes = list(marginal_sizes)
        self.n_layers = n_layers
        self.n_pairs = dim * (dim - 1) // 2
        self.conditioner_basis = conditioner_basis
        self.linear = linear
        self.block = self.n_pairs * (1 if linear else conditioner_basis)
        self.n_marginal = sum(self.marginal_sizes)
        self.size = self.n_marginal + n_layers * self.block

    @classmethod
    def of(cls, model: GtmModel, linear: bool = False) -> "ParamLayout":
        p = model.layers[0].grid.num_basis if model.layers else 1
        return cls(model.dim, [t.grid.num_basis for t in model.transformation.transforms], model.n_layers, p, linear)

    def split(self, vec):
        thetas, pos = [], 0
        for s in self.marginal_sizes:
            thetas.append(vec[pos : pos + s])
            pos += s
        coeffs = []
        for _ in range(self.n_layers):
            c = vec[pos : pos + self.block]
            pos += self.block
            if self.linear:
                c = c.reshape(self.n_pairs, 1).expand(self.n_pairs, self.conditioner_basis)
            else:
                c = c.reshape(self.n_pairs, self.conditioner_basis)
            coeffs.append(c)
        return thetas, coeffs

    def pack(self, model: GtmModel) -> np.ndarray:
        parts = [np.asarray(t.theta, dtype=float) for t in model.transformation.transforms]
        for layer in model.layers:
            parts.append(layer.coeffs[:, 0] if self.linear else layer.coeffs.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, vec, template: GtmModel) -> GtmModel:
        vec = np.asarray(vec, dtype=float)
        thetas, coeffs = self.split(torch.as_tensor(vec))
        tl = template.transformation
        transforms = [MarginalTransform(t.grid, th.numpy().copy()) for t, th in zip(tl.transforms, thetas)]
        layers = [
            DecorrelationLayer(l.dim, l.grid, c.numpy().copy(), l.flipped) for l, c in zip(template.layers, coeffs)
        ]
        return GtmModel(TransformationLayer(transforms, tl.mean.copy(), tl.sd.copy()), layers, dict(template.meta))


# --------------------------------------------------------------------------
# penalties


def _spline_penalty_t(coeffs, tau1, tau2):
    total = torch.zeros((), dtype=torch.float64)
    if not coeffs or (tau1 == 0 and tau2 == 0):
        return total
    p = coeffs[0].shape[-1]
    for c in coeffs:
        if tau1:
            total = total + tau1 * torch.sum(torch.diff(c, n=1, dim=-1) ** 2)
        if tau2 and p > 2:
            total = total + tau2 * torch.sum(torch.diff(c, n=2, dim=-1) ** 2)
    return total


def spline_penalty(layers, tau1: float, tau2: float) -> float:
    """Sum over every conditioner spline of tau1*||D1 c||^2 + tau2*||D2 c||^2."""
    if tau1 < 0 or tau2 < 0:
        raise ConfigError("penalty weights must be non-negative")
    return float(_spline_penalty_t([as_tensor(l.coeffs) for l in layers], tau1, tau2))


def _pair_weights(weights, dim):
    rows, cols = pair_index(dim)
    w = np.asarray(weights, dtype=float)
    return as_tensor(1.0 / w[rows, cols])


def _precision_offdiag_t(lam: torch.Tensor) -> torch.Tensor:
    dim = lam.shape[-1]
    rows, cols = pair_index(dim)
    P = lam.transpose(-1, -2) @ lam
    return P[..., torch.tensor(rows), torch.tensor(cols)]


def _group_lasso_t(lam, tau3, mode, weights, eps):
    p = _precision_offdiag_t(lam)
    norms = torch.sqrt(torch.sum(p * p, dim=0) + eps)
    if mode == "adaptive":
        norms = norms * _pair_weights(weights, lam.shape[-1])
    return tau3 * norms.sum()


def group_lasso_penalty(layers, data_zt, tau3: float, weights=None, *, mode=None, epsilon_smooth: float = 1e-8) -> float:
    """tau3 * sum over pairs of sqrt(sum_n p_rc(z_n)^2 + eps), optionally divided by w_rc.

    ``mode`` defaults to ``"adaptive"`` when weights are given, else ``"lasso"``.
    """
    if tau3 < 0:
        raise ConfigError("tau3 must be non-negative")
    mode = mode or ("adaptive" if weights is not None else "lasso")
    if mode == "adaptive" and weights is None:
        raise ConfigError("adaptive group lasso needs weights")
    zt = np.atleast_2d(np.asarray(data_zt, dtype=float))
    if zt.shape[0] == 0:
        raise DataError("group lasso penalty needs at least one observation")
    with torch.no_grad():
        _, lam = decorrelate_t(layers, as_tensor(zt), want_lambda=True)
        return float(_group_lasso_t(lam, tau3, mode, weights, epsilon_smooth))


def compute_adaptive_weights(model: GtmModel, data) -> np.ndarray:
    """w_rc = mean over observations of |p_rc|, floored; symmetric, zero diagonal."""
    zt = model.latent(np.atleast_2d(data))
    dim = model.dim
    w = np.zeros((dim, dim))
    rows, cols = pair_index(dim)
    if model.layers:
        with torch.no_grad():
            _, lam = decorrelate_t(model.layers, as_tensor(zt), want_lambda=True)
            p = _precision_offdiag_t(lam).numpy()
        vals = np.mean(np.abs(p), axis=0)
    else:
        vals = np.zeros(len(rows))
    vals = np.maximum(vals, WEIGHT_FLOOR)
    w[rows, cols] = vals
    w[cols, rows] = vals
    return w


# --------------------------------------------------------------------------
# objective


class Objective:
    """Penalised negative log-likelihood of ``data`` as a function of the flat parameters."""

    def __init__(self, template: GtmModel, data, penalties: PenaltyConfig, linear: bool = False):
        self.template = template
        self.layout = ParamLayout.of(template, linear)
        self.data = np.atleast_2d(np.asarray(data, dtype=float))
        self.y = as_tensor(self.data)
        self.penalties = penalties
        d2 = [marginal_penalty_matrix(t.grid) for t in template.transformation.transforms]
        self.d2 = [as_tensor(m) if m is not None else None for m in d2]

    def _terms(self, vec: torch.Tensor):
        pen = self.penalties
        thetas, coeffs = self.layout.split(vec)
        m = self.template
        need_lambda = pen.mode != "none" and pen.tau3 > 0 and m.n_layers > 0
        zt, log_jac = m.transformation.forward_t(self.y, thetas)
        z, lam = decorrelate_t(m.layers, zt, coeffs, want_lambda=need_lambda)
        loglik = std_normal_logpdf_t(z) + log_jac
        terms = {"nll": -loglik.sum(), "spline": _spline_penalty_t(coeffs, pen.tau1, pen.tau2)}
        terms["lasso"] = (
            _group_lasso_t(lam, pen.tau3, pen.mode, pen.adaptive_weights, pen.epsilon_smooth)
            if need_lambda
            else vec.new_zeros(())
        )
        ridge = vec.new_zeros(())
        if pen.tau4:
            for th, d2 in zip(thetas, self.d2):
                if d2 is not None:
                    ridge = ridge + pen.tau4 * torch.sum((d2 @ th[1:]) ** 2)
        terms["ridge"] = ridge
        return terms, loglik

    def value_and_grad(self, x: np.ndarray):
        vec = torch.tensor(np.asarray(x, dtype=float), dtype=torch.float64, requires_grad=True)
        terms, _ = self._terms(vec)
        total = terms["nll"] + terms["spline"] + terms["lasso"] + terms["ridge"]
        if not torch.isfinite(total):
            return math.inf, np.zeros_like(x)
        total.backward()
        return total.item(), vec.grad.numpy().copy()

    def components(self, x: np.ndarray) -> dict:
        with torch.no_grad():
            terms, loglik = self._terms(torch.as_tensor(np.asarray(x, dtype=float)))
        bad = np.flatnonzero(~np.isfinite(loglik.numpy()))
        if bad.size:
            raise FloatingPointError(f"log-density is not finite at observation {int(bad[0])}")
        out = {k: float(v) for k, v in terms.items()}
        out["total"] = out["nll"] + out["spline"] + out["lasso"] + out["ridge"]
        return out

    def value(self, x) -> float:
        return self.components(x)["total"]

    def gradient(self, x) -> np.ndarray:
        self.components(x)
        return self.value_and_grad(x)[1]


def penalized_objective(model: GtmModel, data, penalties: PenaltyConfig, linear: bool = False) -> float:
    obj = Objective(model, data, penalties, linear)
    return obj.value(obj.layout.pack(model))


def gradient(model: GtmModel, data, penalties: PenaltyConfig, linear: bool = False) -> np.ndarray:
    """Gradient of :func:`penalized_objective` in :class:`ParamLayout` order."""
    obj = Objective(model, data, penalties, linear)
    return obj.gradient(obj.layout.pack(model))


# --------------------------------------------------------------------------
# fitting


def _validate_data(data, min_rows_per_dim=10):
    y = np.asarray(data, dtype=float)
    if y.ndim != 2:
        raise DataError("data must be a 2-D array (observations x dimensions)")
    n, dim = y.shape
    if dim < 1:
        raise DataError("data needs at least one column")
    if n < min_rows_per_dim * dim:
        raise DataError(f"need at least {min_rows_per_dim * dim} observations for {dim} dimensions, got {n}")
    bad = np.argwhere(~np.isfinite(y))
    if bad.size:
        raise DataError(f"non-finite value at row {bad[0][0]}, column {bad[0][1]}")
    return y


def split_indices(n: int, validation_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(validation_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _template(dim, model_config: ModelConfig, mean, sd, thetas) -> GtmModel:
    mg, cg = model_config.marginal_grid, model_config.conditioner_grid
    transforms = [MarginalTransform(mg, np.asarray(t, dtype=float)) for t in thetas]
    layers = [DecorrelationLayer.zeros(dim, cg, flipped=(l % 2 == 1)) for l in range(model_config.n_layers)]
    return GtmModel(TransformationLayer(transforms, mean, sd), layers)


def fit(
    data,
    model_config: ModelConfig = ModelConfig(),
    penalties: PenaltyConfig = PenaltyConfig(),
    fit_config: FitConfig = FitConfig(),
    *,
    init_thetas=None,
    callback=None,
) -> tuple[GtmModel, FitReport]:
    """Fit a model by pretraining the marginals and then optimising everything jointly.

    Rows are split into training and validation parts by ``fit_config.seed``.
    The validation log-likelihood is checked after every accepted step; the
    parameters with the best validation score are returned and the run stops
    once ``patience`` steps pass without improvement. ``init_thetas`` skips
    pretraining and starts the marginals from the given parameters.
    """
    t0 = time.perf_counter()
    y = _validate_data(data)
    n, dim = y.shape
    if model_config.n_layers < 1:
        raise ConfigError("fit needs at least one decorrelation layer")
    if penalties.mode == "adaptive":
        w = np.asarray(penalties.adaptive_weights)
        if w.shape != (dim, dim):
            raise ConfigError(f"adaptive weights must be {dim}x{dim}")
    train_idx, val_idx = split_indices(n, fit_config.validation_fraction, fit_config.seed)
    y_train, y_val = y[train_idx], y[val_idx]
    mean = y_train.mean(axis=0)
    sd = y_train.std(axis=0)
    if np.any(sd == 0):
        raise DataError(f"column {int(np.flatnonzero(sd == 0)[0])} is constant in the training rows")

    pretrain_reports = []
    if init_thetas is None:
        init_thetas = []
        for j in range(dim):
            t, rep = pretrain_marginal(
                (y_train[:, j] - mean[j]) / sd[j],
                model_config.marginal_grid,
                penalties.tau4,
                max_iters=fit_config.pretrain_iters,
            )
            init_thetas.append(t.theta)
            pretrain_reports.append(rep.to_dict())
    template = _template(dim, model_config, mean, sd, init_thetas)
    obj = Objective(template, y_train, penalties, model_config.linear)
    x0 = obj.layout.pack(template)

    val_obj = Objective(template, y_val, PenaltyConfig(), model_config.linear) if len(val_idx) else None
    val_trace: list[float] = []
    best = {"x": x0.copy(), "score": -math.inf, "iter": 0}

    def val_loglik(x):
        with torch.no_grad():
            terms, _ = val_obj._terms(torch.as_tensor(x))
        v = -float(terms["nll"]) / len(val_idx)
        return v if math.isfinite(v) else -math.inf

    if val_obj is not None:
        best["score"] = val_loglik(x0)
        val_trace.append(best["score"])

    def on_step(it, x, f):
        stop = False
        if val_obj is not None:
            v = val_loglik(x)
            val_trace.append(v)
            if v > best["score"]:
                best.update(x=x.copy(), score=v, iter=it)
            elif it - best["iter"] >= fit_config.patience:
                stop = True
        if callback is not None and callback(it, x, f):
            stop = True
        return stop

    res = lbfgs(
        obj.value_and_grad,
        x0,
        max_iters=fit_config.max_iters,
        memory=fit_config.lbfgs_memory,
        grad_tol=fit_config.grad_tol * len(train_idx),
        rel_obj_tol=fit_config.rel_obj_tol,
        callback=on_step,
    )
    x_final = best["x"] if val_obj is not None else res.x
    model = obj.layout.unpack(x_final, template)
    zs = (y - mean) / sd
    model.meta.update(
        {
            "seed": fit_config.seed,
            "penalties": penalties.to_dict(),
            "model_config": asdict(model_config),
            "fit_config": asdict(fit_config),
            "data_min": zs.min(axis=0).tolist(),
            "data_max": zs.max(axis=0).tolist(),
            "n_train": int(len(train_idx)),
            "n_validation": int(len(val_idx)),
        }
    )
    report = FitReport(
        objective_trace=res.trace,
        validation_trace=val_trace,
        stop_reason=res.stop_reason,
        wall_time=time.perf_counter() - t0,
        grad_norm=res.grad_norm,
        n_iter=res.n_iter,
        seed=fit_config.seed,
        extra={
            "best_iteration": best["iter"] if val_obj is not None else res.n_iter,
            "best_validation_loglik": best["score"] if val_obj is not None else None,
            "n_eval": res.n_eval,
            "pretrain": pretrain_reports,
            "initial_thetas": [np.asarray(t, dtype=float).tolist() for t in init_thetas],
            "train_index": train_idx.tolist(),
            "validation_index": val_idx.tolist(),
        },
    )
    return model, report


@dataclass
class AdaptiveFit:
    model: GtmModel
    report: FitReport
    stage1_model: GtmModel
    stage1_report: FitReport
    weights: np.ndarray

    def __iter__(self):
        # allows ``model, report = fit_adaptive(...)``
        return iter((self.model, self.report))


def fit_adaptive(
    data,
    model_config: ModelConfig = ModelConfig(),
    penalties: PenaltyConfig = PenaltyConfig(),
    fit_config: FitConfig = FitConfig(),
) -> AdaptiveFit:
    """Unpenalised-LASSO fit, then a refit with adaptive group-LASSO weights.

    Both stages start from the same pretrained marginals and zero conditioners,
    so with ``tau3 = 0`` the second stage repeats the first.
    """
    stage1_pen = replace(penalties, tau3=0.0, mode="none", adaptive_weights=None)
    m1, r1 = fit(data, model_config, stage1_pen, fit_config)
    train = np.asarray(data, dtype=float)[r1.extra["train_index"]]
    w = compute_adaptive_weights(m1, train)
    stage2_pen = replace(penalties, mode="adaptive", adaptive_weights=w)
    m2, r2 = fit(data, model_config, stage2_pen, fit_config, init_thetas=r1.extra["initial_thetas"])
    r2.extra["stage1"] = {"penalties": stage1_pen.to_dict(), "report": r1.to_dict()}
    r2.extra["stage2_penalties"] = stage2_pen.to_dict()
    m2.meta["stage1_penalties"] = stage1_pen.to_dict()
    return AdaptiveFit(m2, r2, m1, r1, w)


# --------------------------------------------------------------------------
# hyperparameter search

DEFAULT_SEARCH_SPACE = {
    "tau1": (1e-4, 1e3),
    "tau2": (1e-4, 1e3),
    "tau3": (1e-4, 1e3),
    "tau4": (1e-4, 1e2),
}


def draw_penalties(search_space: dict, rng: np.random.Generator, mode: str = "lasso") -> PenaltyConfig:
    """Log-uniform draw for every tau in ``search_space``; absent taus are 0."""
    vals = {}
    for name in ("tau1", "tau2", "tau3", "tau4"):
        rng_ = search_space.get(name)
        if rng_ is None:
            vals[name] = 0.0
            continue
        lo, hi = float(rng_[0]), float(rng_[1])
        if not 0 < lo <= hi:
            raise ConfigError(f"search range for {name} must satisfy 0 < low <= high")
        vals[name] = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    if mode == "adaptive":
        raise ConfigError("search over adaptive mode is run through fit_adaptive, use mode='lasso' or 'none'")
    if mode == "none":
        vals["tau3"] = 0.0
    return PenaltyConfig(mode=mode, **vals)


@dataclass
class SearchResult:
    best_penalties: PenaltyConfig
    best_model: GtmModel
    best_report: FitReport
    trials: list


def hyperparameter_search(
    data,
    search_space: dict | None = None,
    n_trials: int = 8,
    seed: int = 0,
    *,
    model_config: ModelConfig = ModelConfig(),
    fit_config: FitConfig = FitConfig(),
    mode: str = "lasso",
) -> SearchResult:
    """Random search over penalties, ranked by validation log-likelihood.

    Trial ``k`` draws from ``default_rng([seed, k])``, so any trial can be
    reproduced on its own. Every trial uses the same train/validation split.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be at least 1")
    space = DEFAULT_SEARCH_SPACE if search_space is None else search_space
    trials, best = [], None
    for k in range(n_trials):
        pen = draw_penalties(space, np.random.default_rng([seed, k]), mode)
        row = {"trial": k, **{t: getattr(pen, t) for t in ("tau1", "tau2", "tau3", "tau4")}, "mode": pen.mode}
        try:
            model, report = fit(data, model_config, pen, fit_config)
            score = report.extra["best_validation_loglik"]
            if score is None:
                score = -report.objective_trace[-1] / max(model.meta["n_train"], 1)
            row.update(validation_loglik=float(score), stop_reason=report.stop_reason, error=None)
            if math.isfinite(score) and (best is None or score > best[0]):
                best = (score, pen, model, report)
        except (FitError, FloatingPointError, ValueError, RuntimeError) as exc:
            row.update(validation_loglik=float("nan"), stop_reason="failed", error=f"{type(exc).__name__}: {exc}")
        trials.append(row)
    if best is None:
        detail = "; ".join(f"trial {r['trial']}: {r['error']}" for r in trials)
        raise FitError(f"all {n_trials} search trials failed ({detail})")
    return SearchResult(best[1], best[2], best[3], trials)
