"""Pairwise conditional-independence metrics and dependency graphs.

For a pair (u, v) the model's conditional pair density given the remaining
coordinates is compared with the product of its two conditional margins.
Per sample the log ratio is

    log f(x) + log f(x_rest) - log f(x_without_u) - log f(x_without_v)

where the reduced densities come from integrating out u, v or both with
Gauss-Legendre rules. KLD is the sample mean of the log ratio and IAE is
half the sample mean of |1 - exp(-log ratio)|.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from ._tensor import as_tensor
from .decorrelation import local_precision, local_pseudo_correlation, pair_index
from .errors import ConfigError
from .io import atomic_write_text
from .model import GtmModel
from .splines import gauss_legendre

EXCLUSION_WARN = 0.01
MAX_CHUNK = 2_000_000  # rows per density call


@dataclass(frozen=True)
class PairMetrics:
    u: int
    v: int
    kld: float
    iae: float
    mean_abs_p: float = 0.0
    mean_abs_rho: float = 0.0
    kld_se: float = float("nan")
    iae_se: float = float("nan")
    n_excluded: int = 0

    def __post_init__(self):
        if not self.u < self.v:
            raise ValueError("pair metrics need u < v")


@dataclass
class IndependenceReport:
    pairs: list
    n_samples: int
    quad_n: int
    space: str
    seed: int | None = None
    status: str = "ok"
    bounds: tuple = (-15.0, 15.0)

    @property
    def dim(self) -> int:
        return max(p.v for p in self.pairs) + 1 if self.pairs else 1

    def pair(self, u: int, v: int) -> PairMetrics:
        a, b = min(u, v), max(u, v)
        for p in self.pairs:
            if (p.u, p.v) == (a, b):
                return p
        raise KeyError((u, v))

    def to_csv(self) -> str:
        lines = ["u,v,kld,iae,mean_abs_p,mean_abs_rho"]
        for p in self.pairs:
            lines.append(f"{p.u},{p.v},{p.kld!r},{p.iae!r},{p.mean_abs_p!r},{p.mean_abs_rho!r}")
        return "\n".join(lines) + "\n"


@dataclass
class DependencyGraph:
    n_nodes: int
    edges: dict = field(default_factory=dict)  # (u, v) with u < v -> weight
    names: list | None = None

    def label(self, j: int) -> str:
        return self.names[j] if self.names else str(j)

    def to_csv(self) -> str:
        lines = ["u,v,weight"] + [f"{u},{v},{w!r}" for (u, v), w in sorted(self.edges.items())]
        return "\n".join(lines) + "\n"

    def to_dot(self) -> str:
        out = ["graph dependencies {"]
        for j in range(self.n_nodes):
            out.append(f'  n{j} [label="{self.label(j)}"];')
        for (u, v), w in sorted(self.edges.items()):
            out.append(f'  n{u} -- n{v} [weight={w:.6g}, label="{w:.3f}"];')
        out.append("}")
        return "\n".join(out) + "\n"


def graph_extract(report: IndependenceReport, threshold: float = 0.1, names=None) -> DependencyGraph:
    """Link every pair whose IAE reaches ``threshold``; the edge weight is that IAE."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("threshold must lie in [0, 1]")
    edges = {(p.u, p.v): p.iae for p in report.pairs if p.iae >= threshold}
    return DependencyGraph(report.dim, edges, list(names) if names is not None else None)


# --------------------------------------------------------------------------
# density integrals


def _latent_logpdf(model: GtmModel):
    def f(x: torch.Tensor) -> torch.Tensor:
        return model.latent_log_density_t(x)

    return f


def _data_logpdf(model: GtmModel):
    def f(x: torch.Tensor) -> torch.Tensor:
        return model.log_density_t(x)

    return f


def _eval_chunked(logpdf, pts: torch.Tensor) -> torch.Tensor:
    flat = pts.reshape(-1, pts.shape[-1])
    out = torch.empty(flat.shape[0], dtype=flat.dtype)
    for s in range(0, flat.shape[0], MAX_CHUNK):
        out[s : s + MAX_CHUNK] = logpdf(flat[s : s + MAX_CHUNK])
    return out.reshape(pts.shape[:-1])


def pair_log_ratio(logpdf, x: np.ndarray, u: int, v: int, rule_u, rule_v=None, batch: int = 256):
    """Per-sample log ratio between the joint and independent conditional pair densities.

    ``rule_u`` and ``rule_v`` are one-dimensional quadrature rules along u and
    v; the double integral uses their tensor product.
    """
    if u == v:
        raise ConfigError("u and v must differ")
    rule_v = rule_u if rule_v is None else rule_v
    x = np.atleast_2d(np.asarray(x, dtype=float))
    nu, nv = len(rule_u.nodes), len(rule_v.nodes)
    ndu, ndv = as_tensor(rule_u.nodes), as_tensor(rule_v.nodes)
    lwu, lwv = torch.log(as_tensor(rule_u.weights)), torch.log(as_tensor(rule_v.weights))
    out = np.empty(x.shape[0])
    with torch.no_grad():
        for s in range(0, x.shape[0], batch):
            xb = as_tensor(x[s : s + batch])
            b = xb.shape[0]
            lf = logpdf(xb)
            pu = xb[:, None, :].repeat(1, nu, 1)
            pu[:, :, u] = ndu
            l_no_u = torch.logsumexp(_eval_chunked(logpdf, pu) + lwu, dim=1)
            pv = xb[:, None, :].repeat(1, nv, 1)
            pv[:, :, v] = ndv
            l_no_v = torch.logsumexp(_eval_chunked(logpdf, pv) + lwv, dim=1)
            puv = xb[:, None, None, :].repeat(1, nu, nv, 1)
            puv[:, :, :, u] = ndu[:, None]
            puv[:, :, :, v] = ndv[None, :]
            l2 = _eval_chunked(logpdf, puv) + lwu[:, None] + lwv[None, :]
            l_rest = torch.logsumexp(l2.reshape(b, -1), dim=1)
            out[s : s + b] = (lf + l_rest - l_no_u - l_no_v).numpy()
    return out


def _mean_se(vals):
    m = float(np.mean(vals)) if vals.size else float("nan")
    se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
    return m, se


def pair_metrics_from_ratio(log_ratio: np.ndarray):
    """(kld, kld_se, iae, iae_se, n_excluded) from per-sample log ratios."""
    ok = np.isfinite(log_ratio)
    lr = log_ratio[ok]
    kld, kld_se = _mean_se(lr)
    with np.errstate(over="ignore"):
        terms = 0.5 * np.abs(1.0 - np.exp(-lr))
    terms = terms[np.isfinite(terms)]
    iae, iae_se = _mean_se(terms)
    return kld, kld_se, iae, iae_se, int(log_ratio.size - terms.size)


# --------------------------------------------------------------------------
# public operations


def _check_samples(n_samples):
    if n_samples < 100:
        raise ConfigError(f"need at least 100 samples, got {n_samples}")


def summarize_local(model: GtmModel, n_samples: int = 1000, seed=None, *, latent_samples=None) -> dict:
    """Mean |p| and mean |rho| over model samples, keyed by the pair (u, v) with u < v."""
    if latent_samples is None:
        _check_samples(n_samples)
        latent_samples = model.sample_latent(n_samples, seed)
    prec = local_precision(model.layers, latent_samples).matrix
    rho = local_pseudo_correlation(prec)
    rows, cols = pair_index(model.dim)
    return {
        (int(c), int(r)): (float(np.mean(np.abs(prec[:, r, c]))), float(np.mean(np.abs(rho[:, r, c]))))
        for r, c in zip(rows, cols)
    }


def ci_metrics(
    model: GtmModel,
    n_samples: int = 5000,
    quad_n: int = 40,
    space: str = "latent",
    seed=None,
    *,
    bounds=None,
    pairs=None,
) -> IndependenceReport:
    """KLD and IAE for every pair, plus local precision summaries on the same draws.

    In latent space the integrals run over the span of the marginal
    transforms. In data space they run over the observed range recorded in the
    model (widened by 10%), mapped back to raw units.
    """
    _check_samples(n_samples)
    if quad_n < 8:
        raise ConfigError("quad_n must be at least 8")
    if space not in ("latent", "data"):
        raise ConfigError("space must be 'latent' or 'data'")
    if model.dim < 2:
        raise ConfigError("need at least two dimensions")
    zt = model.sample_latent(n_samples, seed)
    local = summarize_local(model, latent_samples=zt)
    grid0 = model.transformation.transforms[0].grid
    if bounds is None:
        bounds = (grid0.lower, grid0.upper)
    if space == "latent":
        logpdf = _latent_logpdf(model)
        x = zt
        rules = [gauss_legendre(quad_n, *bounds)] * model.dim
    else:
        logpdf = _data_logpdf(model)
        x = model.marginal_inverse(zt)
        lo = np.asarray(model.meta.get("data_min", [bounds[0]] * model.dim), dtype=float)
        hi = np.asarray(model.meta.get("data_max", [bounds[1]] * model.dim), dtype=float)
        pad = 0.1 * (hi - lo)
        t = model.transformation
        rules = [gauss_legendre(quad_n, t.mean[j] + t.sd[j] * (lo[j] - pad[j]), t.mean[j] + t.sd[j] * (hi[j] + pad[j]))
                 for j in range(model.dim)]
    if pairs is None:
        rows, cols = pair_index(model.dim)
        pairs = [(int(c), int(r)) for r, c in zip(rows, cols)]
    out, total_excluded = [], 0
    for u, v in pairs:
        lr = pair_log_ratio(logpdf, x, u, v, rules[u], rules[v])
        kld, kse, iae, ise, nex = pair_metrics_from_ratio(lr)
        total_excluded += nex
        a, b = min(u, v), max(u, v)
        mp, mr = local[(a, b)]
        out.append(PairMetrics(a, b, kld, min(max(iae, 0.0), 1.0), mp, mr, kse, ise, nex))
    status = "ok"
    if total_excluded > EXCLUSION_WARN * n_samples * len(pairs):
        status = "warning"
        warnings.warn(f"{total_excluded} sample evaluations excluded for non-finite densities", RuntimeWarning)
    return IndependenceReport(out, int(n_samples), int(quad_n), space, seed, status, tuple(bounds))


def write_report(report: IndependenceReport, csv_path, dot_path=None, threshold: float = 0.1, names=None):
    atomic_write_text(csv_path, report.to_csv())
    if dot_path is not None:
        atomic_write_text(dot_path, graph_extract(report, threshold, names).to_dot())
