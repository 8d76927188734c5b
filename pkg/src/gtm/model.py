"""The assembled model: density, latent maps, sampling and persistence."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import gaussian_kde

from ._tensor import as_tensor
from .decorrelation import (
    DEFAULT_CONDITIONER_GRID,
    DecorrelationLayer,
    LocalPrecision,
    decorrelate_t,
    local_precision,
    pair_index,
    stack_inverse,
)
from .errors import ConfigError, ModelFormatError, SamplingError
from .io import atomic_write_text
from .marginal import (
    DEFAULT_MARGINAL_GRID,
    LOG_SQRT_2PI,
    InverseTransform,
    MarginalTransform,
    TransformationLayer,
    invert_fit,
)
from .splines import KnotGrid, gauss_legendre

FORMAT_VERSION = 1
CHUNK = 200_000


def std_normal_logpdf_t(z: torch.Tensor) -> torch.Tensor:
    return -0.5 * (z * z).sum(-1) - z.shape[-1] * LOG_SQRT_2PI


@dataclass
class GtmModel:
    transformation: TransformationLayer
    layers: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    inverse: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for l, layer in enumerate(self.layers):
            if layer.dim != self.dim:
                raise ConfigError(f"layer {l} has dimension {layer.dim}, model has {self.dim}")

    @property
    def dim(self) -> int:
        return self.transformation.dim

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def identity(
        cls,
        dim: int,
        n_layers: int = 0,
        marginal_grid: KnotGrid = DEFAULT_MARGINAL_GRID,
        conditioner_grid: KnotGrid = DEFAULT_CONDITIONER_GRID,
    ) -> "GtmModel":
        """Independence model: identity marginals and zero-coefficient layers."""
        layers = [DecorrelationLayer.zeros(dim, conditioner_grid, flipped=(l % 2 == 1)) for l in range(n_layers)]
        return cls(TransformationLayer.identity(dim, marginal_grid), layers)

    # ------------------------------------------------------------------ core

    def forward_t(self, y: torch.Tensor, thetas=None, coeffs=None, want_lambda=False):
        zt, log_jac = self.transformation.forward_t(y, thetas)
        z, lam = decorrelate_t(self.layers, zt, coeffs, want_lambda)
        return z, zt, log_jac, lam

    def log_density_t(self, y: torch.Tensor, thetas=None, coeffs=None) -> torch.Tensor:
        z, _, log_jac, _ = self.forward_t(y, thetas, coeffs)
        return std_normal_logpdf_t(z) + log_jac

    def latent_log_density_t(self, zt: torch.Tensor) -> torch.Tensor:
        """log density of z_tilde; the layers have unit Jacobian."""
        z, _ = decorrelate_t(self.layers, zt)
        return std_normal_logpdf_t(z)

    # ----------------------------------------------------------- numpy API

    def _rows(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {y.shape[-1]}")
        if not np.all(np.isfinite(y)):
            raise ValueError("input must be finite")
        return y

    def forward(self, y):
        """Map data to ``(z, z_tilde, log_jacobian)``."""
        y = self._rows(y)
        with torch.no_grad():
            z, zt, lj, _ = self.forward_t(as_tensor(y))
        return z.numpy(), zt.numpy(), lj.numpy()

    def latent(self, y) -> np.ndarray:
        with torch.no_grad():
            return self.transformation.forward_t(as_tensor(self._rows(y)))[0].numpy()

    def log_density(self, y) -> np.ndarray:
        y = self._rows(y)
        flat = y.reshape(-1, self.dim)
        out = np.empty(flat.shape[0])
        with torch.no_grad():
            for s in range(0, flat.shape[0], CHUNK):
                out[s : s + CHUNK] = self.log_density_t(as_tensor(flat[s : s + CHUNK])).numpy()
        return out.reshape(y.shape[:-1]) if y.ndim > 1 else out[0]

    def latent_log_density(self, zt) -> np.ndarray:
        zt = self._rows(zt)
        flat = zt.reshape(-1, self.dim)
        out = np.empty(flat.shape[0])
        with torch.no_grad():
            for s in range(0, flat.shape[0], CHUNK):
                out[s : s + CHUNK] = self.latent_log_density_t(as_tensor(flat[s : s + CHUNK])).numpy()
        return out.reshape(zt.shape[:-1]) if zt.ndim > 1 else out[0]

    def local_precision(self, zt) -> LocalPrecision:
        return local_precision(self.layers, zt)

    # -------------------------------------------------------------- inverse

    def build_inverse(self, grid_size: int = 10_000) -> list:
        """Fit the numeric inverse of every marginal transform.

        The fit covers the stored data range widened by 10% on each side,
        joined with the marginal knot span so the linear tails invert exactly.
        """
        lo = self.meta.get("data_min")
        hi = self.meta.get("data_max")
        inverse = []
        for j, t in enumerate(self.transformation.transforms):
            a, b = t.grid.lower, t.grid.upper
            if lo is not None and hi is not None:
                w = hi[j] - lo[j]
                a, b = min(a, lo[j] - 0.1 * w), max(b, hi[j] + 0.1 * w)
            inverse.append(invert_fit(t, grid_size, a, b))
        self.inverse = inverse
        return inverse

    def marginal_inverse(self, zt) -> np.ndarray:
        zt = np.asarray(zt, dtype=float)
        if self.inverse is None:
            self.build_inverse()
        x = np.column_stack([inv(zt[..., j]) for j, inv in enumerate(self.inverse)]) if zt.ndim > 1 else \
            np.array([inv(zt[j]) for j, inv in enumerate(self.inverse)])
        return self.transformation.mean + self.transformation.sd * x

    def inverse_latent(self, z) -> np.ndarray:
        """z -> z_tilde through the layers in reverse order."""
        return stack_inverse(self.layers, z) if self.layers else np.asarray(z, dtype=float).copy()

    def sample_latent(self, n: int, seed=None, return_z: bool = False):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((int(n), self.dim))
        zt = self.inverse_latent(z) if n else z.copy()
        return (zt, z) if return_z else zt

    def sample(self, n: int, seed=None, return_z: bool = False):
        """Draw ``n`` observations by inverting the model on standard normal draws."""
        if n < 0:
            raise ValueError("n must be non-negative")
        built = self.inverse is None
        zt, z = self.sample_latent(n, seed, return_z=True)
        y = self.marginal_inverse(zt) if n else np.empty((0, self.dim))
        if built:
            self.meta.setdefault("inverse_built_on_demand", True)
        return (y, z) if return_z else y

    # ------------------------------------------------------ conditional sampling

    def conditional_log_norm(self, anchor, u: int, v: int, quad_n: int = 60, bounds=None) -> float:
        """log f(y_rest) for the conditioning coordinates of ``anchor``.

        The double integral over (y_u, y_v) is done in the latent space with a
        tensor Gauss-Legendre rule; the marginal Jacobians of the remaining
        coordinates carry it back to data units.
        """
        anchor = self._rows(anchor)
        zt = self.latent(anchor[None, :])[0]
        rest = [j for j in range(self.dim) if j not in (u, v)]
        lj = 0.0
        for j in rest:
            _, ldj = self.transformation.transforms[j].forward(
                (anchor[j] - self.transformation.mean[j]) / self.transformation.sd[j]
            )
            lj += float(ldj) - math.log(self.transformation.sd[j])
        if bounds is None:
            bounds = (self.transformation.transforms[0].grid.lower, self.transformation.transforms[0].grid.upper)
        rule = gauss_legendre(quad_n, *bounds)
        a, b = np.meshgrid(rule.nodes, rule.nodes, indexing="ij")
        pts = np.repeat(zt[None, :], a.size, axis=0)
        pts[:, u], pts[:, v] = a.ravel(), b.ravel()
        w = np.outer(rule.weights, rule.weights).ravel()
        lf = self.latent_log_density(pts)
        m = lf.max()
        return float(m + np.log(np.sum(w * np.exp(lf - m)))) + lj

    def conditional_sample(
        self,
        anchor,
        u: int,
        v: int,
        n_candidates: int = 10_000,
        n_accept: int = 1000,
        seed=None,
        *,
        quad_n: int = 60,
        proposal_correction: bool = True,
        return_info: bool = False,
    ):
        """Draw (y_u, y_v) given the other coordinates of ``anchor``.

        Candidates for y_u and y_v come from independent model draws. Each
        candidate is weighted by its conditional density, divided by a kernel
        estimate of the candidate's own marginal density when
        ``proposal_correction`` is set, and the output is a multinomial
        resample of size ``n_accept``.
        """
        if u == v:
            raise ConfigError("u and v must differ")
        if not (0 <= u < self.dim and 0 <= v < self.dim):
            raise ConfigError("u and v must be valid dimensions")
        if n_accept > n_candidates:
            raise ConfigError(f"n_accept={n_accept} exceeds n_candidates={n_candidates}")
        anchor = self._rows(anchor)
        rng = np.random.default_rng(seed)
        seeds = rng.integers(0, 2**63 - 1, size=2)
        cu = self.sample(n_candidates, seed=int(seeds[0]))[:, u]
        cv = self.sample(n_candidates, seed=int(seeds[1]))[:, v]
        pts = np.repeat(anchor[None, :], n_candidates, axis=0)
        pts[:, u], pts[:, v] = cu, cv
        log_joint = self.log_density(pts)
        log_norm = self.conditional_log_norm(anchor, u, v, quad_n=quad_n)
        log_cond = log_joint - log_norm
        logw = log_cond.copy()
        if proposal_correction:
            logw -= np.log(gaussian_kde(cu)(cu)) + np.log(gaussian_kde(cv)(cv))
        ok = np.isfinite(logw)
        if not np.any(ok) or np.max(logw[ok]) == -np.inf:
            raise SamplingError(f"all candidate weights vanish at anchor {anchor.tolist()}; density there is negligible")
        w = np.where(ok, np.exp(logw - np.max(logw[ok])), 0.0)
        if w.sum() <= 0:
            raise SamplingError("all candidate weights are zero")
        idx = rng.choice(n_candidates, size=n_accept, replace=True, p=w / w.sum())
        out = np.column_stack([cu[idx], cv[idx]])
        if return_info:
            ess = float(w.sum() ** 2 / np.sum(w * w))
            return out, {"log_norm": log_norm, "effective_sample_size": ess, "log_cond": log_cond}
        return out

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        rows, cols = pair_index(self.dim)
        t = self.transformation
        return {
            "format_version": FORMAT_VERSION,
            "J": self.dim,
            "L": self.n_layers,
            "standardization": [{"mean": float(m), "sd": float(s)} for m, s in zip(t.mean, t.sd)],
            "marginal_grids": [m.grid.to_dict() for m in t.transforms],
            "marginal_theta": [[float(x) for x in m.theta] for m in t.transforms],
            "layer": [
                {
                    "flipped": bool(layer.flipped),
                    "grid": layer.grid.to_dict(),
                    "splines": [
                        {"r": int(r), "c": int(c), "coeffs": [float(x) for x in layer.coeffs[p]]}
                        for p, (r, c) in enumerate(zip(rows, cols))
                    ],
                }
                for layer in self.layers
            ],
            "meta": _jsonable(self.meta),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GtmModel":
        return _model_from_dict(doc)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _need(doc, key, typ, where="model"):
    if not isinstance(doc, dict) or key not in doc:
        raise ModelFormatError(f"{where}: missing field '{key}'")
    val = doc[key]
    if typ is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
        raise ModelFormatError(f"{where}: field '{key}' has the wrong type")
    return val


def _grid(d, where) -> KnotGrid:
    try:
        return KnotGrid(
            _need(d, "lower", float, where), _need(d, "upper", float, where),
            _need(d, "num_basis", int, where), _need(d, "degree", int, where),
        )
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{where}: {exc}") from None


def _floats(seq, n, where) -> np.ndarray:
    if not isinstance(seq, list) or len(seq) != n:
        raise ModelFormatError(f"{where}: expected a list of {n} numbers")
    try:
        arr = np.array(seq, dtype=float)
    except (TypeError, ValueError):
        raise ModelFormatError(f"{where}: non-numeric entry") from None
    if not np.all(np.isfinite(arr)):
        raise ModelFormatError(f"{where}: non-finite entry")
    return arr


def _model_from_dict(doc) -> GtmModel:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    version = _need(doc, "format_version", int)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {version} (this build reads {FORMAT_VERSION})")
    dim = _need(doc, "J", int)
    n_layers = _need(doc, "L", int)
    if dim < 1 or n_layers < 0:
        raise ModelFormatError("field 'J' must be positive and 'L' non-negative")
    std = _need(doc, "standardization", list)
    grids = _need(doc, "marginal_grids", list)
    thetas = _need(doc, "marginal_theta", list)
    layers_doc = _need(doc, "layer", list)
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise ModelFormatError("field 'meta' must be an object")
    for name, seq, n in (("standardization", std, dim), ("marginal_grids", grids, dim),
                         ("marginal_theta", thetas, dim), ("layer", layers_doc, n_layers)):
        if len(seq) != n:
            raise ModelFormatError(f"field '{name}' has {len(seq)} entries, expected {n}")
    mean = np.array([_need(s, "mean", float, f"standardization[{j}]") for j, s in enumerate(std)])
    sd = np.array([_need(s, "sd", float, f"standardization[{j}]") for j, s in enumerate(std)])
    if np.any(sd <= 0):
        raise ModelFormatError("field 'standardization': sd must be positive")
    transforms = []
    for j in range(dim):
        g = _grid(grids[j], f"marginal_grids[{j}]")
        transforms.append(MarginalTransform(g, _floats(thetas[j], g.num_basis, f"marginal_theta[{j}]")))
    rows, cols = pair_index(dim)
    layers = []
    for l, ld in enumerate(layers_doc):
        where = f"layer[{l}]"
        flipped = _need(ld, "flipped", bool, where)
        g = _grid(_need(ld, "grid", dict, where), f"{where}.grid")
        splines = _need(ld, "splines", list, where)
        if len(splines) != len(rows):
            raise ModelFormatError(f"{where}.splines: expected {len(rows)} entries, got {len(splines)}")
        coeffs = np.empty((len(rows), g.num_basis))
        seen = set()
        for s in splines:
            r = _need(s, "r", int, f"{where}.splines")
            c = _need(s, "c", int, f"{where}.splines")
            if not 0 <= c < r < dim or (r, c) in seen:
                raise ModelFormatError(f"{where}.splines: invalid or duplicate pair ({r}, {c})")
            seen.add((r, c))
            coeffs[r * (r - 1) // 2 + c] = _floats(_need(s, "coeffs", list, f"{where}.splines"), g.num_basis,
                                                    f"{where}.splines[({r},{c})].coeffs")
        layers.append(DecorrelationLayer(dim, g, coeffs, flipped))
    return GtmModel(TransformationLayer(transforms, mean, sd), layers, dict(meta))


def save(model: GtmModel, path) -> None:
    """Write the model as a versioned JSON document (floats round-trip exactly)."""
    atomic_write_text(path, json.dumps(model.to_dict(), indent=1, allow_nan=False) + "\n")


def load(path) -> GtmModel:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a valid model file ({exc.msg} at line {exc.lineno})") from None
    return _model_from_dict(doc)
