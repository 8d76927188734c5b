"""Reference implementations that share no code with the package."""

import math

import numpy as np


def cox_de_boor(knots, i, k, x):
    """Textbook recursive B-spline B_{i,k}(x) on an arbitrary knot vector."""
    if k == 0:
        return 1.0 if knots[i] <= x < knots[i + 1] else 0.0
    left = 0.0
    if knots[i + k] != knots[i]:
        left = (x - knots[i]) / (knots[i + k] - knots[i]) * cox_de_boor(knots, i, k - 1, x)
    right = 0.0
    if knots[i + k + 1] != knots[i + 1]:
        right = (knots[i + k + 1] - x) / (knots[i + k + 1] - knots[i + 1]) * cox_de_boor(knots, i + 1, k - 1, x)
    return left + right


def uniform_knots(lower, upper, num_basis, degree=3):
    h = (upper - lower) / (num_basis - degree)
    return [lower + (j - degree) * h for j in range(num_basis + degree + 1)]


def full_basis(lower, upper, num_basis, x, degree=3):
    # padding knots put ``upper`` strictly inside the knot vector, so the
    # half-open recursion is exact on the whole closed interval
    t = uniform_knots(lower, upper, num_basis, degree)
    return np.array([cox_de_boor(t, i, degree, x) for i in range(num_basis)])


def mvn_logpdf(x, cov):
    x = np.atleast_2d(x)
    d = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    q = np.einsum("ni,ij,nj->n", x, np.linalg.inv(cov), x)
    return -0.5 * q - 0.5 * logdet - 0.5 * d * math.log(2 * math.pi)


def numerical_jacobian(f, y, h=1e-6):
    y = np.asarray(y, dtype=float)
    cols = []
    for j in range(y.size):
        e = np.zeros_like(y)
        e[j] = h
        cols.append((f(y + e) - f(y - e)) / (2 * h))
    return np.column_stack(cols)


def finite_diff_grad(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def midpoint_grid(lo, hi, n):
    h = (hi - lo) / n
    return lo + h * (np.arange(n) + 0.5), h
