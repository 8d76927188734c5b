import numpy as np

from gtm.decorrelation import DecorrelationLayer
from gtm.marginal import MarginalTransform, TransformationLayer, identity_theta
from gtm.model import GtmModel
from gtm.splines import KnotGrid

MARGINAL = KnotGrid(-15.0, 15.0, 15)
CONDITIONER = KnotGrid(-15.0, 15.0, 12)


def random_model(rng, dim=2, n_layers=2, theta_scale=0.2, coeff_scale=0.2, standardize=False,
                 marginal_grid=MARGINAL, conditioner_grid=CONDITIONER):
    transforms = []
    for _ in range(dim):
        th = identity_theta(marginal_grid)
        th[0] += 0.3 * rng.normal()
        th[1:] += theta_scale * rng.normal(size=th.size - 1)
        transforms.append(MarginalTransform(marginal_grid, th))
    mean = rng.normal(size=dim) if standardize else np.zeros(dim)
    sd = rng.uniform(0.5, 2.0, size=dim) if standardize else np.ones(dim)
    n_pairs = dim * (dim - 1) // 2
    layers = [
        DecorrelationLayer(dim, conditioner_grid, coeff_scale * rng.normal(size=(n_pairs, conditioner_grid.num_basis)),
                           flipped=(l % 2 == 1))
        for l in range(n_layers)
    ]
    return GtmModel(TransformationLayer(transforms, mean, sd), layers)


def linear_model(dim, values_per_layer, grid=CONDITIONER):
    layers = [DecorrelationLayer.constant(dim, v, grid, flipped=(l % 2 == 1)) for l, v in enumerate(values_per_layer)]
    return GtmModel(TransformationLayer.identity(dim, MARGINAL), layers)
