import numpy as np

from modules.hjb import ValueGrid, grid_axes


def make_grid(params, spec, fn):
    """ValueGrid whose values are fn(t, P, xi, theta) at every node."""
    t, P, xi, theta = np.meshgrid(*grid_axes(params, spec), indexing="ij")
    values = np.asarray(fn(t, P, xi, theta), dtype=float) * np.ones(spec.shape)
    return ValueGrid(spec=spec, params=params, values=values,
                     policy_index=np.zeros(spec.shape, dtype=int))


def minus_p_xi(t, P, xi, theta):
    return -P * xi
