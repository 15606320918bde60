import numpy as np
import pytest


def numeric_gradient(loss_fn, tensor, step=1e-5):
    """Central finite differences of a scalar loss w.r.t. one tensor.

    Independent oracle: perturbs raw array entries and re-evaluates the loss,
    never touching the backward machinery.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = loss_fn().item()
        flat[i] = orig - step
        minus = loss_fn().item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def max_rel_error(analytic, numeric):
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def rs():
    return np.random.RandomState(1234)
