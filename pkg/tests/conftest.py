import numpy as np
import pytest

from pmvb.deblur import DeblurProblem, blur_observation, build_tv_model, motion_kernel, synthetic_image
from pmvb.gmrf import SparseLinearModel, assemble_system
from pmvb.operators import conv2_operator, finite_difference_operator
from pmvb.potentials import Laplacian


def periodic_model(dims=(10, 10), kernel=None, sigma2=1e-2, tau=15.0, seed=0, potential=None):
    """Small circular-blur TV model with a seeded piecewise-constant image."""
    rng = np.random.default_rng(seed)
    if kernel is None:
        kernel = np.array([[0.05, 0.1, 0.05], [0.1, 0.4, 0.1], [0.05, 0.1, 0.05]])
        if len(dims) == 1:
            kernel = np.array([0.25, 0.5, 0.25])
    H = conv2_operator(kernel, dims)
    if len(dims) == 2:
        x = synthetic_image(dims, seed=seed, n_shapes=4)
    else:
        x = np.repeat(rng.uniform(0, 1, 4), int(np.ceil(dims[0] / 4)))[: dims[0]]
    y = H.forward(x.ravel()) + np.sqrt(sigma2) * rng.standard_normal(H.out_dim)
    pot = potential if potential is not None else Laplacian(tau)
    return SparseLinearModel(H, finite_difference_operator(dims), sigma2, pot, y)


def hetero_gamma(K, seed=0, spread=1.5, center=0.1):
    rng = np.random.default_rng(seed + 1000)
    return center * np.exp(spread * rng.standard_normal(K))


def hetero_system(dims=(10, 10), seed=0, sigma2=1e-2, spread=1.5):
    model = periodic_model(dims, sigma2=sigma2, seed=seed)
    return assemble_system(model, hetero_gamma(model.K, seed, spread))


def masked_problem(obs=(16, 16), ksize=5, sigma2=1e-5, seed=0):
    k = motion_kernel(ksize, angle=30.0)
    sharp = synthetic_image((obs[0] + ksize - 1, obs[1] + ksize - 1), seed=seed)
    y, truth = blur_observation(sharp, k, sigma2, seed=seed + 1)
    return DeblurProblem(y, k, sigma2=sigma2), truth


@pytest.fixture
def small_hetero_system():
    return hetero_system((10, 10))


@pytest.fixture
def masked_model():
    prob, _ = masked_problem()
    return build_tv_model(prob)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
