"""Equivalence of the compiled kernels and the numpy fallback."""

import numpy as np
import pytest

from skyloc import _kernels
from skyloc._kernels import numpy_impl

native = pytest.importorskip("skyloc._kernels._native", reason="native extension not built")


@pytest.mark.parametrize("seed", range(5))
def test_soft_detection_components_agree(seed):
    rng = np.random.default_rng(seed)
    resp = rng.uniform(0.05, 4.0, size=(9, 7, 4))
    for a, b in zip(native.soft_detection_components(resp), numpy_impl.soft_detection_components(resp)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_hard_detect_mask_agree(seed):
    rng = np.random.default_rng(100 + seed)
    resp = rng.uniform(0.05, 4.0, size=(14, 11, 3))
    np.testing.assert_array_equal(native.hard_detect_mask(resp), numpy_impl.hard_detect_mask(resp))


@pytest.mark.parametrize("seed", range(5))
def test_pairwise_sqdist_agree(seed):
    rng = np.random.default_rng(200 + seed)
    a = rng.normal(size=(23, 16))
    b = rng.normal(size=(31, 16))
    np.testing.assert_allclose(
        native.pairwise_sqdist(a, b), numpy_impl.pairwise_sqdist(a, b), rtol=1e-10, atol=1e-12
    )


def test_backend_reports_native():
    assert _kernels.ACTIVE_BACKEND in ("native", "numpy")
    assert _kernels.HAVE_NATIVE == (_kernels.ACTIVE_BACKEND == "native")
