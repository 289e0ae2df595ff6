import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deidkit import _kernels_py as ref
from deidkit import kernels

compiled = pytest.importorskip("deidkit._kernels", reason="compiled extension not built")

shapes = st.tuples(st.integers(0, 9), st.integers(1, 12), st.integers(1, 12), st.sampled_from([0, 1, 2]))


def _arrays(seed, n, d_in, d_out):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(size=(d_out, d_in)),
        rng.normal(size=d_out),
        rng.normal(size=(n, d_in)),
        rng.normal(size=(n, d_out)),
    )


@given(shapes, st.integers(0, 2**32 - 1))
def test_forward_agrees(shape, seed):
    n, d_in, d_out, act = shape
    W, b, x, _ = _arrays(seed, n, d_in, d_out)
    np.testing.assert_allclose(compiled.dense_forward(W, b, x, act), ref.dense_forward(W, b, x, act), rtol=1e-13, atol=1e-14)


@given(shapes, st.integers(0, 2**32 - 1))
def test_backward_agrees(shape, seed):
    n, d_in, d_out, act = shape
    W, b, x, dy = _arrays(seed, n, d_in, d_out)
    y = ref.dense_forward(W, b, x, act)
    for got, want in zip(compiled.dense_backward(W, x, y, dy, act), ref.dense_backward(W, x, y, dy, act)):
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-13)


@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_adam_agrees(size, seed):
    rng = np.random.default_rng(seed)
    p, g, m, v = rng.normal(size=(4, size))
    v = np.abs(v)
    a = [p.copy(), m.copy(), v.copy()]
    b = [p.copy(), m.copy(), v.copy()]
    compiled.adam_update(a[0], g, a[1], a[2], 0.9, 0.999, 1e-3, 1e-8)
    ref.adam_update(b[0], g, b[1], b[2], 0.9, 0.999, 1e-3, 1e-8)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-14, atol=1e-16)


def test_adam_rejects_strided_parameters():
    p = np.zeros((4, 4))[:, ::2]
    with pytest.raises(ValueError):
        compiled.adam_update(p, np.zeros_like(p), np.zeros((4, 2)), np.zeros((4, 2)), 0.0, 0.9, 1e-3, 1e-8)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        compiled.dense_forward(np.ones((2, 3)), np.ones(2), np.ones((1, 4)), 0)


@pytest.mark.parametrize("impl", [ref, compiled], ids=["python", "cython"])
def test_all_finite(impl):
    assert impl.all_finite(np.ones((2, 3)))
    assert impl.all_finite(np.empty(0))
    for bad in (np.nan, np.inf, -np.inf):
        a = np.ones(5)
        a[3] = bad
        assert not impl.all_finite(a)


def test_default_backend_is_compiled():
    if os.environ.get("DEIDKIT_BACKEND", "").lower() == "python":
        pytest.skip("fallback forced by the environment")
    assert kernels.BACKEND == "cython"


def test_environment_forces_fallback():
    code = "from deidkit import kernels; print(kernels.BACKEND, kernels.compiled_available())"
    env = {**os.environ, "DEIDKIT_BACKEND": "python"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["python", "True"]


def test_training_agrees_across_backends():
    # A short optimisation run; backends may differ in the last bits only.
    code = (
        "import numpy as np\n"
        "from deidkit import nn\n"
        "net = nn.init_network([6, 16, 4], seed=5)\n"
        "opt = nn.Trainable([net], learning_rate=1e-2)\n"
        "rng = np.random.default_rng(0)\n"
        "for _ in range(50):\n"
        "    x = rng.normal(size=(8, 6))\n"
        "    out, cache = nn.forward(net, x)\n"
        "    opt.step([nn.backward(net, cache, out)[0]])\n"
        "print(repr(net.weights[0].ravel().tolist()))\n"
    )
    results = []
    for backend in ("python", "cython"):
        env = {**os.environ, "DEIDKIT_BACKEND": backend}
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        results.append(np.array(eval(out.stdout)))
    np.testing.assert_allclose(results[0], results[1], rtol=1e-10, atol=1e-12)
