import numpy as np
import pytest

from hgwavenet import autodiff as ad
from hgwavenet.autodiff import GradientTape, Tensor
from hgwavenet.layers import _csr_parts
from hgwavenet.manifold import exp_map_origin, log_map_origin

import scipy.sparse as sp

R = np.random.default_rng(7)


def _attn_case():
    a = sp.random(6, 6, density=0.4, random_state=3, format="csr") + sp.eye(6)
    a = sp.lil_matrix(a.multiply(1.0 / a.sum(axis=1)))
    a[5] = 0  # one empty row exercises the fallback branch
    a = sp.csr_matrix(a)
    a.eliminate_zeros()
    indptr, indices, logw = _csr_parts(a)
    return ([R.normal(size=6), R.normal(size=6), R.normal(size=(6, 3)), indptr, indices, logw],
            {"slope": 0.2}, [0, 1, 2])


# name -> (inputs, kwargs, indices of differentiable inputs)
CASES = {
    "add": ([R.normal(size=(3, 4)), R.normal(size=(4,))], {}, [0, 1]),
    "sub": ([R.normal(size=(3, 1)), R.normal(size=(3, 4))], {}, [0, 1]),
    "mul": ([R.normal(size=(3, 4)), R.normal(size=(3, 1))], {}, [0, 1]),
    "div": ([R.normal(size=(3, 4)), R.uniform(1, 2, size=(4,))], {}, [0, 1]),
    "neg": ([R.normal(size=(5,))], {}, [0]),
    "power": ([R.uniform(0.5, 2, size=(4,))], {"p": 3.0}, [0]),
    "exp": ([R.normal(size=(4,))], {}, [0]),
    "log": ([R.uniform(0.5, 2, size=(4,))], {}, [0]),
    "sqrt": ([R.uniform(0.5, 2, size=(4,))], {}, [0]),
    "tanh": ([R.normal(size=(4,))], {}, [0]),
    "atanh": ([R.uniform(-0.9, 0.9, size=(4,))], {}, [0]),
    "sigmoid": ([R.normal(size=(4,))], {}, [0]),
    "softplus": ([R.normal(size=(4,)) * 3], {}, [0]),
    "leaky_relu": ([np.array([-1.3, -0.2, 0.4, 2.0])], {"slope": 0.2}, [0]),
    "clip": ([np.array([-2.0, -0.5, 0.3, 1.7])], {"lo": -1.0, "hi": 1.0}, [0]),
    "sum": ([R.normal(size=(3, 4))], {"axis": 1, "keepdims": False}, [0]),
    "matmul": ([R.normal(size=(2, 3, 4)), R.normal(size=(4, 5))], {}, [0, 1]),
    "norm": ([R.normal(size=(3, 4))], {"eps": 1e-15}, [0]),
    "take": ([R.normal(size=(5, 2))], {"index": np.array([0, 3, 3, 1])}, [0]),
    "reshape": ([R.normal(size=(2, 6))], {"shape": (3, 4)}, [0]),
    "concat": ([R.normal(size=(2, 3)), R.normal(size=(1, 3))], {"axis": 0}, [0, 1]),
    "stack": ([R.normal(size=(2, 3)), R.normal(size=(2, 3))], {"axis": 1}, [0, 1]),
    "softmax": ([R.normal(size=(3, 4))], {"axis": 0}, [0]),
    "ball_project": ([R.normal(size=(4, 3)), 1.3], {}, [0, 1]),
    "transpose": ([R.normal(size=(3, 4))], {}, [0]),
    "attention_aggregate": _attn_case(),
}


def test_every_primitive_has_a_case():
    assert set(CASES) == set(ad.PRIMITIVES)


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_adjoint_matches_fd(name):
    inputs, kwargs, diff = CASES[name]
    prim = ad.get_primitive(name)

    def fwd(*xs):
        out = prim.forward(*xs, **kwargs)
        return out[0] if prim.has_aux else out

    out = fwd(*inputs)
    g = np.random.default_rng(1).normal(size=np.shape(out))
    tensors = [Tensor(x, requires_grad=True) if i in diff else x for i, x in enumerate(inputs)]
    with GradientTape() as tape:
        y = ad._apply(name, *tensors, **kwargs)
        loss = ad.sum_(ad.mul(y, g))
    grads = tape.gradient(loss, [tensors[i] for i in diff])
    h = 1e-6
    for gi, i in zip(grads, diff):
        base = np.array(inputs[i], dtype=float)
        fd = np.zeros_like(base)
        for k in np.ndindex(base.shape):
            up, dn = base.copy(), base.copy()
            up[k] += h
            dn[k] -= h
            args_up = list(inputs)
            args_up[i] = up
            args_dn = list(inputs)
            args_dn[i] = dn
            fd[k] = (np.sum(fwd(*args_up) * g) - np.sum(fwd(*args_dn) * g)) / (2 * h)
        np.testing.assert_allclose(gi, fd, rtol=1e-6, atol=1e-7, err_msg=f"{name} input {i}")


def test_constant_loss_zero_gradients():
    p = Tensor(np.ones(3), requires_grad=True)
    with GradientTape() as tape:
        loss = Tensor(5.0)
    assert np.all(tape.gradient(loss, [p])[0] == 0)


def test_identity_round_trip_gradient():
    v0 = np.array([[0.3, -0.7, 0.2]])
    v = Tensor(v0, requires_grad=True)
    with GradientTape() as tape:
        w = log_map_origin(exp_map_origin(v, 1.0), 1.0)
        loss = ad.mul(0.5, ad.sum_(ad.mul(w, w)))
    np.testing.assert_allclose(tape.gradient(loss, [v])[0], v0, atol=1e-6)


def test_unregistered_primitive_is_named():
    with pytest.raises(ad.UnregisteredPrimitiveError, match="frobnicate"):
        ad._apply("frobnicate", Tensor(1.0, requires_grad=True))


def test_missing_adjoint_is_named():
    ad.defprim("no_vjp_test", lambda a: a * 2.0)
    x = Tensor(np.ones(2), requires_grad=True)
    with GradientTape() as tape:
        y = ad.sum_(ad._apply("no_vjp_test", x))
    with pytest.raises(ad.UnregisteredPrimitiveError, match="no_vjp_test"):
        tape.gradient(y, [x])
    del ad.PRIMITIVES["no_vjp_test"]


def test_override_adjoint_restores():
    prim = ad.get_primitive("exp")
    orig = prim.vjp
    x = Tensor(np.zeros(2), requires_grad=True)
    with ad.override_adjoint("exp", lambda g, o, a: (3 * g * o,)):
        with GradientTape() as tape:
            y = ad.sum_(ad.exp(x))
        np.testing.assert_allclose(tape.gradient(y, [x])[0], 3.0)
    assert prim.vjp is orig


def test_replay_is_bit_exact_and_detects_tampering():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    with GradientTape() as tape:
        y = ad.sum_(ad.tanh(exp_map_origin(x, 0.7)))
    assert tape.replay()
    out = tape.nodes[-1].output
    out.value = np.nextafter(out.value, np.inf)  # one ulp
    assert not tape.replay()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with GradientTape() as tape:
        with ad.no_grad():
            ad.exp(x)
        assert len(tape.nodes) == 0
        ad.exp(x)
    assert len(tape.nodes) == 1


def test_fan_out_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with GradientTape() as tape:
        y = ad.add(ad.mul(x, x), ad.mul(3.0, x))
    np.testing.assert_allclose(tape.gradient(y, [x])[0], [7.0])


def test_norm_at_zero_has_zero_gradient():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    with GradientTape() as tape:
        y = ad.sum_(ad.norm(x, eps=0.0))
    assert np.all(tape.gradient(y, [x])[0] == 0)
