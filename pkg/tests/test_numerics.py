from __future__ import annotations

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nasprune import numerics as nx
from nasprune.errors import ContractError, DimensionError, GradCheckError
from nasprune.model import SuperNetWeights, forward, init_supernet, lm_loss
from nasprune.search import SubNetworkConfig, estimate_flops

from conftest import perturb
from reference import loop_matmul, scalar_rms_norm


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_matches_triple_loop(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    out = (nx.Tensor(a) @ nx.Tensor(b)).data
    np.testing.assert_allclose(out, loop_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.Tensor(np.zeros((2, 3))) @ nx.Tensor(np.zeros((4, 5)))


def test_rms_norm_matches_scalar_loop():
    rng = np.random.default_rng(0)
    x, g = rng.normal(size=(2, 3, 5)), rng.normal(size=5)
    out = nx.rms_norm(nx.Tensor(x), nx.Tensor(g), 1e-5).data
    np.testing.assert_allclose(out, scalar_rms_norm(x, g, 1e-5), rtol=1e-12)


OPS = {
    "add_broadcast": (lambda a, b: nx.sum_((a + b[0]) * a), [(3, 4), (2, 4)]),
    "sub_mul_div": (lambda a, b: nx.sum_((a - b) * a / (b * b + 1.0)), [(3, 4), (3, 4)]),
    "exp_log": (lambda a, b: nx.sum_(nx.log(nx.exp(a) + nx.exp(b))), [(2, 5), (2, 5)]),
    "silu_sigmoid": (lambda a, b: nx.sum_(nx.silu(a) * nx.sigmoid(b)), [(4, 3), (4, 3)]),
    "matmul_batched": (lambda a, b: nx.sum_((a @ b) * (a @ b)), [(2, 3, 4), (4, 5)]),
    "matmul_both_batched": (lambda a, b: nx.sum_(nx.exp(a @ b)), [(2, 3, 4), (2, 4, 2)]),
    "softmax": (lambda a, b: nx.sum_(nx.softmax(a) * b), [(3, 6), (3, 6)]),
    "log_softmax": (lambda a, b: nx.sum_(nx.log_softmax(a) * b), [(3, 6), (3, 6)]),
    "rms_norm": (lambda a, b: nx.sum_(nx.rms_norm(a, b[0]) * a), [(3, 5), (1, 5)]),
    "l2norm": (lambda a, b: nx.sum_(nx.l2norm(a + b, axis=-1)), [(3, 4), (3, 4)]),
    "mean_reshape_transpose": (lambda a, b: nx.mean(a.reshape(4, 3).transpose(1, 0) @ b), [(3, 4), (4, 2)]),
    "getitem_basic": (lambda a, b: nx.sum_(a[1:, :2] * b[:2, 1:3]), [(3, 4), (3, 4)]),
    "getitem_advanced": (lambda a, b: nx.sum_(a[np.array([0, 2, 0])] * b), [(3, 4), (3, 4)]),
    "take_rows": (lambda a, b: nx.sum_(nx.take(a, np.array([[0, 1], [1, 1]])) * b[0]), [(3, 4), (1, 4)]),
    "take_axis1": (lambda a, b: nx.sum_(nx.take(a, np.array([3, 0, 3]), axis=1) * b), [(2, 4), (2, 3)]),
    "concat": (lambda a, b: nx.sum_(nx.exp(nx.concat([a, b], axis=0))), [(2, 3), (1, 3)]),
    "cross_entropy": (lambda a, b: nx.cross_entropy(a + b, np.array([[0, 3], [2, 1]])), [(2, 2, 4), (2, 2, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    f, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    point = [rng.normal(size=s) for s in shapes]
    assert nx.grad_check(f, point) < 1e-5


def test_backward_accumulates_and_zero_fills_unreached():
    a = nx.Tensor(np.ones(3), requires_grad=True)
    b = nx.Tensor(np.ones(3), requires_grad=True)
    for _ in range(2):
        with nx.Tape() as tape:
            loss = nx.sum_(a * 2.0)
        nx.backward(tape, loss, [a, b])
    np.testing.assert_array_equal(a.grad, 4.0)
    np.testing.assert_array_equal(b.grad, 0.0)


def test_backward_rejects_non_scalar_and_unreachable_loss():
    a = nx.Tensor(np.ones(3), requires_grad=True)
    with nx.Tape() as tape:
        y = a * 2.0
    with pytest.raises(ContractError):
        nx.backward(tape, y)
    with pytest.raises(ContractError):
        nx.backward(tape, nx.Tensor(np.array(1.0)))


def test_no_tape_records_nothing():
    a = nx.Tensor(np.ones(2), requires_grad=True)
    with nx.Tape() as tape:
        pass
    _ = a * 3.0
    assert len(tape) == 0


@pytest.mark.filterwarnings("ignore:invalid value")
def test_grad_check_reports_nonfinite_index():
    with pytest.raises(GradCheckError) as err:
        nx.grad_check(lambda a: nx.sum_(nx.log(a)), [np.array([1.0, 1e-5])], h=1e-4)
    assert err.value.index == (0, 1)


def test_flop_counter_matches_closed_form(tiny_w, tiny_cfg):
    w = SuperNetWeights(tiny_cfg, tiny_w.params)
    for theta in (tiny_cfg.theta_max, SubNetworkConfig(8, 2, 2, 1.0, 1), SubNetworkConfig(16, 4, 1, 2.0, 2)):
        tokens = np.zeros((1, 7), dtype=np.int64)
        with nx.count_flops() as c:
            forward(w, theta, tokens)
        assert 2 * c.mult_adds == estimate_flops(tiny_cfg, theta, 7)


@pytest.mark.parametrize("seed", range(20))
def test_model_gradients_over_seeds(seed, tiny_cfg):
    """Analytic LM-loss gradients of a random sub-network vs central differences."""
    rng = np.random.default_rng(seed)
    w = perturb(init_supernet(tiny_cfg, seed=seed), seed=seed).astype(np.float64)
    theta = SubNetworkConfig(int(rng.choice([8, 16])), int(rng.choice([2, 4])), int(rng.choice([1, 2, 4])),
                             float(rng.choice([1.0, 3.5])), int(rng.integers(1, 4)))
    toks = rng.integers(0, tiny_cfg.vocab_size, size=(2, 6))
    names = sorted(w.params)

    def loss(*leaves):
        tensors = dict(zip(names, leaves))
        return lm_loss(forward(w, theta, toks[:, :-1], tensors=tensors), toks[:, 1:])

    err = nx.grad_check(loss, [w.params[n] for n in names], max_entries=6, rng=rng)
    assert err < 1e-4
