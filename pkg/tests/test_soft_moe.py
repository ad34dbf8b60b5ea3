import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smetod.autodiff import Tensor, grad_check, tsum
from smetod.errors import DegenerateSliceError, DimensionError, SpecError
from smetod.soft_moe import (
    SoftMoEConfig,
    SoftMoEParams,
    apply_experts,
    combine,
    dispatch,
    parameter_count,
    slot_index_to_expert,
    soft_moe_forward,
)

from . import oracles


def make_params(m, p, dff, d, seed=0, masked=True, scale=1.0):
    rng = np.random.default_rng(seed)
    cfg = SoftMoEConfig(m, p, dff, d, masked)
    return SoftMoEParams(
        cfg,
        Tensor(rng.normal(scale=scale, size=(dff, m * p)), requires_grad=True),
        Tensor(rng.normal(size=(m, dff, d)), requires_grad=True),
        Tensor(rng.normal(size=(m, d)), requires_grad=True),
    )


def oracle_forward(x, params, keep=None):
    return oracles.soft_moe(
        x.tolist(),
        params.phi.data.tolist(),
        params.theta.data.tolist(),
        params.bias.data.tolist(),
        params.config.slots_per_expert,
        keep,
    )


# --- config / params -------------------------------------------------------------


@pytest.mark.parametrize("field", ["num_experts", "slots_per_expert", "d_ff", "d_model"])
def test_config_rejects_non_positive(field):
    kwargs = dict(num_experts=2, slots_per_expert=2, d_ff=3, d_model=2)
    kwargs[field] = 0
    with pytest.raises(SpecError):
        SoftMoEConfig(**kwargs)


def test_config_caps_total_slots():
    SoftMoEConfig(64, 64, 2, 2)
    with pytest.raises(SpecError):
        SoftMoEConfig(65, 64, 2, 2)


def test_params_shape_validation():
    with pytest.raises(DimensionError):
        SoftMoEParams(SoftMoEConfig(2, 2, 3, 2), Tensor(np.zeros((3, 3))), Tensor(np.zeros((2, 3, 2))), Tensor(np.zeros((2, 2))))


@given(m=st.integers(1, 16), p=st.integers(1, 8), dff=st.integers(1, 12), d=st.integers(1, 12))
def test_parameter_count_closed_form(m, p, dff, d):
    params = make_params(m, p, dff, d)
    assert params.parameter_count() == parameter_count(params.config) == dff * m * p + m * (dff * d + d)
    assert params.phi.shape[1] == m * p
    assert len(params.expert_weights) == m and len(params.expert_biases) == m


def test_parameter_count_affine_in_m_at_fixed_total_slots():
    counts = [parameter_count(SoftMoEConfig(m, 32 // m, 128, 64)) for m in (1, 2, 4, 8, 16, 32)]
    steps = np.diff(counts) / np.diff([1, 2, 4, 8, 16, 32])
    assert np.all(steps == 128 * 64 + 64)


# --- slot indexing ---------------------------------------------------------------


@pytest.mark.parametrize("j,expected", [(1, 1), (2, 1), (3, 2)])
def test_slot_index_examples(j, expected):
    assert slot_index_to_expert(j, 2) == expected


@given(m=st.integers(1, 10), p=st.integers(1, 10))
def test_slot_index_blocks_and_surjectivity(m, p):
    owners = [slot_index_to_expert(j, p, m) for j in range(1, m * p + 1)]
    assert owners == [e for e in range(1, m + 1) for _ in range(p)]


def test_slot_index_out_of_range():
    with pytest.raises(IndexError):
        slot_index_to_expert(0, 2)
    with pytest.raises(IndexError):
        slot_index_to_expert(5, 2, m=2)


# --- dispatch ------------------------------------------------------------------


def test_dispatch_single_token():
    x = Tensor([[0.3, -1.2, 2.0]])
    d, xs = dispatch(x, Tensor(np.random.default_rng(1).normal(size=(3, 4))))
    assert d.data.tolist() == [[1.0] * 4]
    np.testing.assert_array_equal(xs.data, np.repeat(x.data, 4, axis=0))


def test_dispatch_two_tokens_oracle():
    x = Tensor([[1.0, 0.0], [0.0, 1.0]])
    phi = Tensor([[1.0], [0.0]])
    d, xs = dispatch(x, phi)
    want = oracles.softmax([1.0, 0.0])
    np.testing.assert_allclose(d.data[:, 0], want, atol=1e-15)
    np.testing.assert_allclose(xs.data[0], want, atol=1e-15)
    np.testing.assert_allclose(d.data[:, 0], [0.731058, 0.268941], atol=1e-6)


def test_dispatch_constant_logits_average_unmasked_tokens():
    # phi column orthogonal to every token difference: all logits equal
    x = np.array([[1.0, 2.0, 0.0], [3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [9.0, 9.0, 0.0]])
    phi = Tensor([[0.0], [0.0], [1.0]])
    mask = np.array([True, True, True, False])
    _, xs = dispatch(Tensor(x), phi, mask)
    np.testing.assert_allclose(xs.data[0], x[:3].mean(axis=0), atol=1e-15)


def test_dispatch_all_masked_raises():
    with pytest.raises(DegenerateSliceError):
        dispatch(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), np.array([False, False]))


# --- experts / combine -----------------------------------------------------------


def test_identity_experts_pass_slots_through():
    cfg = SoftMoEConfig(2, 2, 3, 3)
    params = SoftMoEParams(cfg, Tensor(np.zeros((3, 4))), Tensor(np.stack([np.eye(3)] * 2)), Tensor(np.zeros((2, 3))))
    xs = Tensor(np.random.default_rng(2).normal(size=(4, 3)))
    np.testing.assert_array_equal(apply_experts(xs, params).data, xs.data)


def test_scalar_experts():
    cfg = SoftMoEConfig(2, 1, 2, 2)
    params = SoftMoEParams(cfg, Tensor(np.zeros((2, 2))), Tensor(np.stack([2 * np.eye(2), 3 * np.eye(2)])), Tensor(np.zeros((2, 2))))
    assert apply_experts(Tensor(np.ones((2, 2))), params).data.tolist() == [[2.0, 2.0], [3.0, 3.0]]


def test_apply_experts_against_per_slot_loop():
    params = make_params(3, 2, 4, 3, seed=5)
    xs = np.random.default_rng(5).normal(size=(6, 4))
    got = apply_experts(Tensor(xs), params).data
    for j in range(6):
        e = slot_index_to_expert(j + 1, 2) - 1
        want = oracles.matmul([xs[j].tolist()], params.theta.data[e].tolist())[0]
        np.testing.assert_allclose(got[j], np.add(want, params.bias.data[e]), atol=1e-12)


def test_combine_single_slot_copies_output():
    x = Tensor(np.random.default_rng(3).normal(size=(4, 2)))
    y = combine(x, Tensor(np.ones((2, 1))), Tensor([[1.5, -2.0]]))
    np.testing.assert_array_equal(y.data, np.tile([1.5, -2.0], (4, 1)))


def test_combine_two_slots_oracle():
    y = combine(Tensor([[1.0]]), Tensor([[1.0, 0.0]]), Tensor([[2.0, 0.0], [0.0, 2.0]]))
    w = oracles.softmax([1.0, 0.0])
    np.testing.assert_allclose(y.data[0], [2 * w[0], 2 * w[1]], atol=1e-15)
    np.testing.assert_allclose(y.data[0], [1.462117, 0.537882], atol=1e-6)


def test_combine_identical_slots_give_that_row():
    rng = np.random.default_rng(4)
    r = rng.normal(size=3)
    y = combine(Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(4, 6))), Tensor(np.tile(r, (6, 1))))
    np.testing.assert_allclose(y.data, np.tile(r, (5, 1)), atol=1e-14)


# --- forward ---------------------------------------------------------------------


def test_forward_single_slot_identity_expert_is_identity():
    cfg = SoftMoEConfig(1, 1, 3, 3)
    params = SoftMoEParams(cfg, Tensor(np.ones((3, 1))), Tensor(np.eye(3)[None]), Tensor(np.zeros((1, 3))))
    x = Tensor([[0.5, -1.0, 2.0]])
    np.testing.assert_array_equal(soft_moe_forward(x, params).data, x.data)


def test_forward_against_scalar_oracle():
    params = make_params(2, 2, 3, 2, seed=7)
    x = np.random.default_rng(7).normal(size=(4, 3))
    want, *_ = oracle_forward(x, params)
    np.testing.assert_allclose(soft_moe_forward(Tensor(x), params).data, want, rtol=0, atol=1e-12)


def test_forward_batched_equals_per_example():
    params = make_params(3, 2, 4, 3, seed=8)
    x = np.random.default_rng(8).normal(size=(3, 5, 4))
    batched = soft_moe_forward(Tensor(x), params).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], soft_moe_forward(Tensor(x[b]), params).data, atol=1e-13)


def test_forward_token_permutation_equivariance():
    params = make_params(2, 3, 4, 3, seed=9)
    x = np.random.default_rng(9).normal(size=(6, 4))
    perm = np.random.default_rng(10).permutation(6)
    y = soft_moe_forward(Tensor(x), params).data
    np.testing.assert_allclose(soft_moe_forward(Tensor(x[perm]), params).data, y[perm], atol=1e-12)


def test_masked_padding_leaves_real_tokens_unchanged():
    params = make_params(2, 2, 3, 2, seed=11, masked=True)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 3))
    padded = np.vstack([x, rng.normal(size=(3, 3))])
    mask = np.array([True] * 4 + [False] * 3)
    y = soft_moe_forward(Tensor(x), params).data
    yp = soft_moe_forward(Tensor(padded), params, mask).data
    np.testing.assert_allclose(yp[:4], y, atol=1e-12)
    want, *_ = oracle_forward(padded, params, mask.tolist())
    np.testing.assert_allclose(yp, want, atol=1e-12)


def test_unmasked_padding_changes_real_tokens():
    params = make_params(2, 2, 3, 2, seed=12, masked=False)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(4, 3))
    padded = np.vstack([x, rng.normal(size=(3, 3))])
    mask = np.array([True] * 4 + [False] * 3)
    y = soft_moe_forward(Tensor(x), params).data
    yp = soft_moe_forward(Tensor(padded), params, mask).data
    assert np.max(np.abs(yp[:4] - y)) > 0


def test_forward_gradients():
    params = make_params(2, 2, 3, 2, seed=13)
    x = Tensor(np.random.default_rng(13).normal(size=(4, 3)), requires_grad=True)
    w = Tensor(np.random.default_rng(14).normal(size=(4, 2)))
    report = grad_check(lambda: tsum(soft_moe_forward(x, params) * w), [params.phi, params.theta, params.bias, x])
    assert report.passed(1e-6), str(report)


# --- invariants as properties ------------------------------------------------------


instances = st.fixed_dictionaries(
    {
        "l": st.integers(1, 8),
        "dff": st.integers(1, 6),
        "d": st.integers(1, 4),
        "m": st.integers(1, 4),
        "p": st.integers(1, 3),
        "seed": st.integers(0, 2**32 - 1),
    }
)


@settings(max_examples=80, deadline=None)
@given(instances)
def test_stochasticity_and_hull(inst):
    params = make_params(inst["m"], inst["p"], inst["dff"], inst["d"], inst["seed"], scale=2.0)
    rng = np.random.default_rng(inst["seed"] + 1)
    x = rng.normal(size=(inst["l"], inst["dff"]))
    mask = rng.random(inst["l"]) > 0.3
    mask[0] = True
    D, xs = dispatch(Tensor(x), params.phi, mask)
    assert (D.data >= 0).all()
    np.testing.assert_allclose(D.data.sum(axis=0), 1.0, atol=1e-12)
    lo, hi = x[mask].min(axis=0), x[mask].max(axis=0)
    assert (xs.data >= lo - 1e-12).all() and (xs.data <= hi + 1e-12).all()
    ys = apply_experts(xs, params).data
    y = combine(Tensor(x), params.phi, Tensor(ys)).data
    assert (y >= ys.min(axis=0) - 1e-12).all() and (y <= ys.max(axis=0) + 1e-12).all()


@settings(max_examples=40, deadline=None)
@given(instances)
def test_identical_expert_slot_swap_invariance(inst):
    m, p, dff, d = inst["m"], inst["p"], inst["dff"], inst["d"]
    params = make_params(m, p, dff, d, inst["seed"])
    params.theta.data[:] = params.theta.data[0]
    params.bias.data[:] = params.bias.data[0]
    rng = np.random.default_rng(inst["seed"] + 2)
    x = Tensor(rng.normal(size=(inst["l"], dff)))
    y = soft_moe_forward(x, params).data
    i, j = rng.integers(m * p, size=2)
    cols = np.arange(m * p)
    cols[[i, j]] = cols[[j, i]]
    params.phi.data[:] = params.phi.data[:, cols]
    np.testing.assert_allclose(soft_moe_forward(x, params).data, y, atol=1e-12)
