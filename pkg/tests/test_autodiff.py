import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pararev import numeric as nm
from pararev.autodiff import (BackwardError, MemoryMeter, Subnetwork, backward, gradcheck_differentiable_path,
                              measure_peak_memory, relative_difference)
from pararev.network import ArchSpec, build
from pararev.scheduler import backward_plan, forward_plan, run_plan
from pararev.verify import gradcheck_cases, policy_equivalence, policy_gradients


def linear_runners(coef):
    """Scalar test doubles ``F_k(v) = c v`` for the plan runners."""
    def fwd(task):
        c = coef[task.kind, task.block]
        if task.kind == "M":
            cg, cf = c
            return lambda v: (cg * v, cf * v)
        return lambda v: (c * v,)

    def bwd(task):
        c = coef[task.kind, task.block]
        if task.kind == "M":
            cg, cf = c
            return lambda v, g: (cg * v, cf * v, (cg + cf) * g)
        return lambda v, g: (c * v, c * g)

    return fwd, bwd


def coefficients(flavor, B, rng):
    coef = {}
    for k in range(B):
        coef["F", k] = float(rng.uniform(-2, 2))
        coef["G", k] = float(rng.uniform(-2, 2))
    if flavor == "pararev-fused":
        for k in range(B - 1):
            coef["M", k] = (coef["G", k], coef["F", k + 1])
    return coef


def test_single_pararev_block_hand_chain_rule():
    # y2 = x1 + G(x2 + F(x1)) with F = 2v, G = 3v: dy2/dx1 = 1 + 3 * 2 = 7
    fwd, bwd = linear_runners({("F", 0): 2.0, ("G", 0): 3.0})
    one = np.array([1.0])
    y = run_plan(forward_plan("pararev", 1), {"x1": one, "x2": 2 * one}, fwd)
    assert (y["y1"][0], y["y2"][0]) == (4.0, 13.0)
    out = run_plan(backward_plan("pararev", 1),
                   {"y1": y["y1"], "y2": y["y2"], "dy1": 0 * one, "dy2": one}, bwd)
    assert out["dx1"][0] == 7.0
    assert out["dx2"][0] == 3.0
    assert (out["x1"][0], out["x2"][0]) == (1.0, 2.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["baseline", "pararev", "pararev-fused"]), st.integers(1, 6))
def test_backward_plan_matches_forward_jacobian(seed, flavor, B):
    if flavor == "pararev-fused" and B < 2:
        B = 2
    rng = np.random.default_rng(seed)
    fwd, bwd = linear_runners(coefficients(flavor, B, rng))
    x1, x2 = rng.standard_normal(1), rng.standard_normal(1)
    fp = forward_plan(flavor, B)
    y = run_plan(fp, {"x1": x1, "x2": x2}, fwd)
    # linear map: Jacobian columns from unit inputs
    J = np.array([[run_plan(fp, {"x1": np.array([a]), "x2": np.array([b])}, fwd)[k][0]
                   for (a, b) in ((1.0, 0.0), (0.0, 1.0))] for k in ("y1", "y2")])
    d = rng.standard_normal(2)
    out = run_plan(backward_plan(flavor, B),
                   {"y1": y["y1"], "y2": y["y2"], "dy1": d[:1], "dy2": d[1:]}, bwd)
    np.testing.assert_allclose([out["dx1"][0], out["dx2"][0]], J.T @ d, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose([out["x1"][0], out["x2"][0]], [x1[0], x2[0]], rtol=1e-9, atol=1e-9)


# -- whole networks -------------------------------------------------------------


def small_net(flavor="pararev", blocks=(2, 2), seed=0, **kw):
    spec = ArchSpec(blocks=blocks, widths=(4, 8)[:len(blocks)], flavor=flavor, timesteps=2, num_classes=3, **kw)
    return build(spec, seed=seed)


def batch(seed=0, n=2, size=8):
    r = np.random.default_rng(seed)
    return r.standard_normal((n, 3, size, size)).astype(np.float32), r.integers(0, 3, n)


@pytest.mark.parametrize("policy", ["store-all", "recompute"])
def test_zero_upstream_gradient_gives_zero_parameter_gradients(policy):
    net = small_net()
    X, _ = batch()
    logits = net.forward(X, policy=policy)
    grads = backward(np.zeros_like(logits), net, policy)
    assert all(not g.any() for g in grads.values())


def test_backward_before_forward_and_policy_mismatch():
    net = small_net()
    X, _ = batch()
    with pytest.raises(BackwardError):
        backward(np.zeros((2, 3), np.float32), net, "recompute")
    logits = net.forward(X, policy="store-all")
    with pytest.raises(BackwardError, match="mismatch"):
        backward(np.zeros_like(logits), net, "recompute")


def test_policy_equivalence_sample():
    worst, where = policy_equivalence(networks=8, seed=3)
    assert worst <= 1e-4, where


@pytest.mark.parametrize("flavor", ["baseline", "pararev", "pararev-fused"])
def test_gradients_identical_across_workers(flavor):
    net = small_net(flavor)
    X, y = batch(1)
    ref = policy_gradients(net, X, y, "recompute", workers=1)
    for w in (2, 4):
        got = policy_gradients(net, X, y, "recompute", workers=w)
        assert all(got[k].tobytes() == ref[k].tobytes() for k in ref)


def test_gradients_cover_every_parameter():
    net = small_net("pararev-fused", blocks=(3, 1))
    X, y = batch(2)
    g = policy_gradients(net, X, y, "recompute")
    assert set(g) == {p.name for p in net.params()}
    assert all(np.isfinite(v).all() for v in g.values())


# -- memory meter ---------------------------------------------------------------


def peak(D, policy, T=2):
    net = build(ArchSpec(blocks=(D,), widths=(8,), timesteps=T, num_classes=4), seed=0)
    X = np.random.default_rng(0).standard_normal((2, 3, 16, 16)).astype(np.float32)
    return measure_peak_memory(net, X, policy)


def test_store_all_doubles_with_depth():
    r = peak(8, "store-all")["peak_bytes"] / peak(4, "store-all")["peak_bytes"]
    assert abs(r / 2 - 1) <= 0.15


def test_recompute_flat_in_depth():
    a, b = peak(4, "recompute"), peak(8, "recompute")
    assert abs(b["peak_bytes"] / a["peak_bytes"] - 1) <= 0.10
    # one residual function's interior is live at a time, whatever the depth
    assert a["peak_by_category"]["interior"] == b["peak_by_category"]["interior"]


def test_recompute_linear_in_time():
    r = peak(4, "recompute", T=4)["peak_bytes"] / peak(4, "recompute", T=2)["peak_bytes"]
    assert abs(r / 2 - 1) <= 0.15


def test_peak_is_deterministic_and_serializable():
    a, b = peak(4, "recompute"), peak(4, "recompute")
    assert a == b
    m = MemoryMeter()
    m.retain("k", "boundary", 10)
    d = json.loads(m.to_json())
    assert d["peak_bytes"] == 10 and d["current_by_category"]["boundary"] == 10
    assert "parameter_bytes" in d


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.sampled_from(["interior", "stream", "boundary", "gradient"]),
                          st.integers(0, 1000)), max_size=40))
def test_meter_invariants(ops):
    m = MemoryMeter()
    live = []
    for i, (add, cat, n) in enumerate(ops):
        if add or not live:
            m.retain(i, cat, n)
            live.append(i)
        else:
            m.release(live.pop(0))
        assert m.peak >= m.current
        assert sum(m.by_category.values()) == m.current


def test_meter_rejects_unknown_category_and_double_retain():
    m = MemoryMeter()
    with pytest.raises(ValueError):
        m.retain("a", "parameters", 1)
    m.retain("a", "stream", 1)
    with pytest.raises(KeyError):
        m.retain("a", "stream", 1)


# -- gradient checks --------------------------------------------------------------


def test_gradcheck_linear_and_conv_stack():
    cases = gradcheck_cases(seed=1)
    for name in ("linear", "conv+group-norm stack"):
        rep = gradcheck_differentiable_path(cases[name], max_entries=8)
        assert rep.passed, rep.failures()


def test_gradcheck_smooth_coupling_network():
    cases = gradcheck_cases(seed=2)
    rep = gradcheck_differentiable_path(cases["pararev coupling network (smooth, recompute)"], max_entries=4)
    assert rep.passed and rep.worst <= 1e-3, rep.failures()


def test_gradcheck_reports_wrong_gradients():
    w = nm.Param(np.array([1.0, 2.0]), "w")

    def loss():
        return float((w.data ** 2).sum())

    def grad():
        w.grad[...] = 3 * w.data  # wrong on purpose

    rep = gradcheck_differentiable_path(Subnetwork([w], loss, grad))
    assert not rep.passed
    assert "w: analytic" in rep.failures()[0] and "numeric" in rep.failures()[0]


def test_relative_difference():
    assert relative_difference(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_difference(np.array([1.0, 2.0]), np.array([1.0, 4.0])) == 0.5
