import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pararev import numeric as nm
from pararev.blocks import (Downsample, FusedFn, ResidualFn, RevChain, downsample_block, pararev_forward,
                            pararev_forward_fused, pararev_inverse, pararev_inverse_fused, rev_forward,
                            rev_inverse)
from pararev.neuron import NeuronConfig, SpikeAct, spike_sequence
from pararev.verify import dyadic_exact, inversion_roundtrip


def double(v):
    return 2 * v


def triple(v):
    return 3 * v


# -- scalar test doubles ------------------------------------------------------


def test_rev_forward_scalar():
    assert rev_forward(np.array(1.0), np.array(2.0), double, triple) == (5.0, 17.0)


def test_rev_inverse_scalar():
    assert rev_inverse(np.array(5.0), np.array(17.0), double, triple) == (1.0, 2.0)


def test_pararev_forward_scalar():
    assert pararev_forward(np.array(1.0), np.array(2.0), double, triple) == (4.0, 13.0)


def test_pararev_inverse_scalar():
    assert pararev_inverse(np.array(4.0), np.array(13.0), double, triple) == (1.0, 2.0)


def test_pararev_with_swapped_streams_is_baseline():
    for x1, x2 in [(1.0, 2.0), (-3.5, 0.25), (7.0, -1.0)]:
        b1, b2 = rev_forward(np.array(x1), np.array(x2), double, triple)
        p1, p2 = pararev_forward(np.array(x2), np.array(x1), double, triple)
        assert (b1, b2) == (p1, p2)


def test_shape_mismatch_rejected():
    for fn in (rev_forward, rev_inverse, pararev_forward, pararev_inverse):
        with pytest.raises(ValueError):
            fn(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3)), double, triple)


# -- zero-weight functions ----------------------------------------------------


def zero_fn(c=4, T=2):
    return ResidualFn(c, None, zero=True).bind(T)


def test_zero_weight_blocks():
    r = np.random.default_rng(0)
    x1, x2 = (r.standard_normal((4, 4, 3, 3)).astype(np.float32) for _ in range(2))
    F, G = zero_fn(), zero_fn()
    y1, y2 = rev_forward(x1, x2, F, G)
    np.testing.assert_array_equal(y1, x1)
    np.testing.assert_array_equal(y2, x2)
    y1, y2 = pararev_forward(x1, x2, F, G)
    np.testing.assert_array_equal(y1, x2)
    np.testing.assert_array_equal(y2, x1)
    r1, r2 = pararev_inverse(y1, y2, F, G)
    np.testing.assert_array_equal(r1, x1)
    np.testing.assert_array_equal(r2, x2)


def test_zero_weights_with_bias_add_the_bias():
    fn = ResidualFn(3, None, zero=True)
    fn.bn.bias.data[...] = [0.5, -1.0, 2.0]
    x = np.ones((2, 3, 2, 2), np.float32)
    y1, _ = rev_forward(x, x, fn.bind(1), zero_fn(3, 1))
    np.testing.assert_allclose(y1, x + fn.bn.bias.data.reshape(1, 3, 1, 1))


def test_fused_zero_chain_is_double_swap():
    r = np.random.default_rng(1)
    x1, x2 = (r.standard_normal((2, 4, 3, 3)).astype(np.float32) for _ in range(2))
    M = FusedFn(4, None, zero=True).bind(2)
    y1, y2 = pararev_forward_fused(x1, x2, zero_fn(), [M], zero_fn())
    np.testing.assert_array_equal(y1, x1)
    np.testing.assert_array_equal(y2, x2)


def test_fused_chain_errors():
    x = np.zeros((1, 4, 2, 2), np.float32)
    with pytest.raises(ValueError):
        pararev_forward_fused(x, x, None, [], zero_fn(4, 1))
    with pytest.raises(ValueError):
        RevChain(4, 0)
    bad = FusedFn(3, None, zero=True).bind(1)
    with pytest.raises(ValueError):
        pararev_forward_fused(x, x, zero_fn(4, 1), [bad], zero_fn(4, 1))


# -- primitive-by-primitive oracle ---------------------------------------------


def manual_residual(fn: ResidualFn, x, T, cfg):
    """act -> conv -> GN -> act -> conv -> BN written out from the primitives."""
    s1, _ = spike_sequence(x, T, cfg)
    h = nm.conv2d(s1, fn.conv1)
    g = nm.normalize(h, fn.gn, True)
    s2, _ = spike_sequence(g, T, cfg)
    h2 = nm.conv2d(s2, fn.conv2)
    return nm.batch_norm_forward(h2, fn.bn, True)[0]


@pytest.mark.parametrize("flavor", ["baseline", "pararev"])
def test_block_matches_manual_composition(flavor):
    r = nm.make_rng(3)
    cfg = NeuronConfig("LIF", threshold=0.7, decay=0.6)
    T = 2
    F = ResidualFn(4, r, act=SpikeAct(cfg))
    G = ResidualFn(4, r, act=SpikeAct(cfg))
    x1, x2 = (r.standard_normal((2 * T, 4, 5, 5)).astype(np.float32) for _ in range(2))
    fwd = rev_forward if flavor == "baseline" else pararev_forward
    y1, y2 = fwd(x1, x2, F.bind(T), G.bind(T))
    if flavor == "baseline":
        m1 = x1 + manual_residual(F, x2, T, cfg)
        m2 = x2 + manual_residual(G, m1, T, cfg)
    else:
        m1 = x2 + manual_residual(F, x1, T, cfg)
        m2 = x1 + manual_residual(G, m1, T, cfg)
    np.testing.assert_array_equal(y1, m1)
    np.testing.assert_array_equal(y2, m2)


def test_residual_fn_preserves_shape():
    fn = ResidualFn(6, nm.make_rng(0))
    x = np.random.default_rng(0).standard_normal((4, 6, 5, 3)).astype(np.float32)
    assert fn.bind(2)(x).shape == x.shape


# -- round trips ----------------------------------------------------------------


def test_roundtrip_random_configs_small_sample():
    worst = inversion_roundtrip(configs=40, seed=11)
    assert max(worst.values()) <= 1e-4


def test_dyadic_roundtrip_is_bit_exact():
    assert dyadic_exact(configs=10, seed=5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["baseline", "pararev", "pararev-fused"]),
       st.integers(1, 4), st.sampled_from([1, 2, 4]))
def test_chain_inverse_property(seed, flavor, B, T):
    if flavor == "pararev-fused" and B < 2:
        B = 2
    r = nm.make_rng(seed)
    chain = RevChain(4, B, flavor, r)
    x1, x2 = (r.standard_normal((T, 4, 3, 3)).astype(np.float32) for _ in range(2))
    y1, y2, bound = chain.forward(x1, x2, T)
    assert y1.shape == x1.shape == y2.shape
    r1, r2 = chain.inverse(y1, y2, bound)
    assert max(np.abs(r1 - x1).max(), np.abs(r2 - x2).max()) <= 1e-4


# -- fused module ---------------------------------------------------------------


@pytest.mark.parametrize("B", [2, 3, 4])
def test_fused_chain_matches_unfused(B):
    r = nm.make_rng(B)
    T = 2
    un = RevChain(4, B, "pararev", r)
    fu = RevChain(4, B, "pararev-fused", None, zero=True).copy_from(un)
    x1, x2 = (r.standard_normal((2 * T, 4, 4, 4)).astype(np.float32) for _ in range(2))
    a1, a2, _ = un.forward(x1, x2, T)
    b1, b2, _ = fu.forward(x1, x2, T)
    assert np.abs(a1 - b1).max() <= 1e-5 and np.abs(a2 - b2).max() <= 1e-5
    # and the sequential unfused pararev_forward calls agree too
    c1, c2 = x1, x2
    for k in range(B):
        c1, c2 = pararev_forward(c1, c2, un.F[k].bind(T), un.G[k].bind(T))
    np.testing.assert_array_equal(c1, a1)
    np.testing.assert_array_equal(c2, a2)


def test_fused_fn_split_roundtrip():
    r = nm.make_rng(7)
    G, F = ResidualFn(4, r), ResidualFn(4, r)
    M = FusedFn.from_pair(G, F)
    g2, f2 = M.split()
    for a, b in ((G, g2), (F, f2)):
        for p, q in zip(a.params(), b.params()):
            np.testing.assert_array_equal(p.data, q.data)
    x = r.standard_normal((2, 4, 3, 3)).astype(np.float32)
    g, f = M.bind(2)(x)
    assert np.abs(g - G.bind(2)(x)).max() <= 1e-5
    assert np.abs(f - F.bind(2)(x)).max() <= 1e-5


def test_fused_inverse():
    r = nm.make_rng(8)
    chain = RevChain(4, 3, "pararev-fused", r)
    b = chain.bind_all(1)
    x1, x2 = (r.standard_normal((2, 4, 3, 3)).astype(np.float32) for _ in range(2))
    ms = [b["M", 0], b["M", 1]]
    y1, y2 = pararev_forward_fused(x1, x2, b["F", 0], ms, b["G", 2])
    r1, r2 = pararev_inverse_fused(y1, y2, b["F", 0], ms, b["G", 2])
    assert max(np.abs(r1 - x1).max(), np.abs(r2 - x2).max()) <= 1e-5


# -- downsampling ---------------------------------------------------------------


def test_downsample_halves_spatial_and_maps_width():
    d = Downsample(4, 8, nm.make_rng(0))
    x = np.random.default_rng(0).standard_normal((2, 4, 8, 8)).astype(np.float32)
    y1, y2 = downsample_block(x, x, d, T=2)
    assert y1.shape == y2.shape == (2, 8, 4, 4)


def test_downsample_zero_weights_give_bias():
    d = Downsample(4, 6, None, zero=True)
    d.branches[0].bn.bias.data[...] = 0.25
    x = np.random.default_rng(1).standard_normal((1, 4, 6, 6)).astype(np.float32)
    y1, y2 = downsample_block(x, x, d)
    assert y1.shape == (1, 6, 3, 3)
    assert np.all(y1 == 0.25) and not y2.any()


def test_downsample_matches_manual_composition():
    cfg = NeuronConfig()
    d = Downsample(3, 5, nm.make_rng(2), act=SpikeAct(cfg))
    x1, x2 = (np.random.default_rng(i).standard_normal((4, 3, 6, 6)).astype(np.float32) for i in (2, 3))
    y1, y2 = downsample_block(x1, x2, d, T=2)
    for br, x, y in zip(d.branches, (x1, x2), (y1, y2)):
        s, _ = spike_sequence(x, 2, cfg)
        want = nm.batch_norm_forward(nm.conv2d(s, br.conv), br.bn, True)[0]
        np.testing.assert_array_equal(y, want)


def test_downsample_channel_mismatch():
    d = Downsample(4, 8, nm.make_rng(0))
    with pytest.raises(ValueError):
        downsample_block(np.zeros((1, 3, 4, 4), np.float32), np.zeros((1, 3, 4, 4), np.float32), d)
