"""Finite-difference verification of every differentiable operation, plus
engine-level behavior (accumulation, detaching, broadcasting)."""

import zlib

import numpy as np
import pytest

from bevkd import autodiff as ad
from bevkd.contrastive_critic import bilinear_sample_many
from bevkd.core_types import BevGrid, FeatureMap

from fd import assert_grad_matches

N_POINTS = 100
KINK_OPS = {"maximum", "minimum", "l1_norm"}  # subgradient points excluded


def _rng(tag):
    return np.random.default_rng(zlib.crc32(tag.encode()))


def _scalarize(out, rng):
    w = ad.constant(rng.normal(size=out.value.shape))
    return ad.vsum(out * w)


OPS = {
    "sum": lambda x, rng: ad.vsum(x),
    "sum_axis": lambda x, rng: _scalarize(ad.vsum(x, axis=0), rng),
    "mean": lambda x, rng: ad.vmean(x),
    "product": lambda x, rng: _scalarize(x * ad.constant(rng.normal(size=x.value.shape)), rng),
    "mul_broadcast": lambda x, rng: _scalarize(x * ad.constant(rng.normal(size=(1, x.value.shape[1]))), rng),
    "add": lambda x, rng: _scalarize(x + ad.constant(rng.normal(size=x.value.shape)), rng),
    "div": lambda x, rng: _scalarize(x / ad.constant(rng.uniform(0.5, 2.0, size=x.value.shape)), rng),
    "exp": lambda x, rng: _scalarize(ad.exp(x), rng),
    "tanh": lambda x, rng: _scalarize(ad.tanh(x), rng),
    "sqrt_abs": lambda x, rng: _scalarize(ad.sqrt(ad.absolute(x) + 0.5), rng),
    "power": lambda x, rng: _scalarize(ad.power(ad.absolute(x) + 0.5, 1.7), rng),
    "l1_norm": lambda x, rng: ad.vsum(ad.absolute(x)),
    "l2_norm": lambda x, rng: _scalarize(ad.l2norm(x, axis=1), rng),
    "matmul": lambda x, rng: _scalarize(x @ ad.constant(rng.normal(size=(x.value.shape[1], 3))), rng),
    "softmax": lambda x, rng: _scalarize(ad.softmax(x, axis=1), rng),
    "maximum": lambda x, rng: _scalarize(ad.maximum(x, 0.1), rng),
    "minimum": lambda x, rng: _scalarize(ad.minimum(x, 0.1), rng),
    "reshape": lambda x, rng: _scalarize(ad.reshape(x, (x.value.size,)), rng),
    "transpose": lambda x, rng: _scalarize(ad.transpose_last2(x), rng),
    "concat": lambda x, rng: _scalarize(ad.concat([x, x * 2.0], axis=0), rng),
    "take_rows": lambda x, rng: _scalarize(
        ad.take_rows(x, rng.integers(0, x.value.shape[0], size=7)), rng),
    "pad": lambda x, rng: _scalarize(ad.pad_hw(ad.reshape(x, (3, 4, 1)), 1), rng),
}


def _frozen(op, rng):
    """Replay identical rng draws on every evaluation of the loss."""
    state = rng.bit_generator.state

    def build(p):
        replay = np.random.default_rng(0)
        replay.bit_generator.state = state
        return op(p, replay)

    return build


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    op = OPS[name]
    rng = _rng(name)
    worst = 0.0
    for _ in range(N_POINTS):
        x0 = rng.normal(size=(3, 4))
        if name in KINK_OPS:
            # keep every coordinate clear of the nondifferentiable point
            kink = 0.1 if name in ("maximum", "minimum") else 0.0
            x0 = np.where(np.abs(x0 - kink) < 1e-3, x0 + 2e-3, x0)
        worst = max(worst, assert_grad_matches(_frozen(op, rng), x0))
        rng = np.random.default_rng(rng.integers(2**63))
    assert worst <= 1e-4


def test_log_gradient():
    rng = _rng("log")
    for _ in range(N_POINTS):
        x0 = rng.uniform(0.2, 3.0, size=(3, 4))
        assert_grad_matches(lambda p: ad.vsum(ad.log(p)), x0)


def test_conv3x3_gradients():
    rng = _rng("conv")
    for _ in range(30):
        x0 = rng.normal(size=(4, 5, 2))
        w = ad.parameter(rng.normal(size=(18, 3)))
        b = ad.parameter(rng.normal(size=3))
        proj = rng.normal(size=(4, 5, 3))
        assert_grad_matches(
            lambda p: ad.vsum(ad.conv3x3(p, ad.constant(w.value), ad.constant(b.value))
                              * ad.constant(proj)), x0)
        # weight and bias side
        x_const = rng.normal(size=(4, 5, 2))
        assert_grad_matches(
            lambda pw: ad.vsum(ad.conv3x3(ad.constant(x_const), pw, ad.constant(b.value))
                               * ad.constant(proj)), w.value)
        assert_grad_matches(
            lambda pb: ad.vsum(ad.conv3x3(ad.constant(x_const), ad.constant(w.value), pb)
                               * ad.constant(proj)), b.value)


def test_bilinear_sampling_gradient():
    grid = BevGrid(4, 5, 0.0, 5.0, 0.0, 4.0)
    rng = _rng("bilinear")
    points = [(0.7, 1.3), (2.5, 2.5), (4.9, 0.1), (-3.0, 9.0)]  # last clamps
    for _ in range(N_POINTS):
        x0 = rng.normal(size=(4, 5, 3))
        proj = rng.normal(size=(len(points), 3))

        def loss(p):
            fmap = FeatureMap(grid, p)
            return ad.vsum(bilinear_sample_many(fmap, points) * ad.constant(proj))

        assert_grad_matches(loss, x0)


def test_gradient_accumulates_across_reuse():
    x = ad.parameter(np.array([1.5]))
    loss = ad.vsum(x * x + x * 3.0)
    loss.backward()
    assert np.allclose(x.gradient, 2 * 1.5 + 3.0)


def test_stop_gradient_blocks_flow():
    x = ad.parameter(np.array([2.0]))
    loss = ad.vsum(ad.stop_gradient(x) * x)
    loss.backward()
    assert np.allclose(x.gradient, 2.0)  # only the live branch contributes


def test_backward_requires_scalar():
    x = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_provenance_links_parents():
    a = ad.parameter(np.ones(3))
    b = a * 2.0
    assert b.provenance[0] == "mul"
    assert a in b.provenance[1]
    assert a.provenance is None


def test_constants_do_not_collect_gradients():
    c = ad.constant(np.ones(3))
    loss = ad.vsum(c * 2.0)
    loss.backward()
    assert c.gradient is None
