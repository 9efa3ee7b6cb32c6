import numpy as np
import pytest

from rmnet.autodiff import DimensionError, Tensor, backward, mul, no_grad, relu, sum_all, tensor
from rmnet.model import (BASELINE, CLASSIFIER, RELAXED, STRICT, BlockSpec, GraphError, ModelGraph,
                         build_model, resnet_graph, rmnet_s, without_rm)
from rmnet.nn import Affine, Linear, ResidualBlock, conv2d, gap
from rmnet.rm import EMBEDDING, MAXOUT, RmConfig
from rmnet.rotation import rot90_exact

from conftest import grad_rel_err, jitter_params


def conv_oracle(x, w, b, stride, pad):
    """Six nested loops, no vectorisation."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for r in range(ho):
                for col in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                rr, cc = r * stride + i - pad, col * stride + j - pad
                                if 0 <= rr < h and 0 <= cc < wd:
                                    acc += x[bi, ic, rr, cc] * w[oc, ic, i, j]
                    out[bi, oc, r, col] = acc
    return out


def test_scalar_kernel():
    out = conv2d(tensor(np.ones((1, 1, 3, 3))), tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_delta_kernel_is_identity(rng):
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d(tensor(x), tensor(w), padding=1).data, x)


@pytest.mark.parametrize("stride,pad,k,size", [(1, 1, 3, 6), (2, 1, 3, 7), (2, 0, 1, 6), (1, 0, 3, 5), (3, 2, 3, 8)])
def test_conv_matches_loop_oracle(stride, pad, k, size, rng, f64):
    x = rng.normal(size=(2, 3, size, size))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = conv2d(tensor(x), tensor(w), tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, b, stride, pad), atol=1e-6)


def test_conv_extent_underflow():
    with pytest.raises(DimensionError):
        conv2d(tensor(np.zeros((1, 1, 2, 2))), tensor(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_conv_gradients(seed, f64):
    rng = np.random.default_rng(seed)
    x = tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
    w = tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = tensor(rng.normal(size=3), requires_grad=True)
    r = tensor(rng.normal(size=(2, 3, 3, 3)))
    assert grad_rel_err(lambda: sum_all(mul(conv2d(x, w, b, stride=2, padding=1), r)), [x, w, b]) < 1e-4


def test_dead_residual_is_rectified_input(rng):
    block = ResidualBlock(3, 3, rng)
    for conv in (block.conv1, block.conv2):
        conv.weight.data[:] = 0
    x = tensor(rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(block(x).data, relu(x).data)


@pytest.mark.parametrize("size,expected", [(8, 4), (7, 4), (5, 3)])
def test_stride_two_block_extent(size, expected, rng):
    # floor((H + 2 - 3) / 2) + 1
    out = ResidualBlock(2, 4, rng, stride=2)(tensor(np.zeros((1, 2, size, size))))
    assert out.shape == (1, 4, expected, expected)


@pytest.mark.parametrize("seed", range(5))
def test_residual_block_gradients(seed, f64):
    rng = np.random.default_rng(seed)
    block = ResidualBlock(2, 3, rng, stride=2)
    jitter_params(block, rng)
    x = tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    r = tensor(rng.normal(size=(1, 3, 3, 3)))
    assert grad_rel_err(lambda: sum_all(mul(block(x), r)), [x, *block.parameters()]) < 1e-4


def test_linear_and_affine_gradients(rng, f64):
    lin, aff = Linear(6, 4, rng), Affine(6)
    jitter_params(aff, rng)
    x = tensor(rng.normal(size=(3, 6, 1, 1)), requires_grad=True)
    r = tensor(rng.normal(size=(3, 4)))
    assert grad_rel_err(lambda: sum_all(mul(lin(aff(x)), r)), [x, *lin.parameters(), *aff.parameters()]) < 1e-4


def test_gap_cases(rng):
    assert gap(tensor([[[[1, 2], [3, 4]]]])).data.item() == 2.5
    assert gap(tensor(np.full((1, 1, 3, 5), 0.25))).data.item() == 0.25
    x = tensor(rng.normal(size=(2, 3, 6, 6)))
    assert gap(rot90_exact(x, 1)).shape == (2, 3, 1, 1)
    np.testing.assert_allclose(gap(rot90_exact(x, 1)).data, gap(x).data, rtol=0, atol=1e-6)


def test_gap_gradient_spreads_evenly():
    x = tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    backward(sum_all(gap(x)))
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 0.25))


# ------------------------------------------------------------------- graphs

def test_strict_and_relaxed_labels():
    rm = RmConfig()
    assert resnet_graph(8, rm_span=(5, 8), rm=rm).validate().label == STRICT
    assert resnet_graph(8, rm_span=(5, 5), rm=rm).validate().label == RELAXED
    assert resnet_graph(8).validate().label == BASELINE


def test_baseline_equals_manual_composition(rng):
    model = build_model(resnet_graph(4, width=4, input_size=16, head=CLASSIFIER), seed=3)
    x = Tensor(rng.normal(size=(2, 3, 16, 16)).astype(np.float32))
    z = x
    for blk in model.blocks:
        z = blk(z)
    ref = model.fc(gap(z))
    np.testing.assert_array_equal(model(x).data, ref.data)


@pytest.mark.parametrize("fusion", ["meanout", MAXOUT])
@pytest.mark.parametrize("span", [(0, 4), (3, 4), (1, 2)])
def test_wrapping_adds_no_parameters(fusion, span):
    g = rmnet_s(rm_span=span, rm=RmConfig(fusion=fusion))
    assert build_model(g).num_parameters() == build_model(without_rm(g)).num_parameters()


def test_embedding_adds_one_by_one_conv():
    g = rmnet_s(rm_span=(3, 4), rm=RmConfig(fusion=EMBEDDING))
    c = g.blocks[4].cout
    assert build_model(g).num_parameters() - build_model(without_rm(g)).num_parameters() == 4 * c * c + c


def test_graph_errors_carry_block_index():
    bad = ModelGraph((BlockSpec("stem", 3, 8), BlockSpec("res", 16, 16)), (3, 16, 16))
    with pytest.raises(GraphError) as err:
        bad.validate()
    assert err.value.block == 1
    with pytest.raises(GraphError) as err:
        rmnet_s(rm_span=(2, 9), rm=RmConfig()).validate()
    assert err.value.block == 2
    with pytest.raises(GraphError):
        rmnet_s(rm_span=(1, 2)).validate()


def test_bilinear_canvas_is_derived_from_span():
    # 64 input, stem stride 4 and one stride-2 block: diagonal 90.5, factor 8, symmetric pad
    assert rmnet_s(rm_span=(0, 4), rm=RmConfig.from_theta(45)).validate().canvas() == 96
    assert rmnet_s(rm_span=(3, 4), rm=RmConfig.from_theta(45)).validate().canvas() == 24


def test_full_trunk_model_is_invariant_to_image_quarter_turns(rng):
    model = build_model(rmnet_s(rm_span=(0, 4), rm=RmConfig()), seed=0)
    jitter_params(model, rng, 0.05)
    x = Tensor(rng.normal(size=(2, 3, 64, 64)).astype(np.float32))
    with no_grad():
        ref = model(x).data
        for q in (1, 2, 3):
            assert np.abs(model(rot90_exact(x, q)).data - ref).max() < 1e-4


def test_strict_model_is_invariant_to_span_input_turns(rng, f64):
    model = build_model(rmnet_s(rm_span=(3, 4), rm=RmConfig()), seed=0)
    jitter_params(model, rng, 0.05)
    z = Tensor(rng.normal(size=(2,) + model.graph.extents()[3]))
    with no_grad():
        def logits(t):
            f = gap(model.span_output(t))
            return model.head_from_features(Tensor(f.data.reshape(2, -1)))[1].data
        for q in (1, 2, 3):
            assert np.abs(logits(rot90_exact(z, q)) - logits(z)).max() < 1e-5


def test_state_dict_round_trip():
    a = build_model(rmnet_s(rm_span=(3, 4), rm=RmConfig(fusion=EMBEDDING)), seed=1)
    b = build_model(rmnet_s(rm_span=(3, 4), rm=RmConfig(fusion=EMBEDDING)), seed=2)
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    with pytest.raises(KeyError):
        b.load_state_dict({})
