import numpy as np
import pytest
from hypothesis import given, strategies as st

from orthoattn.backbone import (AttentionConfig, BlockSpec, Network, NetworkSpec, attention_param_count,
                                build_block, conv2d, conv2d_backward, conv_out_size, count_params, preset)
from orthoattn.gradcheck import check_network, numeric_grad, rel_error, run_preset
from orthoattn.tensor import make_rng


def naive_conv(x, wt, stride, pad):
    n, c, h, w = x.shape
    o, _, k, _ = wt.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                s += wt[oc, ic, di, dj] * xp[b, ic, i * stride + di, j * stride + dj]
                    out[b, oc, i, j] = s
    return out


# ---- conv2d

def test_conv_1x1_identity(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    assert np.array_equal(conv2d(x, np.eye(3).reshape(3, 3, 1, 1)), x)


def test_conv_ones_on_one_hot():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    out = conv2d(x, np.ones((1, 1, 3, 3)), 1, 1)[0, 0]
    expect = np.zeros((5, 5))
    expect[1:4, 1:4] = 1.0
    assert np.array_equal(out, expect)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 0, 3)])
def test_conv_matches_six_loop_oracle(rng, stride, pad, k):
    x = rng.standard_normal((2, 4, 8, 8))
    wt = rng.standard_normal((3, 4, k, k))
    assert np.max(np.abs(conv2d(x, wt, stride, pad) - naive_conv(x, wt, stride, pad))) <= 1e-10


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 1)])
def test_conv_backward_fd(rng, stride, pad, k):
    x = rng.standard_normal((2, 2, 5, 5))
    wt = rng.standard_normal((3, 2, k, k))
    up = rng.standard_normal(conv2d(x, wt, stride, pad).shape)

    def loss():
        return float(np.sum(conv2d(x, wt, stride, pad) * up))

    dx, dw = conv2d_backward(up, x, wt, stride, pad)
    assert np.max(rel_error(dx, numeric_grad(loss, x))) <= 1e-7
    assert np.max(rel_error(dw, numeric_grad(loss, wt))) <= 1e-7


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), 1, 1)
    with pytest.raises(ValueError):
        conv2d(np.zeros((2, 4, 4)), np.zeros((1, 2, 3, 3)), 1, 1)


@given(st.integers(1, 40), st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 1))
def test_conv_out_size_formula(n, k, s, p):
    if n + 2 * p < k:
        return
    x = np.zeros((1, 1, n, n))
    assert conv2d(x, np.zeros((1, 1, k, k)), s, p).shape[2] == conv_out_size(n, k, s, p) == (n + 2 * p - k) // s + 1


# ---- specs and blocks

def test_blockspec_rules():
    assert BlockSpec("bottleneck", 16, 16).mid_ch == 4
    assert BlockSpec("basic", 8, 8).mid_ch == 8
    with pytest.raises(ValueError):
        BlockSpec("basic", 8, 8, attention="mod").validate()
    with pytest.raises(ValueError):
        BlockSpec("bottleneck", 8, 10).validate()
    with pytest.raises(ValueError):
        BlockSpec("basic", 8, 8, stride=3).validate()


def test_block_none_is_plain_residual(rng):
    blk = build_block(BlockSpec("basic", 4, 4, attention="none"), 3, (6, 6))
    x = rng.standard_normal((2, 4, 6, 6))
    y = blk.forward(x, training=False)
    out = x
    for i, (conv, bn) in enumerate(zip(blk.convs, blk.bns)):
        out = conv2d(out, conv.weight.value, conv.stride, conv.pad)
        out = (out - bn.running_mean[:, None, None]) / np.sqrt(bn.running_var[:, None, None] + bn.eps)
        if i < len(blk.convs) - 1:
            out = np.maximum(out, 0)
    assert blk.attention is None
    assert np.max(np.abs(y - np.maximum(out + x, 0))) <= 1e-12


def test_mod_bank_uses_mid_channels():
    mod = build_block(BlockSpec("bottleneck", 16, 16, attention="mod"), 0, (8, 8),
                      AttentionConfig(reduction=2))
    std = build_block(BlockSpec("bottleneck", 16, 16, attention="standard"), 0, (8, 8),
                      AttentionConfig(reduction=2))
    assert mod.attention.block.c == 4
    assert std.attention.block.c == 16
    assert (mod.attention.block.init_bank.h, mod.attention.block.init_bank.w) == (8, 8)
    base = count_params(build_block(BlockSpec("bottleneck", 16, 16, attention="none"), 0, (8, 8)))
    assert count_params(std) - base == 2 * (16 * 8) == 256
    assert count_params(mod) - base == 2 * (4 * 2) == 16


def test_strided_block_bank_matches_output_size():
    blk = build_block(BlockSpec("bottleneck", 8, 16, stride=2, attention="mod"), 0, (8, 8))
    assert blk.out_hw == (4, 4)
    assert (blk.attention.block.init_bank.h, blk.attention.block.init_bank.w) == (4, 4)
    assert blk.shortcut is not None


def test_residual_identity_zero_convs(rng):
    blk = build_block(BlockSpec("basic", 4, 4), 0, (5, 5), AttentionConfig(kind="gap", reduction=1))
    for conv in blk.convs:
        conv.weight.value[...] = 0.0
    att = blk.attention.block
    att.w1[...] = 0.0
    att.w2[...] = 0.0
    x = np.abs(rng.standard_normal((2, 4, 5, 5)))
    for training in (True, False):
        assert np.max(np.abs(blk.forward(x, training=training) - x)) <= 1e-6


def test_mod_before_activation_flag_changes_output(rng):
    spec = BlockSpec("bottleneck", 8, 8, attention="mod")
    a = build_block(spec, 0, (4, 4), AttentionConfig(reduction=1))
    b = build_block(spec, 0, (4, 4), AttentionConfig(reduction=1, mod_before_activation=True))
    x = rng.standard_normal((2, 8, 4, 4))
    assert not np.allclose(a.forward(x, True), b.forward(x, True))


# ---- parameter counts

def enumerate_attention(net):
    return sum(b.w1.size + b.w2.size for b in net.attention_blocks())


@pytest.mark.parametrize("name", ["tiny50", "toy50"])
def test_mod_reduces_params_every_bottleneck_preset(name):
    std_spec = preset(name, attention="standard")
    mod_spec = preset(name, attention="mod")
    std, mod = count_params(std_spec), count_params(mod_spec)
    assert mod < std
    r = std_spec.attention.reduction
    closed = sum(attention_param_count(b.out_ch, r) - attention_param_count(b.mid_ch, r)
                 for b in std_spec.blocks())
    assert std - mod == closed
    assert closed == enumerate_attention(Network(std_spec)) - enumerate_attention(Network(mod_spec))


def test_count_params_none_is_conv_and_norm_only():
    spec = preset("toy34", attention="none", classes=3)
    net = Network(spec)
    conv = sum(m.weight.value.size for _, m in net.modules() if hasattr(m, "weight") and m is not net.fc)
    norm = sum(m.gamma.value.size * 2 for _, m in net.modules() if hasattr(m, "gamma"))
    fc = net.fc.weight.value.size + net.fc.bias.value.size
    assert count_params(net) == conv + norm + fc


def test_learnable_banks_add_filter_entries():
    frozen = Network(preset("toy50", attention="mod"))
    learn = Network(preset("toy50", attention="mod", filters_learnable=True))
    extra = sum(b.c * b.init_bank.dim for b in frozen.attention_blocks())
    assert count_params(learn) - count_params(frozen) == extra > 0


# ---- networks

@pytest.mark.parametrize("name", ["tiny34", "tiny50", "toy34", "toy50"])
def test_stage_shapes_follow_formula(name):
    spec = preset(name)
    net = Network(spec)
    h, w = spec.input_hw
    for bspec, shape in zip(spec.blocks(), net.stage_shapes):
        h, w = conv_out_size(h, 3, bspec.stride, 1), conv_out_size(w, 3, bspec.stride, 1)
        assert shape == (bspec.out_ch, h, w)
    x = np.zeros((2, 1, *spec.input_hw))
    assert net.forward(x).shape == (2, 10)


def test_zero_classifier_uniform_logits(rng):
    net = Network(preset("toy34", classes=4), 0)
    net.fc.weight.value[...] = 0.0
    logits = net.forward(rng.standard_normal((3, 1, 8, 8)))
    assert np.all(logits == logits[:, :1])


def test_network_deterministic(rng):
    x = rng.standard_normal((2, 1, 8, 8))
    a = Network(preset("toy50", attention="mod"), 3).forward(x)
    b = Network(preset("toy50", attention="mod"), 3).forward(x)
    assert a.tobytes() == b.tobytes()
    c = Network(preset("toy50", attention="mod"), 4).forward(x)
    assert not np.array_equal(a, c)


def test_network_rejects_wrong_input():
    with pytest.raises(ValueError):
        Network(preset("toy34")).forward(np.zeros((1, 1, 9, 8)))


@pytest.mark.parametrize("name", ["toy34", "toy50"])
def test_toy_network_gradcheck_all_params(name):
    rep = run_preset(name, 0)
    assert rep.checked > 500
    assert rep.max_error <= 1e-5


def test_gradcheck_each_kind_on_toy():
    for kind in ("gap", "dct", "random"):
        spec = preset("toy34", kind=kind, classes=3, reduction=1, filters_learnable=kind != "gap")
        net = Network(spec, 1)
        r = make_rng(1)
        rep = check_network(net, r.standard_normal((3, 1, 8, 8)), r.integers(0, 3, 3), max_per_param=6)
        assert rep.max_error <= 1e-5, kind


def test_backward_fills_every_grad(rng):
    net = Network(preset("toy50", attention="mod", filters_learnable=True), 0)
    net.forward(rng.standard_normal((2, 1, 8, 8)))
    net.backward(rng.standard_normal((2, 10)))
    for name, p in net.named_params():
        assert p.grad is not None and p.grad.shape == p.value.shape, name


def test_spec_json_roundtrip():
    spec = preset("tiny50", attention="mod", kind="dct", reduction=4, group_size=1)
    back = NetworkSpec.from_json(spec.to_json())
    assert back == spec
    assert back.to_json() == spec.to_json()


def test_spec_chain_validation():
    spec = preset("toy34")
    first, rep = spec.stages[1]
    spec.stages[1] = (BlockSpec(first.kind, 5, first.out_ch, 2), rep)
    with pytest.raises(ValueError):
        spec.validate()


def test_batchnorm_running_stats_update(rng):
    net = Network(preset("toy34"), 0)
    before = [b.copy() for _, b in net.buffers()]
    net.forward(rng.standard_normal((4, 1, 8, 8)), training=True, update_stats=False)
    assert all(np.array_equal(a, b) for a, (_, b) in zip(before, net.buffers()))
    net.forward(rng.standard_normal((4, 1, 8, 8)), training=True)
    assert any(not np.array_equal(a, b) for a, (_, b) in zip(before, net.buffers()))
