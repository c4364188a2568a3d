import numpy as np
import pytest
from hypothesis import given, strategies as st

from bmfl.brain_encoder import FmriRecord, RoiMap
from bmfl.brain_transformer import (
    PAPER_SCALE,
    BrainTransformer,
    BrainTransformerConfig,
    encode_fmri,
    patchify_fmri,
)
from bmfl.errors import ConfigError, DimensionError, InputError
from bmfl.numerics import Linear, Tensor, grad_check, make_rng

SMALL = BrainTransformerConfig(kernel=4, d_b=8, depth=1, heads=2, num_voxels=24)


def gelu_ref(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def ln_ref(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def block_ref(x, blk, heads):
    """Single pre-norm encoder block in plain float64 numpy, one head at a time."""
    p = {n: v.data.astype(np.float64) for n, v in blk.named_parameters()}
    h = ln_ref(x, p["norm1.gain"], p["norm1.bias"])
    q, k, v = (h @ p[f"attn.{n}.weight"] + p[f"attn.{n}.bias"] for n in "qkv")
    d = x.shape[-1] // heads
    outs = []
    for i in range(heads):
        sl = slice(i * d, (i + 1) * d)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(d)
        w = np.exp(s - s.max(1, keepdims=True))
        outs.append((w / w.sum(1, keepdims=True)) @ v[:, sl])
    x = x + np.concatenate(outs, 1) @ p["attn.out.weight"] + p["attn.out.bias"]
    h = ln_ref(x, p["norm2.gain"], p["norm2.bias"])
    m = gelu_ref(h @ p["mlp.fc1.weight"] + p["mlp.fc1.bias"]) @ p["mlp.fc2.weight"] + p["mlp.fc2.bias"]
    return x + m


def test_default_gives_16_tokens(rng):
    tr = BrainTransformer(BrainTransformerConfig(), make_rng(0))
    toks = encode_fmri(rng.normal(size=3072).astype(np.float32), tr)
    assert toks.cls.shape == (64,) and toks.patches.shape == (16, 64)


def test_record_input_and_batch(rng):
    tr = BrainTransformer(SMALL, make_rng(0))
    rec = FmriRecord(rng.normal(size=(3, 24)).astype(np.float32), _map24())
    toks = encode_fmri(rec, tr)
    assert toks.cls.shape == (3, 8) and toks.patches.shape == (3, 6, 8) and len(toks) == 3
    one = encode_fmri(rec.voxels[1], tr)
    np.testing.assert_allclose(one.patches, toks[1].patches, atol=1e-5)


def _map24():
    return RoiMap.from_table([("left:early", 0, 12), ("right:early", 12, 24)])


def test_kernel_equal_to_v_gives_one_token(rng):
    cfg = BrainTransformerConfig(kernel=24, d_b=8, depth=1, heads=2, num_voxels=24)
    toks = encode_fmri(rng.normal(size=24).astype(np.float32), BrainTransformer(cfg, make_rng(0)))
    assert toks.patches.shape == (1, 8)


def test_zero_voxels_zero_conv_bias_give_positions_only():
    cfg = BrainTransformerConfig(kernel=4, d_b=8, depth=0, heads=2, num_voxels=24)
    tr = BrainTransformer(cfg, make_rng(3))
    toks = encode_fmri(np.zeros(24, np.float32), tr)
    np.testing.assert_array_equal(toks.patches, tr.pos_embed.data[0, 1:])
    np.testing.assert_array_equal(toks.cls, (tr.cls_token.data + tr.pos_embed.data[:, :1])[0, 0])


def test_depth_zero_is_projection_plus_positions(rng):
    cfg = BrainTransformerConfig(kernel=4, d_b=8, depth=0, heads=2, num_voxels=24)
    tr = BrainTransformer(cfg, make_rng(1))
    v = rng.normal(size=24).astype(np.float32)
    want = v.reshape(6, 4) @ tr.conv.weight.data + tr.conv.bias.data + tr.pos_embed.data[0, 1:]
    np.testing.assert_allclose(encode_fmri(v, tr).patches, want, atol=1e-6)


def test_same_input_same_tokens(rng):
    tr = BrainTransformer(SMALL, make_rng(0))
    v = rng.normal(size=24).astype(np.float32)
    a, b = encode_fmri(v, tr), encode_fmri(v.copy(), tr)
    assert np.array_equal(a.cls, b.cls) and np.array_equal(a.patches, b.patches)


@pytest.mark.parametrize("cfg", [SMALL, BrainTransformerConfig(kernel=12, d_b=4, depth=1, heads=1, num_voxels=24)],
                         ids=["6-tokens-2-heads", "2-tokens-1-head"])
def test_single_block_matches_hand_rolled_reference(rng, cfg):
    tr = BrainTransformer(cfg, make_rng(2))
    for _, p in tr.named_parameters():
        p.data = rng.normal(0, 0.3, p.shape).astype(np.float32)
    v = rng.normal(size=24)
    tokens = v.reshape(cfg.num_tokens, cfg.kernel) @ tr.conv.weight.data.astype(np.float64) + tr.conv.bias.data
    x = np.concatenate([tr.cls_token.data[0], tokens], 0) + tr.pos_embed.data[0]
    want = block_ref(x, tr.blocks[0], cfg.heads)
    got = encode_fmri(v.astype(np.float32), tr)
    np.testing.assert_allclose(got.cls, want[0], atol=1e-4)
    np.testing.assert_allclose(got.patches, want[1:], atol=1e-4)


@given(st.permutations(range(6)), st.integers(0, 2**31))
def test_window_permutation_permutes_tokens_without_positions(perm, seed):
    tr = BrainTransformer(SMALL, make_rng(5))
    tr.pos_embed.data[...] = 0.0
    v = np.random.default_rng(seed).normal(size=(6, 4)).astype(np.float32)
    perm = list(perm)
    a = encode_fmri(v.reshape(-1), tr)
    b = encode_fmri(v[perm].reshape(-1), tr)
    np.testing.assert_allclose(b.patches, a.patches[perm], atol=1e-5)
    np.testing.assert_allclose(b.cls, a.cls, atol=1e-5)


def test_conv_gradient_matches_finite_differences(rng):
    tr = BrainTransformer(SMALL, make_rng(0))
    for _, p in tr.named_parameters():
        p.data = rng.normal(0, 0.4, p.shape).astype(np.float32)
    v = rng.normal(size=(2, 24)).astype(np.float32)
    target = rng.normal(size=(2, 6, 8))

    def f():
        cls, patches = tr(v)
        return ((patches - Tensor(target)) ** 2).sum() + (cls * cls).sum()

    assert grad_check(f, [tr.conv.weight, tr.conv.bias, tr.cls_token, tr.pos_embed]) < 1e-4


def test_patchify_errors(rng):
    conv = Linear(5, 8, make_rng(0))
    with pytest.raises(InputError, match="not divisible"):
        patchify_fmri(rng.normal(size=24).astype(np.float32), conv, 5)
    with pytest.raises(DimensionError):
        patchify_fmri(rng.normal(size=24).astype(np.float32), conv, 4)


def test_wrong_voxel_count_for_model(rng):
    tr = BrainTransformer(SMALL, make_rng(0))
    with pytest.raises(DimensionError):
        tr(rng.normal(size=(1, 28)).astype(np.float32))
    with pytest.raises(InputError):
        tr(rng.normal(size=(1, 26)).astype(np.float32))


def test_config_validation():
    with pytest.raises(ConfigError):
        BrainTransformerConfig(kernel=5)
    with pytest.raises(ConfigError):
        BrainTransformerConfig(d_b=10, heads=4)
    assert PAPER_SCALE.num_tokens == 16 and PAPER_SCALE.d_b == 768
