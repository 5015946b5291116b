import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterformer.attention import (
    CAUSAL,
    NO_MASK,
    AttentionConfig,
    MaskSpec,
    MultiHeadAttention,
    TokenGroup,
    attention_cost,
    encode_groups,
    encode_indexed,
    multi_head_attention,
    transformer_layer,
)
from clusterformer.nn import finite_diff_grad_check

from conftest import make_layer


def attn64(d=8, heads=2, seed=0):
    torch.manual_seed(seed)
    return MultiHeadAttention(AttentionConfig(d, heads, 16)).double()


# [TRIVIAL]
def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        AttentionConfig(10, 3, 8)
    with pytest.raises(ValueError, match="dropout"):
        AttentionConfig(8, 2, 8, dropout=1.0)


# [DERIVED] explicit value and output projections
def test_singleton_group_is_value_then_output_projection():
    att = attn64()
    x = torch.randn(1, 8, dtype=torch.float64)
    y, w = att(x, return_weights=True)
    v = x @ att.qkv.weight[16:].T + att.qkv.bias[16:]
    assert torch.allclose(y, att.out(v), atol=1e-14)
    assert torch.all(w == 1.0)


# [TRIVIAL]
def test_identical_tokens_give_identical_rows():
    att = attn64()
    x = torch.randn(1, 8, dtype=torch.float64).repeat(2, 1)
    y = multi_head_attention(TokenGroup(x, torch.arange(2)), att)
    assert torch.equal(y[0], y[1])


# [TRIVIAL] hand-written mask
def test_causal_mask_by_original_position():
    allowed = CAUSAL.allowed(torch.tensor([5, 2, 9]))
    expected = torch.tensor([[True, True, False], [False, True, False], [True, True, True]])
    assert torch.equal(allowed, expected)
    att = attn64()
    _, w = att(torch.randn(3, 8, dtype=torch.float64), torch.tensor([5, 2, 9]), CAUSAL, return_weights=True)
    assert torch.all(w[:, ~expected] == 0)
    assert torch.allclose(w[:, 1, 1], torch.ones(2, dtype=torch.float64))


# [TRIVIAL]
def test_question_sentinels_visible_to_all():
    allowed = CAUSAL.allowed(torch.tensor([-2, -1, 0, 1]))
    assert allowed[:, :2].all()
    assert not allowed[0, 2] and not allowed[1, 3]
    assert NO_MASK.allowed(torch.arange(3)) is None
    with pytest.raises(ValueError):
        MaskSpec("causal").allowed(None)


# [TRIVIAL] invariants
@given(st.integers(1, 6), st.integers(0, 2**16))
@settings(max_examples=25, deadline=None)
def test_attention_weights_rows_sum_to_one(g, seed):
    torch.manual_seed(seed)
    att = attn64()
    pos = torch.randperm(g)
    _, w = att(torch.randn(g, 8, dtype=torch.float64), pos, CAUSAL, return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-12)
    assert torch.all(w[:, ~CAUSAL.allowed(pos)] == 0)


# [DERIVED] torch layer_norm reference
def test_zeroed_sublayers_reduce_to_layer_norm_of_input():
    layer = make_layer()
    with torch.no_grad():
        for p in (layer.attn.out.weight, layer.attn.out.bias, layer.ff_out.weight, layer.ff_out.bias):
            p.zero_()
    x = torch.randn(5, 8, dtype=torch.float64)
    y = transformer_layer(TokenGroup(x, torch.arange(5)), layer).states
    ref = torch.nn.functional.layer_norm(torch.nn.functional.layer_norm(x, (8,)), (8,))
    assert torch.allclose(y, ref, atol=1e-12)


# [TRIVIAL]
def test_positions_pass_through_and_errors():
    layer = make_layer()
    pos = torch.tensor([7, 3, 1])
    out = transformer_layer(TokenGroup(torch.randn(3, 8, dtype=torch.float64), pos), layer)
    assert torch.equal(out.positions, pos)
    with pytest.raises(ValueError):
        transformer_layer(TokenGroup(torch.randn(0, 8, dtype=torch.float64), torch.arange(0)), layer)
    with pytest.raises(ValueError):
        transformer_layer(TokenGroup(torch.randn(2, 4, dtype=torch.float64), torch.arange(2)), layer)
    with pytest.raises(ValueError):
        TokenGroup(torch.randn(2, 8), torch.arange(3))


# [DERIVED] central finite differences
def test_transformer_layer_gradient_check():
    layer = make_layer(seed=3)
    x = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(4, 8, dtype=torch.float64)
    params = [x] + list(layer.parameters())
    res = finite_diff_grad_check(lambda: (layer(x) * w).sum(), params)
    assert res.max_rel_error < 1e-4, str(res)


# [DERIVED] per-group encoding
def test_encode_groups_matches_one_by_one():
    layer = make_layer()
    groups = [TokenGroup(torch.randn(2, g, 8, dtype=torch.float64), torch.arange(g)) for g in (3, 5, 3, 1)]
    batched = encode_groups(layer, groups, CAUSAL)
    for grp, out in zip(groups, batched):
        assert torch.allclose(out, layer(grp.states, grp.positions, CAUSAL), atol=1e-13)


# [DERIVED] explicit gather then encode
def test_encode_indexed_shared_and_per_batch_index():
    layer = make_layer()
    src = torch.randn(2, 10, 8, dtype=torch.float64)
    pos = torch.arange(10)
    idx = torch.tensor([[0, 3, 4], [9, 1, 2]])
    out = encode_indexed(layer, src, pos, idx)
    assert torch.allclose(out[:, 1], layer(src[:, [9, 1, 2]]), atol=1e-13)
    per_batch = idx.expand(2, 2, 3)
    assert torch.allclose(encode_indexed(layer, src, pos, per_batch), out, atol=1e-13)


# [TRIVIAL] hand-computed values
@pytest.mark.parametrize(
    "args, expected",
    [
        ((1024, 0, 64, 48, "full"), 1_048_576),
        ((1024, 0, 64, 64, "sliding"), 65_536),
        ((512, 0, 64, 64, "cluster"), 32_768),
    ],
)
def test_attention_cost_examples(args, expected):
    assert attention_cost(*args) == expected


# [DERIVED] closed forms recomputed in the test
@given(st.integers(1, 5000), st.integers(0, 8), st.integers(1, 128), st.data())
def test_attention_cost_closed_forms(x, q, l, data):
    m = data.draw(st.integers(1, l))
    K = -(-x // m)
    T = q * K + x
    assert attention_cost(x, q, l, m, "sliding") == K * (q + l) ** 2
    assert attention_cost(x, q, l, m, "lsh") == attention_cost(x, q, l, m, "cluster") == -(-T // m) * m * m
    assert attention_cost(x, q, l, m, "sparse-position") == (q + m) * K * K
    assert attention_cost(x, q, l, m, "full", d=3) == 3 * (q + x) ** 2


# [TRIVIAL]
def test_attention_cost_rejects_bad_input():
    with pytest.raises(ValueError):
        attention_cost(10, 0, 4, 8, "sliding")
    with pytest.raises(ValueError):
        attention_cost(10, 0, 4, 2, "dense")
