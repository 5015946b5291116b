import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterformer.attention import CAUSAL, NO_MASK, TokenGroup
from clusterformer.sliding import (
    LayerState,
    flatten_state,
    gather_chunk,
    plan_chunks,
    scatter_merge,
    sliding_window_layer,
    stack_state,
    unflatten_state,
)

from conftest import identity_layer, make_layer


def random_state(B, q, x, l, m, d=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    question = torch.randn(B, q, d, generator=g, dtype=torch.float64) if q else None
    return LayerState.from_inputs(question, torch.randn(B, x, d, generator=g, dtype=torch.float64), l, m)


layouts = st.integers(1, 40).flatmap(
    lambda x: st.integers(1, 12).flatmap(
        lambda l: st.tuples(st.just(x), st.just(l), st.integers(1, l), st.integers(0, 3))
    )
)


# [PAPER] K=45 and K=24 from the published window settings
def test_layout_examples():
    lay = plan_chunks(2, 5, 3, 2)
    assert lay.K == 3 and lay.slices == [(0, 3), (2, 5), (4, 5)]
    lay = plan_chunks(0, 6, 3, 3)
    assert lay.K == 2 and lay.slices == [(0, 3), (3, 6)]
    assert plan_chunks(0, 10000, 256, 224).K == 45
    assert plan_chunks(0, 3072, 256, 128).K == 24


# [TRIVIAL]
def test_layout_errors():
    for args in [(0, 0, 3, 2), (-1, 4, 3, 2), (0, 4, 2, 3), (0, 4, 2, 0)]:
        with pytest.raises(ValueError):
            plan_chunks(*args)


# [DERIVED] brute-force coverage count
@given(layouts)
def test_slices_cover_every_position(args):
    x, l, m, q = args
    lay = plan_chunks(q, x, l, m)
    assert lay.slices[0][0] == 0 and lay.slices[-1][1] == x
    assert all(c >= 1 for c in lay.coverage.tolist())
    assert all(0 < e - s <= l for s, e in lay.slices)


# [TRIVIAL]
def test_gather_chunk_rows():
    st_ = random_state(1, 1, 5, 3, 2)
    grp = gather_chunk(st_, 0)
    assert len(grp) == 4
    assert torch.equal(grp.states[0, 0], st_.question[0, 0, 0])
    assert torch.equal(grp.states[0, 1:], st_.context[0, 0:3])
    assert grp.positions.tolist() == [-1, 0, 1, 2]
    assert len(gather_chunk(st_, 2)) == 1 + 1
    bare = gather_chunk(random_state(1, 0, 5, 3, 2), 1)
    assert bare.positions.tolist() == [2, 3, 4]
    with pytest.raises(IndexError):
        gather_chunk(st_, 3)


# [TRIVIAL] hand-computed means
def test_merge_two_point_mean_and_passthrough():
    lay = plan_chunks(0, 3, 2, 1)  # chunks [0,2), [1,3), [2,3)
    outs = [torch.tensor([[[0.0], [1.0]]]), torch.tensor([[[3.0], [5.0]]]), torch.tensor([[[7.0]]])]
    merged = scatter_merge(outs, lay).context[0, :, 0]
    assert merged.tolist() == [0.0, 2.0, 6.0]
    lay = plan_chunks(0, 4, 2, 2)
    outs = [torch.full((1, 2, 1), 9.0), torch.full((1, 2, 1), 9.0)]
    assert torch.all(scatter_merge(outs, lay).context == 9.0)


# [TRIVIAL]
def test_merge_rejects_wrong_shapes():
    lay = plan_chunks(0, 5, 3, 2)
    with pytest.raises(ValueError):
        scatter_merge([torch.zeros(1, 3, 1)] * 2, lay)
    with pytest.raises(ValueError):
        scatter_merge([torch.zeros(1, 3, 1)] * 3, lay)


# [TRIVIAL] invariant
@given(layouts, st.integers(0, 2**16))
@settings(max_examples=60, deadline=None)
def test_identity_layer_preserves_state(args, seed):
    x, l, m, q = args
    st_ = random_state(2, q, x, l, m, seed=seed)
    out = sliding_window_layer(st_, identity_layer)
    # a mean of c equal values is exact only up to rounding
    assert torch.allclose(out.context, st_.context, rtol=1e-15, atol=0)
    assert torch.equal(out.question, st_.question)


# [DERIVED] unchunked layer
def test_single_chunk_equals_full_layer():
    layer = make_layer()
    st_ = random_state(2, 2, 7, 8, 8, d=8)
    assert st_.layout.K == 1
    out = sliding_window_layer(st_, layer, CAUSAL)
    rows = stack_state(st_)
    pos = torch.cat([torch.arange(-2, 0), torch.arange(7)])
    ref = layer(rows, pos, CAUSAL)
    assert torch.allclose(stack_state(out), ref, atol=1e-12)


# [DERIVED] each chunk encoded alone
def test_chunks_encoded_independently():
    layer = make_layer()
    st_ = random_state(1, 1, 9, 4, 3, d=8)
    out = sliding_window_layer(st_, layer)
    for k in range(st_.layout.K):
        grp = gather_chunk(st_, k)
        ref = layer(grp.states)
        assert torch.allclose(out.question[0, k], ref[0, :1], atol=1e-12)


# [TRIVIAL] invariant
@given(layouts, st.integers(0, 2**16))
@settings(max_examples=60, deadline=None)
def test_flatten_round_trip(args, seed):
    x, l, m, q = args
    st_ = random_state(2, q, x, l, m, seed=seed)
    rows, pos = flatten_state(st_)
    assert rows.shape[1] == st_.layout.flat_rows == len(pos)
    back = unflatten_state(rows, st_.layout)
    assert torch.equal(back.context, st_.context) and torch.equal(back.question, st_.question)


# [TRIVIAL]
def test_flatten_order_example():
    st_ = random_state(1, 1, 5, 3, 2)
    _, pos = flatten_state(st_)
    assert pos.tolist() == [-1, 0, 1, -1, 2, 3, -1, 4]


# [TRIVIAL]
def test_state_shape_validation():
    lay = plan_chunks(1, 5, 3, 2)
    with pytest.raises(ValueError):
        LayerState(torch.zeros(1, 2, 1, 4), torch.zeros(1, 5, 4), lay)
    with pytest.raises(ValueError):
        LayerState(torch.zeros(1, 3, 1, 4), torch.zeros(1, 4, 4), lay)


# [TRIVIAL]
def test_bank_receives_flattened_rows():
    from clusterformer.clustering import MemoryBank

    bank = MemoryBank(1000, 4)
    st_ = random_state(2, 1, 9, 4, 3)
    sliding_window_layer(st_, identity_layer, bank=bank)
    assert len(bank) == 2 * st_.layout.flat_rows
