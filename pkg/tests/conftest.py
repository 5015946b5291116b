import os

import pytest
import torch

from clusterformer.attention import AttentionConfig, TransformerLayer

torch.set_num_threads(int(os.environ.get("CLUSTERFORMER_THREADS", "1")))


def identity_layer(rows, positions=None, mask=None):
    return rows


def make_layer(d=8, heads=2, ffn=16, seed=0, dtype=torch.float64, causal=False):
    torch.manual_seed(seed)
    return TransformerLayer(AttentionConfig(d, heads, ffn, causal=causal)).to(dtype)


@pytest.fixture
def layer64():
    return make_layer()
