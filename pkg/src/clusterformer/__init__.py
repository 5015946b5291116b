"""Sliding-window and cluster-routed Transformer layers for long sequences."""

from .attention import (
    AttentionConfig,
    MaskSpec,
    MultiHeadAttention,
    TokenGroup,
    TransformerLayer,
    attention_cost,
    multi_head_attention,
    transformer_layer,
)
from .baselines import LSHLayer, SparsePositionLayer, lsh_assign, lsh_layer, sparse_position_layer
from .clustering import (
    Centroids,
    ClusterFormerLayer,
    ClusterRoute,
    MemoryBank,
    UpdateSchedule,
    assign_clusters,
    cluster_former_layer,
    kmeans,
    maybe_update_centroids,
    memory_push,
    order_centroids_greedy,
    scatter_back,
    sort_and_chunk,
)
from .checkpoint import CheckpointCorrupt, CheckpointError, load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticTaskSpec, gen_char_lm, gen_kv_retrieval
from .model import ClusterFormerModel, ModelConfig, build_model
from .nn import Adam, AdamState, adam_step, finite_diff_grad_check, layer_norm_rows, softmax_rows
from .train import TrainingDiverged, TrainRun, evaluate, train
from .sliding import ChunkLayout, LayerState, gather_chunk, plan_chunks, scatter_merge, sliding_window_layer

__version__ = "0.1.0"
