import math

import numpy as np
import pytest
import torch

from clusterformer.checkpoint import CheckpointCorrupt, CheckpointError, load_checkpoint, save_checkpoint
from clusterformer.data import Dataset, SyntheticTaskSpec, gen_kv_retrieval
from clusterformer.model import CF, LSH, SW, ModelConfig, build_model
from clusterformer.nn import Adam
from clusterformer.train import TrainingDiverged, TrainRun, evaluate, train


def tiny_task(n=32, **kw):
    spec = dict(seq_len=96, num_pairs=2, num_keys=4, num_values=4, num_noise=4, min_distance=20, num_examples=n, seed=0)
    spec.update(kw)
    return gen_kv_retrieval(SyntheticTaskSpec(**spec))


def tiny_model(ds, schedule=(SW, CF, SW), **kw):
    cfg = dict(layer_schedule=list(schedule), d=16, heads=2, ffn_dim=32, l=16, m=12, clusters=3, hashes=3,
               memory_size=2000, vocab_size=ds.vocab_size, question_len=ds.question_len)
    cfg.update(kw)
    return build_model(ModelConfig(**cfg))


# [TRIVIAL]
def test_run_validation():
    with pytest.raises(ValueError, match="warmup"):
        TrainRun(warmup=11, max_steps=10)
    run = TrainRun(lr=1.0, warmup=4, max_steps=10)
    assert [run.lr_at(s) for s in (1, 4, 5)] == [0.25, 1.0, 1.0]


# [TRIVIAL]
def test_zero_lr_keeps_parameters_and_loss():
    ds = tiny_task().subset([0])  # every batch is the same example
    model = tiny_model(ds)
    before = {n: p.clone() for n, p in model.named_parameters()}
    hist = train(model, ds, TrainRun(lr=0.0, max_steps=6, log_interval=1, batch_size=4, centroid_frequency=None))
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n]), n
    assert len({h["loss"] for h in hist}) == 1


# [TRIVIAL]
def test_frozen_schedule_keeps_initial_centroids():
    ds = tiny_task()
    model = tiny_model(ds)
    init = model.cluster_layers()[0].centroids.vectors.copy()
    train(model, ds, TrainRun(max_steps=5, batch_size=4, centroid_frequency=None))
    c = model.cluster_layers()[0].centroids
    assert c.epoch == 0 and np.array_equal(c.vectors, init)


# [TRIVIAL]
def test_schedule_refreshes_centroids_and_logs_epoch():
    ds = tiny_task()
    model = tiny_model(ds)
    hist = train(model, ds, TrainRun(max_steps=6, batch_size=4, log_interval=2, centroid_frequency=2))
    assert [h["centroid_epoch_0"] for h in hist] == [1, 2, 3]
    assert model.iteration is None


# [TRIVIAL]
def test_overfit_tiny_dataset():
    ds = tiny_task(n=32, query_policy="end+question")
    model = tiny_model(ds)
    train(model, ds, TrainRun(lr=3e-3, max_steps=400, batch_size=16, centroid_frequency=50, log_interval=100))
    assert evaluate(model, ds) >= 0.99


# [TRIVIAL]
def test_divergence_reported():
    ds = tiny_task()
    model = tiny_model(ds)
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(model, ds, TrainRun(max_steps=3, batch_size=2))


# [TRIVIAL]
def test_training_is_deterministic():
    ds = tiny_task()
    runs = []
    for _ in range(2):
        model = tiny_model(ds, schedule=(SW, CF, LSH, SW))
        runs.append(train(model, ds, TrainRun(max_steps=8, batch_size=4, log_interval=2, centroid_frequency=3)))
    assert runs[0] == runs[1]


class Uniform(torch.nn.Module):
    def __init__(self, base):
        super().__init__()
        self.cfg = base.cfg
        self.base = base

    def forward(self, tokens, question=None):
        return torch.zeros(*tokens.shape, self.cfg.vocab_size)


class Oracle(Uniform):
    def __init__(self, base, ds):
        super().__init__(base)
        self.answers = {tuple(t): lab for t, lab in zip(ds.tokens.tolist(), ds.labels.tolist())}

    def forward(self, tokens, question=None):
        out = torch.full((*tokens.shape, self.cfg.vocab_size), -1e4)
        for b, row in enumerate(tokens.tolist()):
            for j, lab in enumerate(self.answers[tuple(row)]):
                out[b, tokens.shape[1] - len(self.answers[tuple(row)]) + j, lab] = 1e4
        return out


# [DERIVED] log V for uniform logits, 0 for a one-hot oracle
def test_metric_closed_forms():
    ds = tiny_task()
    base = tiny_model(ds)
    V = base.cfg.vocab_size
    uni = Uniform(base)
    assert evaluate(uni, ds, "perplexity") == pytest.approx(V)
    assert evaluate(uni, ds, "bits-per-char") == pytest.approx(math.log2(V))
    orc = Oracle(base, ds)
    assert evaluate(orc, ds, "accuracy") == 1.0
    assert evaluate(orc, ds, "perplexity") == pytest.approx(1.0)
    with pytest.raises(ValueError, match="empty"):
        evaluate(uni, ds.subset(np.arange(0)))
    with pytest.raises(ValueError):
        evaluate(uni, ds, "f1")


# [TRIVIAL]
def test_incompatible_dataset_rejected():
    ds = tiny_task()
    model = tiny_model(tiny_task(query_policy="end+question"))
    with pytest.raises(ValueError, match="question length"):
        train(model, ds, TrainRun(max_steps=1))


# [TRIVIAL]
def test_checkpoint_round_trip(tmp_path):
    ds = tiny_task()
    model = tiny_model(ds, schedule=(SW, CF, LSH, SW))
    opt = Adam(model.named_parameters())
    train(model, ds, TrainRun(max_steps=6, batch_size=4, centroid_frequency=2), optimizer=opt)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, opt)
    loaded = load_checkpoint(path)
    model.eval()
    loaded.model.eval()
    toks = torch.as_tensor(ds.tokens[:4])
    assert torch.equal(model(toks), loaded.model(toks))
    assert evaluate(model, ds, "perplexity") == evaluate(loaded.model, ds, "perplexity")
    cf_a, cf_b = model.cluster_layers()[0], loaded.model.cluster_layers()[0]
    assert cf_a.centroids.epoch == cf_b.centroids.epoch == 3
    assert np.array_equal(cf_a.bank.rows(), cf_b.bank.rows())
    assert loaded.optimizer.state.step == 6
    for n, m in opt.state.first_moment.items():
        assert torch.equal(m, loaded.optimizer.state.first_moment[n])


# [TRIVIAL]
def test_checkpoint_restores_rng(tmp_path):
    ds = tiny_task()
    model = tiny_model(ds)
    torch.manual_seed(123)
    save_checkpoint(tmp_path / "m.ckpt", model)
    expected = torch.rand(3)
    load_checkpoint(tmp_path / "m.ckpt")
    assert torch.equal(torch.rand(3), expected)


# [TRIVIAL]
def test_checkpoint_truncated_and_mismatched(tmp_path):
    ds = tiny_task()
    model = tiny_model(ds)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointCorrupt):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointCorrupt):
        load_checkpoint(tmp_path / "junk.ckpt")
    wider = tiny_model(ds, d=32, heads=2)
    with pytest.raises(CheckpointError, match="shape mismatch for tensor 'model/position_embedding'"):
        load_checkpoint(path, wider)
    bad = bytearray(raw)
    bad[8] = 99  # version field
    (tmp_path / "ver.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")
