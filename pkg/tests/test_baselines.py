import numpy as np
import pytest

from sparse_metanet import baselines
from sparse_metanet.baselines import BaselineSpec, StreamBaseline, grid, pretrain, run_baseline, snapshot
from sparse_metanet.optim import OptimizerSpec
from sparse_metanet.stream import OnlineTaskStream, StreamConfig, split_dataset, synth_dataset

SIZES = [8, 16, 5]


@pytest.fixture(scope="module")
def data():
    return split_dataset(synth_dataset(40, 30, 8, seed=0), (16, 12, 12), seed=0)


def stream(data, n_tasks=6, seed=0):
    return OnlineTaskStream(data["test"], StreamConfig(task_length_range=(3, 5), total_tasks=n_tasks,
                                                       batch_size=8, seed=seed))


def test_grid_size():
    runs = grid("online")
    assert len(runs) == 10 and len({(r.optimizer.kind, r.optimizer.lr) for r in runs}) == 10


def test_unknown_protocol():
    with pytest.raises(ValueError):
        BaselineSpec("sometimes_reset")


def test_pretrain_stops_and_reinitializes_head(data):
    net, info = pretrain(SIZES, data["train"], seed=0, opt=OptimizerSpec("adam", 1e-2), max_epochs=40, patience=2)
    assert 1 <= info["epochs"] <= 40 and info["val_accuracy"] == max(info["history"])
    assert net.layers[-1].W.shape == (5, 16) and not any(L.fast for L in net.layers)


def test_reset_pretrained_restores_weights_each_task(data):
    net, _ = pretrain(SIZES, data["train"], seed=0, opt=OptimizerSpec("adam", 1e-2), max_epochs=3)
    base = StreamBaseline(BaselineSpec("reset_pretrained", OptimizerSpec("adam", 1e-2)), SIZES, 0, net)
    start = snapshot(net)
    seen = []
    orig = base.start_task

    def spy():
        orig()
        seen.append(snapshot(base.model))
        assert base.learner.opt.step_count == 0

    base.start_task = spy
    base.start_stream()
    base.run(stream(data).batches())
    assert len(seen) == 5
    for snap in seen:
        assert all(a.tobytes() == b.tobytes() for a, b in zip(snap, start))


def test_online_optimizer_never_resets_within_stream(data):
    base = StreamBaseline(BaselineSpec("online", OptimizerSpec("adam", 1e-2)), SIZES, 0)
    base.start_stream()
    counts = []
    for t, b in enumerate(stream(data).batches(), 1):
        base.learner.step(b, t)
        counts.append(base.learner.opt.step_count)
    assert counts == list(range(1, len(counts) + 1))


def test_offline_reset_reinitializes_between_tasks(data):
    base = StreamBaseline(BaselineSpec("offline_reset", OptimizerSpec("adam", 1e-2)), SIZES, 0)
    first = snapshot(base.model)
    base.start_task()
    second = snapshot(base.model)
    assert not np.array_equal(first[0], second[0])
    assert base.learner.opt.step_count == 0


def test_pretrained_protocol_needs_network():
    with pytest.raises(ValueError):
        StreamBaseline(BaselineSpec("online_pretrained"), SIZES, 0)


def test_run_baseline_dispatch(data):
    out = run_baseline(BaselineSpec("online", OptimizerSpec("adam", 1e-2)), "stream", 0,
                       stream=stream(data), sizes=SIZES)
    assert out["n_tasks"] == 6
    with pytest.raises(ValueError):
        run_baseline(BaselineSpec(), "atari", 0)


def test_wcst_offline_reset_gets_fresh_network_per_task():
    spec = BaselineSpec("offline_reset", OptimizerSpec("adam", 1e-3), (8, 8))
    recs = baselines.run_wcst_baseline(spec, 0, n_tasks=3, max_episodes_per_task=5)
    assert len(recs) == 3
    with pytest.raises(ValueError):
        baselines.run_wcst_baseline(BaselineSpec("online_pretrained", hidden=(8, 8)), 0, 1)
