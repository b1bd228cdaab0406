import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparse_metanet.autodiff import Tape, softmax_cross_entropy
from sparse_metanet.core import MLP
from sparse_metanet.optim import Optimizer, OptimizerSpec
from sparse_metanet.stream import (OnlineTaskStream, ParseError, StreamConfig, StreamError,
                                   StreamMetrics, TaskSpec, check_task_pair, load_dataset, read_manifest,
                                   split_dataset, synth_dataset, write_dataset, write_manifest)


def brute_force_pair_ok(prev: TaskSpec, cur: TaskSpec) -> bool:
    """Restates the three overlap rules directly on the (id, label) pairs."""
    prev_pairs = set(prev.task_map.items())
    prev_labels = set(prev.task_map.values())
    for i, lbl in cur.task_map.items():
        if i in cur.kept_ids:
            if (i, lbl) not in prev_pairs:
                return False
        elif i in cur.new_old_map:
            old = cur.new_old_map[i]
            if prev.task_map.get(old) != lbl or (i, lbl) in prev_pairs:
                return False
        elif lbl in prev_labels:
            return False
    return len(cur.task_map) == len(set(cur.task_map.values()))


def test_dataset_determinism_and_shape():
    a, b = synth_dataset(10, 7, 5, seed=3), synth_dataset(10, 7, 5, seed=3)
    assert a == b and a.feature_dim == 5 and a.labels == list(range(10))
    assert a != synth_dataset(10, 7, 5, seed=4)


def test_split_is_disjoint_by_class():
    parts = split_dataset(synth_dataset(100, 2, 3, seed=0), seed=1)
    sets = [set(parts[k].labels) for k in ("train", "valid", "test")]
    assert [len(s) for s in sets] == [40, 30, 30]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 4), st.integers(0, 1000))
def test_dataset_file_roundtrip(tmp_path_factory, n_classes, per_class, dim, seed):
    ds = synth_dataset(n_classes, per_class, dim, seed)
    path = tmp_path_factory.mktemp("ds") / "d.smds"
    write_dataset(path, ds)
    assert load_dataset(path) == ds


def test_truncated_and_corrupt_files_report_offsets(tmp_path):
    ds = synth_dataset(3, 4, 2, seed=0)
    path = tmp_path / "d.smds"
    write_dataset(path, ds)
    raw = path.read_bytes()
    (tmp_path / "cut").write_bytes(raw[:-5])
    with pytest.raises(ParseError) as err:
        load_dataset(tmp_path / "cut")
    assert err.value.offset > 0
    (tmp_path / "magic").write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(ParseError) as err:
        load_dataset(tmp_path / "magic")
    assert err.value.offset == 0
    (tmp_path / "tail").write_bytes(raw + b"\0")
    with pytest.raises(ParseError, match="trailing"):
        load_dataset(tmp_path / "tail")


def test_first_task_has_no_overlap():
    s = OnlineTaskStream(synth_dataset(20, 2, 2, seed=0), StreamConfig(seed=1))
    t = s.next_task()
    assert t.kept_ids == set() and t.new_old_map == {} and sorted(t.task_map) == list(range(5))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2), st.integers(0, 2))
def test_every_consecutive_pair_satisfies_overlap_rules(seed, nb_perv, nb_kept):
    cfg = StreamConfig(nb_perv=nb_perv, nb_kept=nb_kept, total_tasks=60, seed=seed)
    tasks = OnlineTaskStream(synth_dataset(30, 1, 2, seed=0), cfg).tasks()
    for prev, cur in zip(tasks, tasks[1:]):
        assert check_task_pair(prev, cur) == []
        assert brute_force_pair_ok(prev, cur)
        assert len(cur.kept_ids) == nb_kept and len(cur.new_old_map) == nb_perv


def test_pair_oracle_flags_violations():
    prev = TaskSpec({0: 10, 1: 11, 2: 12, 3: 13, 4: 14})
    good = TaskSpec({0: 10, 1: 12, 2: 11, 3: 20, 4: 21}, {1: 2, 2: 1}, {0})
    assert check_task_pair(prev, good) == [] and brute_force_pair_ok(prev, good)
    stale = TaskSpec({0: 10, 1: 11, 2: 12, 3: 20, 4: 21}, {1: 1}, {0})
    novel_reused = TaskSpec({0: 10, 1: 12, 2: 11, 3: 13, 4: 21}, {1: 2, 2: 1}, {0})
    for bad in (stale, novel_reused):
        assert check_task_pair(prev, bad) and not brute_force_pair_ok(prev, bad)


def test_exhausted_pool_raises():
    s = OnlineTaskStream(synth_dataset(6, 1, 2, seed=0), StreamConfig(seed=0))
    s.next_task()
    with pytest.raises(StreamError):
        s.next_task()


def test_batches_carry_perv_and_kept_annotations():
    s = OnlineTaskStream(synth_dataset(30, 20, 3, seed=0), StreamConfig(batch_size=50, seed=2))
    s.next_task()
    first = s.next_batch()
    assert (first.perv_labels == -1).all() and not first.kept_flags.any()
    task = s.next_task()
    b = s.next_batch()
    for y, pv, kept in zip(b.labels, b.perv_labels, b.kept_flags):
        assert kept == (y in task.kept_ids)
        assert pv == task.new_old_map.get(int(y), -1)
    assert b.task_index == 1 and b.round == 0


def test_stream_is_deterministic_and_lengths_in_range():
    ds = synth_dataset(30, 10, 3, seed=0)
    cfg = StreamConfig(task_length_range=(3, 6), total_tasks=20, batch_size=4, seed=5)
    a = list(OnlineTaskStream(ds, cfg).batches())
    b = list(OnlineTaskStream(ds, cfg).batches())
    assert all(np.array_equal(x.features, y.features) and np.array_equal(x.labels, y.labels) for x, y in zip(a, b))
    lengths = np.bincount([x.task_index for x in a])
    assert len(lengths) == 20 and lengths.min() >= 3 and lengths.max() <= 6


def test_manifest_roundtrip(tmp_path):
    tasks = OnlineTaskStream(synth_dataset(30, 1, 2, seed=0), StreamConfig(seed=0)).tasks(25)
    write_manifest(tmp_path / "m.jsonl", tasks)
    assert read_manifest(tmp_path / "m.jsonl") == tasks


# -- metrics --------------------------------------------------------------------------


def _stream_batches(n_tasks=30, seed=0):
    s = OnlineTaskStream(synth_dataset(30, 30, 3, seed=0),
                         StreamConfig(task_length_range=(6, 10), total_tasks=n_tasks, batch_size=16, seed=seed))
    return list(s.batches())


def test_perfect_predictor_metrics():
    m = StreamMetrics()
    for b in _stream_batches():
        m.update(b.labels, b)
    s = m.summary()
    assert (s["task_accuracy"], s["perseveration_rate"], s["interference"]) == (1.0, 0.0, 0.0)


def test_old_id_predictor_perseverates_fully():
    m = StreamMetrics()
    for b in _stream_batches():
        pred = np.where(b.perv_labels >= 0, b.perv_labels, b.labels)
        m.update(pred, b)
    assert m.summary()["perseveration_rate"] == 1.0


def test_random_predictor_accuracy_near_chance():
    rng = np.random.default_rng(0)
    m = StreamMetrics()
    batches = _stream_batches(200, seed=1)
    n = sum(len(b.labels) for b in batches)
    for b in batches:
        m.update(rng.integers(0, 5, size=len(b.labels)), b)
    # per-task averaging of a binomial rate; bound by the pooled sigma with slack for uneven task sizes
    assert abs(m.summary()["task_accuracy"] - 0.2) <= 3 * math.sqrt(0.16 / n) * 2


def test_interference_sees_forgetting_on_kept_classes():
    m = StreamMetrics(end_window=5)
    for b in _stream_batches():
        pred = b.labels.copy()
        if b.task_index > 0:
            pred[b.kept_flags] = (pred[b.kept_flags] + 1) % 5
        m.update(pred, b)
    assert m.summary()["interference"] < -0.5


def test_offline_classifier_separates_one_task():
    ds = synth_dataset(100, 64, 32, seed=1234)
    labels = ds.labels[:5]
    X = np.concatenate([ds.classes[c] for c in labels])
    y = np.repeat(np.arange(5), 64)
    net = MLP([32, 64, 5], seed=0, fast=False)
    opt = Optimizer(OptimizerSpec("adam", 1e-2), net.slow_params())
    tape = Tape()
    rng = np.random.default_rng(0)
    for _ in range(30):
        for idx in np.array_split(rng.permutation(len(y)), 10):
            opt.step(tape.backward(softmax_cross_entropy(tape, net.forward(tape, X[idx]), y[idx])))
            tape.truncate()
    acc = (net.forward(tape, X).value.argmax(1) == y).mean()
    assert acc >= 0.9
