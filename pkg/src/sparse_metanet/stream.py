"""Online non-stationary 5-way classification streams over a labeled-example backend.

Consecutive tasks overlap in three controlled ways:

* perseveration classes: a global label from the previous task reappears under
  a different task-level id;
* kept classes: an unchanged (task id, global label) pair;
* novel classes: global labels absent from the previous task.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "valid", "test", "all")
DATASET_MAGIC = b"SMDS1"


class StreamError(RuntimeError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class LabeledDataset:
    classes: dict[int, np.ndarray]
    split: str = "all"
    feature_dim: int = 0

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        dims = {x.shape[1] for x in self.classes.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent feature dims {sorted(dims)}")
        if dims:
            self.feature_dim = dims.pop()

    @property
    def labels(self) -> list[int]:
        return sorted(self.classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.feature_dim == other.feature_dim and self.labels == other.labels
                and all(np.array_equal(self.classes[k], other.classes[k]) for k in self.classes))

    def subset(self, labels, split: str) -> "LabeledDataset":
        return LabeledDataset({int(k): self.classes[int(k)] for k in labels}, split, self.feature_dim)


def synth_dataset(n_classes: int, per_class: int, feature_dim: int, seed: int,
                  sigma: float = 0.3) -> LabeledDataset:
    """Gaussian clusters around unit-norm random means.

    Values are rounded to float32 so the on-disk format round-trips exactly.
    """
    if min(n_classes, per_class, feature_dim) <= 0:
        raise ValueError("n_classes, per_class and feature_dim must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    classes = {}
    for c in range(n_classes):
        x = means[c] + sigma * rng.standard_normal((per_class, feature_dim))
        classes[c] = x.astype(np.float32).astype(np.float64)
    return LabeledDataset(classes, "all", feature_dim)


def split_dataset(ds: LabeledDataset, counts=(40, 30, 30), seed: int = 0) -> dict[str, LabeledDataset]:
    """Partition classes (not examples) into disjoint train/valid/test pools."""
    if sum(counts) > len(ds.classes):
        raise ValueError(f"need {sum(counts)} classes, dataset has {len(ds.classes)}")
    order = np.random.default_rng(seed).permutation(ds.labels)
    out, start = {}, 0
    for name, n in zip(("train", "valid", "test"), counts):
        out[name] = ds.subset(sorted(int(v) for v in order[start:start + n]), name)
        start += n
    return out


# -- neutral binary format ---------------------------------------------------------


def write_dataset(path, ds: LabeledDataset) -> None:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<II", len(ds.classes), ds.feature_dim))
    for label in ds.labels:
        x = ds.classes[label]
        buf.write(struct.pack("<II", label, x.shape[0]))
        buf.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path, split: str = "all") -> LabeledDataset:
    data = Path(path).read_bytes()
    if data[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise ParseError("bad magic, expected SMDS1", 0)
    off = len(DATASET_MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise ParseError(f"truncated {what}: need {n} bytes, have {len(data) - off}", off)
        chunk = data[off:off + n]
        off += n
        return chunk

    n_classes, dim = struct.unpack("<II", take(8, "header"))
    if dim == 0:
        raise ParseError("feature_dim must be positive", off - 4)
    classes = {}
    for _ in range(n_classes):
        start = off
        label, n = struct.unpack("<II", take(8, "class record"))
        if label in classes:
            raise ParseError(f"duplicate class label {label}", start)
        raw = take(4 * n * dim, f"examples of class {label}")
        classes[label] = np.frombuffer(raw, dtype="<f4").reshape(n, dim).astype(np.float64)
    if off != len(data):
        raise ParseError(f"{len(data) - off} trailing bytes", off)
    return LabeledDataset(classes, split, dim)


# -- tasks --------------------------------------------------------------------------


@dataclass
class TaskSpec:
    task_map: dict[int, int]
    new_old_map: dict[int, int] = field(default_factory=dict)
    kept_ids: set[int] = field(default_factory=set)
    length: int = 1

    def to_json(self) -> dict:
        return {"task_map": {str(k): v for k, v in sorted(self.task_map.items())},
                "new_old_map": {str(k): v for k, v in sorted(self.new_old_map.items())},
                "kept_ids": sorted(self.kept_ids), "length": self.length}

    @classmethod
    def from_json(cls, d: dict) -> "TaskSpec":
        return cls({int(k): int(v) for k, v in d["task_map"].items()},
                   {int(k): int(v) for k, v in d["new_old_map"].items()},
                   {int(i) for i in d["kept_ids"]}, int(d["length"]))


@dataclass
class StreamConfig:
    nb_classes: int = 5
    nb_perv: int = 2
    nb_kept: int = 1
    task_length_range: tuple[int, int] = (15, 30)
    total_tasks: int = 400
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.task_length_range = tuple(int(v) for v in self.task_length_range)
        lo, hi = self.task_length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad task_length_range {self.task_length_range}")
        if self.nb_perv + self.nb_kept >= self.nb_classes:
            raise ValueError("nb_perv + nb_kept must be smaller than nb_classes")


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    perv_labels: np.ndarray
    kept_flags: np.ndarray
    epoch_done: bool
    task_index: int = 0
    round: int = 0


def check_task_pair(prev: TaskSpec, cur: TaskSpec) -> list[str]:
    """Brute-force check of the three construction criteria; returns violations."""
    problems = []
    prev_labels = set(prev.task_map.values())
    prev_by_label = {lbl: i for i, lbl in prev.task_map.items()}
    if len(set(cur.task_map.values())) != len(cur.task_map):
        problems.append("task_map not injective")
    for new_id, old_id in cur.new_old_map.items():
        lbl = cur.task_map.get(new_id)
        if prev.task_map.get(old_id) != lbl:
            problems.append(f"perseveration id {new_id}: label {lbl} not under old id {old_id}")
        if new_id == old_id or prev_by_label.get(lbl) == new_id:
            problems.append(f"perseveration id {new_id}: task-level label unchanged")
    for i in cur.kept_ids:
        if i not in prev.task_map or cur.task_map.get(i) != prev.task_map[i]:
            problems.append(f"kept id {i}: (id, label) changed")
    for i, lbl in cur.task_map.items():
        if i in cur.kept_ids or i in cur.new_old_map:
            continue
        if lbl in prev_labels:
            problems.append(f"novel id {i}: label {lbl} appeared in previous task")
    return problems


class OnlineTaskStream:
    """Task generator and batch iterator for one labeled pool.

    ``next_task`` builds a task satisfying the three overlap criteria against
    the previous one; ``next_batch`` serves shuffled mini-batches from the
    task's example pool, reshuffling when the pool is exhausted.
    """

    def __init__(self, dataset: LabeledDataset, cfg: StreamConfig, test_dataset: LabeledDataset | None = None):
        self.dataset = dataset
        self.test_dataset = test_dataset
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.current_task: TaskSpec | None = None
        self.old_task: TaskSpec | None = None
        self.total_task = 0
        self.total_iter = 0
        self._pool = None

    def _choice(self, items, n: int) -> list[int]:
        items = sorted(items)
        if n > len(items):
            raise StreamError(f"need {n} items, only {len(items)} available")
        return [int(items[i]) for i in self.rng.choice(len(items), size=n, replace=False)]

    def _build_task(self) -> TaskSpec:
        cfg = self.cfg
        all_ids = set(range(cfg.nb_classes))
        labels = set(self.dataset.classes)
        lo, hi = cfg.task_length_range
        prev = self.current_task
        if prev is None:
            ids = self._choice(all_ids, cfg.nb_classes)
            lbls = self._choice(labels, cfg.nb_classes)
            return TaskSpec(dict(zip(ids, lbls)), length=int(self.rng.integers(lo, hi + 1)))
        kept_ids = self._choice(prev.task_map, cfg.nb_kept)
        free = sorted(all_ids - set(kept_ids))
        perv_old = self._choice(free, cfg.nb_perv)
        # perseveration classes must move to a different task-level id
        while True:
            perv_new = self._choice(free, cfg.nb_perv)
            if all(a != b for a, b in zip(perv_new, perv_old)):
                break
        new_ids = self._choice(set(free) - set(perv_new), cfg.nb_classes - cfg.nb_kept - cfg.nb_perv)
        novel_pool = labels - set(prev.task_map.values())
        new_lbls = self._choice(novel_pool, len(new_ids))
        task_map = {i: prev.task_map[i] for i in kept_ids}
        task_map.update({n: prev.task_map[o] for n, o in zip(perv_new, perv_old)})
        task_map.update(dict(zip(new_ids, new_lbls)))
        return TaskSpec(task_map, dict(zip(perv_new, perv_old)), set(kept_ids),
                        int(self.rng.integers(lo, hi + 1)))

    def next_task(self, task: TaskSpec | None = None) -> TaskSpec:
        task = task if task is not None else self._build_task()
        self.old_task, self.current_task = self.current_task, task
        self._pool = {True: self._make_pool(self.dataset), False: None}
        if self.test_dataset is not None:
            self._pool[False] = self._make_pool(self.test_dataset)
        self.total_task += 1
        self.current_task_iter = 0
        return task

    def _make_pool(self, ds: LabeledDataset) -> dict:
        task = self.current_task
        xs, ys, pv, kp = [], [], [], []
        for idc, lbl in sorted(task.task_map.items()):
            if lbl not in ds.classes:
                raise StreamError(f"label {lbl} missing from dataset")
            x = ds.classes[lbl]
            xs.append(x)
            ys.append(np.full(len(x), idc))
            pv.append(np.full(len(x), task.new_old_map.get(idc, -1)))
            kp.append(np.full(len(x), idc in task.kept_ids))
        pool = {"x": np.concatenate(xs), "y": np.concatenate(ys), "perv": np.concatenate(pv),
                "kept": np.concatenate(kp), "pos": 0}
        pool["order"] = self.rng.permutation(len(pool["y"]))
        return pool

    def next_batch(self, train: bool = True) -> Batch:
        if self.current_task is None:
            raise StreamError("next_batch called before next_task")
        pool = self._pool[train]
        if pool is None:
            raise StreamError("no held-out dataset configured for train=False")
        bs = self.cfg.batch_size
        n = len(pool["y"])
        idx = pool["order"][pool["pos"]:pool["pos"] + bs]
        pool["pos"] += bs
        epoch_done = pool["pos"] >= n
        if epoch_done:
            pool["order"] = self.rng.permutation(n)
            pool["pos"] = 0
        rnd = self.current_task_iter
        if train:
            self.current_task_iter += 1
            self.total_iter += 1
        return Batch(pool["x"][idx], pool["y"][idx].astype(np.int64), pool["perv"][idx].astype(np.int64),
                     pool["kept"][idx].astype(bool), epoch_done, self.total_task - 1, rnd)

    def batches(self):
        """Yield every round of ``cfg.total_tasks`` tasks in order."""
        for _ in range(self.cfg.total_tasks):
            task = self.next_task()
            for _ in range(task.length):
                yield self.next_batch(True)

    def tasks(self, n: int | None = None) -> list[TaskSpec]:
        """Generate ``n`` task specs without serving batches."""
        out = []
        for _ in range(self.cfg.total_tasks if n is None else n):
            task = self._build_task()
            self.old_task, self.current_task = self.current_task, task
            self.total_task += 1
            out.append(task)
        return out


def write_manifest(path, tasks: list[TaskSpec]) -> None:
    with open(path, "w") as f:
        for i, t in enumerate(tasks):
            f.write(json.dumps({"task": i, **t.to_json()}) + "\n")


def read_manifest(path) -> list[TaskSpec]:
    with open(path) as f:
        return [TaskSpec.from_json(json.loads(line)) for line in f if line.strip()]


# -- metrics -----------------------------------------------------------------------


class StreamMetrics:
    """Running stream metrics.

    * task accuracy: per-task accuracy over all rounds, averaged over tasks;
    * perseveration rate: share of perseveration-class examples predicted as
      their previous task-level id;
    * interference: per kept class, accuracy during the current task minus its
      accuracy over the last ``end_window`` rounds of the previous task,
      averaged over tasks (negative means forgetting).
    """

    def __init__(self, end_window: int = 5):
        self.end_window = end_window
        self.task_acc: list[float] = []
        self.persev_hits = 0
        self.persev_total = 0
        self.interference: list[float] = []
        self._task = None
        self._correct = self._total = 0
        self._rounds: list[dict] = []
        self._prev_rounds: list[dict] = []
        self._kept_ids: set[int] = set()

    def _close_task(self) -> None:
        if self._total:
            self.task_acc.append(self._correct / self._total)
        diffs = []
        for cid in self._kept_ids:
            now = self._class_acc(self._rounds, cid)
            before = self._class_acc(self._prev_rounds[-self.end_window:], cid)
            if now is not None and before is not None:
                diffs.append(now - before)
        if diffs:
            self.interference.append(float(np.mean(diffs)))
        self._prev_rounds = self._rounds
        self._rounds = []
        self._correct = self._total = 0

    @staticmethod
    def _class_acc(rounds: list[dict], cid: int):
        hit = tot = 0
        for r in rounds:
            h, n = r.get(cid, (0, 0))
            hit += h
            tot += n
        return hit / tot if tot else None

    def update(self, predictions, batch: Batch, kept_ids=None) -> None:
        if batch.task_index != self._task:
            if self._task is not None:
                self._close_task()
            self._task = batch.task_index
            self._kept_ids = set(kept_ids) if kept_ids is not None else set(
                int(v) for v in np.unique(batch.labels[batch.kept_flags]))
        elif kept_ids is None:
            self._kept_ids |= set(int(v) for v in np.unique(batch.labels[batch.kept_flags]))
        pred = np.asarray(predictions)
        hit = pred == batch.labels
        self._correct += int(hit.sum())
        self._total += hit.size
        pmask = batch.perv_labels >= 0
        self.persev_total += int(pmask.sum())
        self.persev_hits += int((pred[pmask] == batch.perv_labels[pmask]).sum())
        per_class = {}
        for cid in np.unique(batch.labels):
            sel = batch.labels == cid
            per_class[int(cid)] = (int(hit[sel].sum()), int(sel.sum()))
        self._rounds.append(per_class)

    def summary(self) -> dict[str, float]:
        if self._rounds:
            self._close_task()
            self._task = None
        return {
            "task_accuracy": float(np.mean(self.task_acc)) if self.task_acc else float("nan"),
            "perseveration_rate": self.persev_hits / self.persev_total if self.persev_total else 0.0,
            "interference": float(np.mean(self.interference)) if self.interference else 0.0,
            "n_tasks": len(self.task_acc),
        }


def stream_metrics(predictions, batch: Batch, metrics: StreamMetrics | None = None) -> StreamMetrics:
    metrics = metrics or StreamMetrics()
    metrics.update(predictions, batch)
    return metrics


def classification_loss(tape, net, batch: Batch):
    """Softmax cross-entropy on task-level labels; predictions are made before any update."""
    from .autodiff import softmax_cross_entropy

    logits = net.forward(tape, batch.features)
    loss = softmax_cross_entropy(tape, logits, batch.labels)
    pred = logits.value.argmax(axis=1)
    return loss, {"correct": int((pred == batch.labels).sum()), "total": int(pred.size),
                  "predictions": pred}
