import numpy as np
import pytest

from sparse_metanet.core import MLP, FastWeightConfig
from sparse_metanet.optim import OptimizerSpec
from sparse_metanet.stream import OnlineTaskStream, StreamConfig, classification_loss, synth_dataset
from sparse_metanet.trainer import FAST, GRADIENT, OnlineLearner, PlainLearner, TrainerConfig, evaluate_stream


def batches(seed=0, n_tasks=50):
    ds = synth_dataset(12, 30, 6, seed=seed)
    return OnlineTaskStream(ds, StreamConfig(total_tasks=n_tasks, batch_size=8, seed=seed)).batches()


def learner(seed=0, k=3, p=0.3, carry="carry", sizes=(6, 12, 5)):
    cfg = TrainerConfig(k=k, fast=FastWeightConfig(p_train=p, p_eval=p, carry_mode=carry),
                        slow_optimizer=OptimizerSpec("adam", 1e-2), meta_optimizer=OptimizerSpec("adam", 1e-2),
                        seed=seed)
    return OnlineLearner(MLP(list(sizes), seed=seed), cfg, classification_loss)


def weights(model):
    return [p.value.copy() for p in {**model.slow_params(), **model.meta_params()}.values()]


def test_schedule_k3():
    L, b = learner(), batches()
    kinds = [L.step(next(b), t).update_kind for t in range(1, 10)]
    assert kinds == [FAST, FAST, GRADIENT] * 3
    assert (L.n_gradient, L.n_fast) == (3, 6)


def test_k1_needs_explicit_opt_in():
    with pytest.raises(ValueError):
        TrainerConfig(k=1)
    assert TrainerConfig(k=1, allow_k1=True).k == 1


def test_rerun_gives_identical_losses():
    def run():
        L, b = learner(seed=4), batches(4)
        return [L.step(next(b), t).loss for t in range(1, 101)]
    assert run() == run()


def test_p_zero_matches_plain_truncated_bptt():
    L, b1 = learner(p=0.0), batches(1)
    plain = PlainLearner(MLP([6, 12, 5], seed=0, fast=False), 3, OptimizerSpec("adam", 1e-2), classification_loss)
    b2 = batches(1)
    for t in range(1, 61):
        r1, r2 = L.step(next(b1), t), plain.step(next(b2), t)
        assert r1.loss == r2.loss
    assert all(not layer.M.value.any() for layer in L.model.layers)
    for a, b in zip(L.model.slow_params().values(), plain.model.slow_params().values()):
        assert a.value.tobytes() == b.value.tobytes()


def test_fast_weights_move_and_meta_weights_learn():
    L, b = learner(), batches()
    meta_before = [p.value.copy() for p in L.model.meta_params().values()]
    for t in range(1, 31):
        L.step(next(b), t)
    assert any(layer.M.value.any() for layer in L.model.layers if layer.fast)
    assert any(not np.array_equal(a, p.value) for a, p in zip(meta_before, L.model.meta_params().values()))


def test_evaluation_leaves_slow_and_meta_weights_untouched():
    L, b = learner(), batches()
    for t in range(1, 31):
        L.step(next(b), t)
    before = weights(L.model)
    recs = list(evaluate_stream(L, (next(b) for _ in range(40))))
    assert all(r.update_kind == FAST for r in recs)
    assert all(np.array_equal(a, c) for a, c in zip(before, weights(L.model)))
    assert len(L.tape) == 0


def test_zero_eval_probability_freezes_the_model():
    L, b = learner(p=0.0), batches()
    M_before = [layer.M.value.copy() for layer in L.model.layers]
    for t in range(1, 20):
        L.eval_step(next(b), t)
    assert all(np.array_equal(a, layer.M.value) for a, layer in zip(M_before, L.model.layers))


@pytest.mark.parametrize("mode", ["carry", "reset"])
def test_carry_modes_at_window_boundary(mode):
    L, b = learner(carry=mode), batches()
    for t in range(1, 3):
        L.step(next(b), t)
    M_before = [layer.M.value.copy() for layer in L.model.layers]
    L.step(next(b), 3)
    for before, layer in zip(M_before, L.model.layers):
        assert layer.M.is_leaf
        if mode == "reset":
            assert not layer.M.value.any()
        else:
            assert np.array_equal(before, layer.M.value)


def test_tape_bounded_by_window():
    L, b = learner(), batches()
    for t in range(1, 301):
        L.step(next(b), t)
        if t % 3 == 0:
            assert len(L.tape) == 0
    assert L.tape.peak_nodes == max(L.window_peaks)
    assert len(L.window_peaks) == 100 and max(L.window_peaks) <= 2 * min(L.window_peaks)


class _Exploding:
    """Loss that turns non-finite at chosen steps."""

    def __init__(self, bad_steps):
        self.bad, self.t = set(bad_steps), 0

    def __call__(self, tape, model, batch):
        self.t += 1
        loss, info = classification_loss(tape, model, batch)
        if self.t in self.bad:
            loss = tape.scale(loss, np.inf)
        return loss, info


def test_divergence_is_recorded_not_fatal():
    L, b = learner(), batches()
    L.loss_fn = _Exploding({3, 5})
    before = weights(L.model)
    recs = [L.step(next(b), t) for t in range(1, 4)]
    assert recs[-1].diverged and L.diverged
    assert all(np.array_equal(a, c) for a, c in zip(before, weights(L.model)))
    recs += [L.step(next(b), t) for t in range(4, 10)]
    assert [r.diverged for r in recs] == [False, False, True, False, True, False, False, False, False]
