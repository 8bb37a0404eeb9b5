import math

import numpy as np
import pytest

from fbgrape import controllers, errors, tasks, training
from fbgrape.controllers import LookupTable
from fbgrape.graddiff.engine import Rollout


def test_component_clip_then_norm():
    np.testing.assert_allclose(training.clip_gradient(np.array([3.0]), 0.5, 1.0), [0.5])
    g = training.clip_gradient(np.full(5, 2.0), 0.5, 1.0)
    np.testing.assert_allclose(g, np.full(5, 1 / math.sqrt(5)))
    np.testing.assert_allclose(training.clip_gradient(np.array([-0.2, 0.1]), 0.5, 1.0), [-0.2, 0.1])
    np.testing.assert_allclose(training.clip_gradient(np.array([30.0, 40.0]), None, 1.0), [0.6, 0.8])


def test_adam_first_steps_match_reference():
    st = training.AdamState(2, learning_rate=0.1, clipvalue=None, clipnorm=None)
    theta = np.zeros(2)
    m = v = np.zeros(2)
    ref = np.zeros(2)
    for t, g in enumerate([np.array([0.3, -0.2]), np.array([0.1, 0.4])], start=1):
        theta = training.adam_step(st, theta, g)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref + 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-7 / math.sqrt(1 - 0.999 ** t))
    np.testing.assert_allclose(theta, ref, rtol=1e-12)
    with pytest.raises(errors.ContractError):
        training.adam_step(st, np.zeros(3), np.zeros(3))


def test_learning_rate_decay():
    st = training.AdamState(1, learning_rate=0.2, decay_rate=0.1, decay_steps=100)
    assert st.lr() == pytest.approx(0.2)
    st.t = 50
    assert st.lr() == pytest.approx(0.2 * 0.1 ** 0.5)


def test_value_table_advantages():
    vt = training.ValueTable(0.5, values={(): 0.4, (0,): 0.7, (1,): 0.1})
    rewards = np.array([[0.0, 1.0], [0.0, 0.0]])
    outcomes = np.array([[0], [1]])
    np.testing.assert_allclose(vt.advantages(rewards, outcomes), [[0.3], [-0.3]])
    with pytest.raises(errors.ConfigError):
        training.ValueTable(0.0)


def test_value_update_moves_toward_batch_mean():
    batch = Rollout("mc", np.array([1.0, 0.0]), np.full(2, 0.5), np.array([[0], [0]]), np.zeros((2, 1)),
                    np.zeros((2, 1)), np.array([[0.0, 1.0], [0.0, 0.0]]), [], None)
    vt = training.value_update(training.ValueTable(0.5), batch)
    assert vt.get((0,)) == pytest.approx(0.25)
    assert vt.get(()) == pytest.approx(0.0)
    vt = training.value_update(vt, batch)
    assert vt.get(()) == pytest.approx(0.125)


def test_estimate_gradient_rejects_nan():
    batch = Rollout("mc", np.array([np.nan]), np.ones(1), np.zeros((1, 1), int), np.zeros((1, 1)),
                    np.zeros((1, 1)), np.zeros((1, 2)), [], None, grad=np.array([np.nan]))
    with pytest.raises(errors.NonFiniteError):
        training.estimate_gradient(batch)
    with pytest.raises(errors.ConfigError):
        training.sample_batch(tasks.tiny_task("two_outcome_toy"), LookupTable(1, [0]), np.zeros(1), 0, 0)


def test_training_improves_and_stops_at_target():
    task = tasks.build_task("two_outcome_toy")
    ctl = LookupTable.for_task(task)
    cfg = training.TrainConfig(iterations=400, learning_rate=0.05, target_return=0.99)
    res = training.train(task, ctl, np.array([2.5]), cfg)
    assert res.stopped == "target"
    assert res.curve[-1][1] >= 0.99
    assert res.curve[0][1] < 0.2


def test_mc_training_with_advantage_runs():
    task = tasks.tiny_task("purification")
    ctl, th = controllers.controller_init("table", task, 0)
    cfg = training.TrainConfig(iterations=30, batch_size=16, mode="mc", coefficients="advantage",
                               learning_rate=0.05, seed=3)
    res = training.train(task, ctl, th, cfg)
    assert res.value_table is not None and res.value_table.values
    first = np.mean([c[1] for c in res.curve[:5]])
    last = np.mean([c[1] for c in res.curve[-5:]])
    assert last > first


def test_thread_workers_reproduce_single_worker():
    task = tasks.tiny_task("stabilize_jc")
    ctl, th = controllers.controller_init("table", task, 0)
    base = dict(iterations=3, batch_size=8, mode="mc", seed=5)
    one = training.train(task, ctl, th, training.TrainConfig(**base, workers=1))
    two = training.train(task, ctl, th, training.TrainConfig(**base, workers=3))
    np.testing.assert_allclose(one.theta, two.theta, atol=1e-12)
    np.testing.assert_allclose([c[1] for c in one.curve], [c[1] for c in two.curve], atol=1e-12)


def test_evaluate_exact_and_sampled():
    task = tasks.build_task("two_outcome_toy")
    ctl = LookupTable.for_task(task)
    mean, se = training.evaluate(task, ctl, np.array([1.0]))
    assert (mean, se) == (pytest.approx(math.cos(0.5) ** 2), 0.0)
    task = tasks.build_task("continuous_toy")
    ctl, th = controllers.controller_init("table", task, 0)
    mean, se = training.evaluate(task, ctl, th, rollouts=200)
    assert se > 0 and 0 <= mean <= 1


def test_best_of_keeps_the_best_seed():
    task = tasks.build_task("two_outcome_toy")
    score, seed, ctl, res = training.train_best_of(task, "table", [0, 1, 2],
                                                   training.TrainConfig(iterations=5, learning_rate=0.01))
    scores = []
    for s in (0, 1, 2):
        c, th0 = controllers.controller_init("table", task, s)
        r = training.train(task, c, th0, training.TrainConfig(iterations=5, learning_rate=0.01, seed=s))
        scores.append(training.evaluate(task, c, r.theta)[0])
    assert score == pytest.approx(max(scores))
    assert seed == int(np.argmax(scores))
