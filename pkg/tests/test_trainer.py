import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sslconvsac import autodiff as ad
from sslconvsac.augment import AugmentConfig
from sslconvsac.autodiff import Tape, Tensor
from sslconvsac.binsim import SceneSpec, generate_scene
from sslconvsac.errors import UsageError
from sslconvsac.net import ConvSAC
from sslconvsac.trainer import (
    Learner, OraclePolicy, RandomPolicy, ReplayBuffer, ReplaySample, TrainConfig,
    labeled_critic_loss, labeled_losses, online_loop, trailing_success,
    unlabeled_critic_loss, unlabeled_losses,
)
from sslconvsac.weights import MethodConfig

from conftest import numeric_grad, rel_err

LN2 = math.log(2.0)


def tiny_model(seed=0):
    return ConvSAC(hidden=4, critic_hidden=4, seed=seed)


def samples(n, size=8, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(ReplaySample(r.uniform(size=(7, size, size)),
                                (int(r.integers(size)), int(r.integers(size))),
                                r.uniform(-0.3, 0.3, 3), int(r.integers(2))))
    return out


def filled_buffer(n=12, seed=0, size=32):
    buf = ReplayBuffer(50, seed=seed)
    spec = SceneSpec()
    r = np.random.default_rng(seed)
    for i in range(n):
        state, gt = generate_scene(spec.with_seed(100 + i))
        fg = np.argwhere(gt.background_mask == 0)
        px = tuple(int(v) for v in fg[r.integers(len(fg))])
        buf.push(ReplaySample(state, px, gt.action[:, px[0], px[1]], int(r.integers(2))))
    return buf


# loss values ----------------------------------------------------------------------

def test_labeled_critic_examples():
    q = Tensor(np.full((1, 4, 4), 0.5))
    loss = labeled_critic_loss(q, np.array([1]), np.array([2]), [1])
    assert float(loss.data) == pytest.approx(0.693147, abs=1e-6)
    q = Tensor(np.full((1, 4, 4), 1.0))
    loss = labeled_critic_loss(q, np.array([1]), np.array([2]), [1])
    assert float(loss.data) < 1e-6


def test_actor_loss_without_entropy():
    model = tiny_model()
    batch = samples(2)
    _, actor = labeled_losses(batch, model, 0.0, np.random.default_rng(5))
    # recompute -Q(s, a') with the same noise
    emb = model.encode(np.stack([s.state for s in batch]))
    rows = np.array([s.pixel[0] for s in batch])
    cols = np.array([s.pixel[1] for s in batch])
    px = ad.gather_pixels(emb, rows, cols)
    act = model.actor_from_embedding(px, "sample", np.random.default_rng(5))
    q = model.critic_from_embedding(px, act.angles)
    assert float(actor.data) == pytest.approx(-float(q.data.mean()), abs=1e-12)


def test_unlabeled_single_pixel():
    h = w = 4
    q = Tensor(np.full((1, h, w), 0.5))
    lam = np.zeros((1, h, w))
    lam[0, 2, 3] = 1
    pseudo = np.ones((1, h, w))
    loss = unlabeled_critic_loss(q, pseudo, lam, h * w - 1)
    assert float(loss.data) == pytest.approx(0.693147 / 15, abs=1e-7)


def test_unlabeled_entropy_brute_force(rng):
    q = rng.uniform(0.02, 0.98, size=(1, 8, 8))
    lam = np.ones((1, 8, 8))
    lam[0, 0, 0] = 0
    pseudo = (q > 0.5).astype(float)
    got = float(unlabeled_critic_loss(Tensor(q), pseudo, lam, 63).data)
    want = 0.0
    for r in range(8):
        for c in range(8):
            if (r, c) != (0, 0):
                want -= math.log(max(q[0, r, c], 1 - q[0, r, c]))
    assert got == pytest.approx(want / 63, rel=1e-12)


def test_zero_lambda_kills_unlabeled(rng):
    model = tiny_model()
    states = rng.uniform(size=(2, 7, 6, 6))
    with Tape() as tape:
        c, a = unlabeled_losses(states, model, np.zeros((2, 6, 6)), np.ones((2, 6, 6)), 0.2, rng)
        total = c + a
    assert float(c.data) == 0 and float(a.data) == 0
    params = list(model.params.values())
    grads = tape.backward(total, wrt=params)
    assert all(not grads[p].any() for p in params)


def test_unlabeled_shape_check(rng):
    with pytest.raises(UsageError):
        unlabeled_losses(rng.uniform(size=(2, 7, 6, 6)), tiny_model(), np.zeros((2, 5, 6)),
                         np.zeros((2, 5, 6)), 0.2, rng)


# gradient checks on the full losses ------------------------------------------------

def test_full_losses_finite_difference():
    # the learner differentiates the critic loss w.r.t. encoder + critic and
    # the actor loss w.r.t. the actor head; detached inputs are held fixed
    model = tiny_model(3)
    assert model.num_params() <= 1000
    batch = samples(2, size=6, seed=1)
    strong = np.stack([s.state for s in batch])
    r = np.random.default_rng(2)
    lam = (r.uniform(size=(2, 6, 6)) > 0.6).astype(float)
    pseudo = (r.uniform(size=(2, 6, 6)) > 0.5).astype(float)

    def real(key):
        c, a = labeled_losses(batch, model, 0.2, np.random.default_rng(9))
        cu, au = unlabeled_losses(strong, model, lam, pseudo, 0.2, np.random.default_rng(9))
        return c + cu if key == "critic" else a + au

    mean_act = model.actor_forward(strong, "mean").angles.data.copy()

    def critic_frozen():
        c, _ = labeled_losses(batch, model, 0.2, np.random.default_rng(9))
        q = model.critic_forward(strong, mean_act)
        return c + unlabeled_critic_loss(q, pseudo, lam, 35)

    for key, params, ref in (("critic", model.critic_params, critic_frozen),
                             ("actor", model.actor_params, lambda: real("actor"))):
        with Tape() as tape:
            loss = real(key)
        grads = tape.backward(loss, wrt=params)
        for p in params:
            num = numeric_grad(lambda: float(ref().data), p.data)
            assert rel_err(grads[p], num) < 1e-4, (key, p.name)


# gradient support ------------------------------------------------------------------

def q_map_grad(q, rows, cols, rewards, lam=None, pseudo=None):
    qt = Tensor(q, requires_grad=True)
    with Tape() as tape:
        loss = labeled_critic_loss(qt, rows, cols, rewards)
        if lam is not None:
            loss = loss + unlabeled_critic_loss(qt, pseudo, lam, q.shape[1] * q.shape[2] - 1)
    return tape.backward(loss, wrt=[qt])[qt]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_support(seed):
    r = np.random.default_rng(seed)
    n, h, w = 3, 6, 6
    q = r.uniform(0.05, 0.95, size=(n, h, w))
    rows, cols = r.integers(h, size=n), r.integers(w, size=n)
    rewards = r.integers(2, size=n)
    g = q_map_grad(q, rows, cols, rewards)
    for i in range(n):
        support = set(zip(*np.nonzero(g[i])))
        assert support == {(rows[i], cols[i])}
    lam = (r.uniform(size=(n, h, w)) > 0.7) * r.uniform(0.2, 1.0, (n, h, w))
    lam[np.arange(n), rows, cols] = 0
    pseudo = (q > 0.5).astype(float)
    g = q_map_grad(q, rows, cols, rewards, lam, pseudo)
    for i in range(n):
        want = set(zip(*np.nonzero(lam[i]))) | {(rows[i], cols[i])}
        assert set(zip(*np.nonzero(g[i]))) == want


# replay buffer -------------------------------------------------------------------

def test_replay_fifo():
    buf = ReplayBuffer(5)
    for i in range(8):
        buf.push(i)
    assert list(buf) == [3, 4, 5, 6, 7]
    assert len(buf) == 5
    with pytest.raises(UsageError):
        ReplayBuffer(0)
    with pytest.raises(UsageError):
        ReplayBuffer(3).sample(2)


def test_train_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(learning_rate=0)
    with pytest.raises(UsageError):
        TrainConfig(steps_per_grasp=0)
    cfg = TrainConfig(method={"method": "fixmatch"}, augment={"depth_noise": 2.0})
    assert cfg.method.method == "fixmatch" and cfg.augment.depth_noise == 2.0


# train step ----------------------------------------------------------------------

def run_steps(method, n=3, seed=0, **kw):
    cfg = TrainConfig(method=MethodConfig(method, **kw), seed=seed, hidden=4, critic_hidden=4)
    learner = Learner(cfg)
    buf = filled_buffer(seed=seed)
    return learner, [learner.train_step(buf) for _ in range(n)]


@pytest.mark.parametrize("method", ["fixmatch", "flexmatch", "freematch"])
def test_determinism(method):
    a, ra = run_steps(method, tau=0.6)
    b, rb = run_steps(method, tau=0.6)
    assert ra == rb
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data, b.model.params[k].data)


def test_decomposition_exact():
    _, rows = run_steps("fixmatch", n=4, tau=0.5)
    assert any(r.accepted for r in rows)
    for r in rows:
        assert r.critic == r.critic_l + r.critic_u
        assert r.actor == r.actor_l + r.actor_u


def test_none_equals_plain_labeled_update():
    learner, rows = run_steps("none", n=1)
    # replay the same step by hand
    cfg = learner.config
    ref = Learner(cfg)
    buf = filled_buffer(seed=0)
    _, batch = buf.sample(cfg.batch_size, ref.rng)
    with Tape() as tape:
        c, a = labeled_losses(batch, ref.model, cfg.entropy_alpha, ref.rng)
    gc = tape.backward(c, wrt=ref.model.critic_params)
    ga = tape.backward(a, wrt=ref.model.actor_params)
    from sslconvsac.optim import adam_step
    adam_step(ref.params, [gc[p] for p in ref.model.critic_params] + [ga[p] for p in ref.model.actor_params],
              ref.adam)
    for k in ref.model.params:
        np.testing.assert_array_equal(ref.model.params[k].data, learner.model.params[k].data)
    assert rows[0].critic_u == 0 and rows[0].accepted == 0


def test_flexmatch_exact_mode_runs():
    learner, rows = run_steps("flexmatch", n=2, flexmatch_exact=True)
    assert learner.thresholds.step == 2 and not any(r.aborted for r in rows)


def test_contextual_soft_budget_step():
    learner, rows = run_steps("freematch", n=2, contextual=True, soft_weight=True, tau_lb=0.5, budget=5)
    assert all(r.accepted <= 5 * learner.config.batch_size for r in rows)
    assert learner.thresholds.class_tau.shape == (32, 32, 2)


# online loop ---------------------------------------------------------------------

def test_trailing_success():
    assert trailing_success([]) == 0.0
    bins = [[0, 15]] * 5 + [[3, 3]] * 15
    assert trailing_success(bins) == 1.0


def test_online_empty_bin():
    rows = online_loop(SceneSpec(objects=[]), RandomPolicy(), 20)
    assert all(r["reward"] == 0 for r in rows)
    assert rows[-1]["trailing_sr_15bins"] == 0.0


def test_online_oracle_is_perfect():
    rows = online_loop(SceneSpec(), OraclePolicy(), 120, seed=4)
    assert all(r["reward"] == 1 for r in rows)
    assert rows[-1]["trailing_sr_15bins"] == 1.0
    assert rows[-1]["bin"] > 1


def test_online_with_learner():
    cfg = TrainConfig(method=MethodConfig("fixmatch"), hidden=4, critic_hidden=4, steps_per_grasp=1)
    learner = Learner(cfg)
    rows = online_loop(SceneSpec(), RandomPolicy(), 4, learner=learner, seed=1)
    assert learner.steps == 4 and len(rows) == 4
    assert set(rows[0]) >= {"step", "grasp_index", "bin", "reward", "trailing_sr_15bins",
                            "critic_l", "actor_l", "critic_u", "actor_u", "mean_lambda",
                            "accepted", "tau_summary"}
