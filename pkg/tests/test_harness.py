import json

import numpy as np
import pytest

from sslconvsac import harness
from sslconvsac.binsim import EvalSample, SceneSpec, make_eval_set
from sslconvsac.cli import main
from sslconvsac.errors import ConfigurationError
from sslconvsac.trainer import RandomPolicy
from sslconvsac.weights import MethodConfig, apply_topk_budget


class Const:
    """Stands in for a model: constant quality everywhere."""

    def __init__(self, value):
        self.value = value

    def encode(self, states):
        return np.asarray(states)

    def critic_from_embedding(self, emb, actions):
        from sslconvsac.autodiff import Tensor
        n, _, h, w = emb.shape
        return Tensor(np.full((n, h, w), self.value))


class Lookup(Const):
    """Perfect predictor: reads the answer planted in the state."""

    def critic_from_embedding(self, emb, actions):
        from sslconvsac.autodiff import Tensor
        return Tensor(emb[:, 0])


def tiny_config(tmp_path, **kw):
    d = dict(env={"height": 16, "width": 16, "n_objects": [2, 3]}, train_points=16, eval_scenes=3,
             epochs=2, steps_per_epoch=2, seeds=[0, 1],
             train={"hidden": 4, "critic_hidden": 4, "learning_rate": 1e-3},
             matrix=[{"method": "none"}, {"method": "fixmatch"}], output_dir=str(tmp_path / "out"))
    d.update(kw)
    return harness.ExperimentConfig.from_dict(d)


def test_collect_empty_and_deterministic():
    assert harness.collect_offline(SceneSpec(), RandomPolicy(), 0) == []
    a = harness.collect_offline(SceneSpec(), RandomPolicy(), 5, seed=3)
    b = harness.collect_offline(SceneSpec(), RandomPolicy(), 5, seed=3)
    assert [(s.pixel, s.reward) for s in a] == [(s.pixel, s.reward) for s in b]
    assert all(np.array_equal(x.state, y.state) for x, y in zip(a, b))


def test_random_policy_success_band():
    rows = harness.collect_offline(SceneSpec(), RandomPolicy(), 400, seed=1)
    rate = np.mean([s.reward for s in rows])
    print(f"random policy success {rate:.3f}")
    assert 0.02 <= rate <= 0.6


def test_evaluate_mse_examples():
    r = np.random.default_rng(0)
    samples = []
    for i in range(20):
        reward = int(r.integers(2))
        state = np.zeros((7, 4, 4))
        state[0] = reward
        samples.append(EvalSample(state, (1, 2), np.zeros(3), reward, i))
    assert harness.evaluate_mse(Lookup(0), samples) == 0.0
    assert harness.evaluate_mse(Const(0.5), samples) == 0.25
    with pytest.raises(ConfigurationError):
        harness.evaluate_mse(Const(0.5), [])


def test_predict_at_uses_sample_action():
    from sslconvsac.net import ConvSAC
    model = ConvSAC(4, 4, seed=0)
    ev = make_eval_set(SceneSpec(height=16, width=16, n_objects=(2, 3)), 2, 1, seed=5)
    p = harness.predict_at(model, [s.state for s in ev], [s.pixel for s in ev], [s.action for s in ev])
    for i, s in enumerate(ev):
        q = model.critic_forward(s.state[None], np.broadcast_to(s.action[:, None, None], (3, 16, 16))).data
        assert p[i] == pytest.approx(q[0, s.pixel[0], s.pixel[1]], abs=1e-12)


def test_topk_budget_examples():
    r = np.random.default_rng(0)
    m = np.zeros(64)
    m[r.choice(64, 12, replace=False)] = 1
    m = m.reshape(8, 8)
    conf = r.uniform(size=(8, 8))
    assert np.array_equal(apply_topk_budget(m, "full", conf), m)
    assert np.count_nonzero(apply_topk_budget(m, 5, conf)) == 5
    assert np.count_nonzero(apply_topk_budget(m, 100, conf)) == 12
    for k in range(15):
        assert np.count_nonzero(apply_topk_budget(m, k, conf)) == min(k, 12)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        tiny_config(tmp_path, seeds=[])
    with pytest.raises(ConfigurationError):
        tiny_config(tmp_path, epochs=0)
    with pytest.raises(ConfigurationError):
        tiny_config(tmp_path, bogus=1)
    with pytest.raises(ConfigurationError):
        tiny_config(tmp_path, matrix=[{"method": "none"}, {"method": "none"}])
    with pytest.raises(ConfigurationError):
        harness.make_policy("greedy")
    cfg = tiny_config(tmp_path)
    again = harness.ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_default_output_dir(monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ENV, "/tmp/somewhere")
    assert harness.default_output_dir() == "/tmp/somewhere"


def test_matrix_summary_and_idempotence(tmp_path):
    cfg = tiny_config(tmp_path)
    summaries = harness.run_matrix(cfg)
    assert [s.label for s in summaries] == [m.label for m in cfg.matrix]
    doc = json.loads((tmp_path / "out" / "summary.json").read_text())
    for s in summaries:
        finals = []
        for seed in cfg.seeds:
            rows = harness.read_csv(harness.run_dir(cfg, MethodConfig.from_dict(s.method), seed) / "curve.csv")
            assert len(rows) == cfg.epochs
            finals.append(float(rows[-1]["eval_mse"]))
        assert s.final_mse == finals
        assert s.mean_mse == float(np.mean(finals))
        assert s.std_mse == float(np.std(finals, ddof=1))
    assert doc["baseline_median_mse"] == float(np.median(summaries[0].final_mse))

    stamps = {p: p.stat().st_mtime_ns for p in (tmp_path / "out").rglob("curve.csv")}
    again = harness.run_matrix(cfg)
    assert [s.to_dict() for s in again] == [s.to_dict() for s in summaries]
    assert {p: p.stat().st_mtime_ns for p in stamps} == stamps


def test_single_seed_has_no_std(tmp_path):
    cfg = tiny_config(tmp_path, seeds=[0], matrix=[{"method": "none"}], epochs=1)
    (s,) = harness.run_matrix(cfg)
    assert s.std_mse is None and len(s.final_mse) == 1
    assert (tmp_path / "out" / f"{s.label}_s0" / "curve.csv").exists()


def test_divergence_flag(tmp_path):
    cfg = tiny_config(tmp_path, divergence_factor=10.0)
    base, ssl = cfg.matrix
    ms = []
    for entry, finals in ((base, [0.01, 0.02]), (ssl, [0.5, 0.1])):
        for seed, f in zip(cfg.seeds, finals):
            d = harness.run_dir(cfg, entry, seed)
            harness.write_csv(d / "curve.csv", [{"epoch": 1, "eval_mse": f}], harness.CURVE_COLUMNS)
            ms.append({"label": entry.label, "seed": seed, "aborted_steps": 0, "wall_clock": 0.0})
    out = harness.summarize(cfg, ms)
    # baseline median 0.015: 0.5 is past 10x, 0.1 is not
    assert out[1].diverged == [True, False]
    assert out[0].diverged == [False, False]


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["matrix", "--epochs", "0", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["matrix", "--config", str(bad)]) == 2
    cfg = tiny_config(tmp_path, seeds=[0], matrix=[{"method": "none"}], epochs=1)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert main(["gen-data", "--config", str(path)]) == 0
    assert main(["train", "--config", str(path), "--data", cfg.output_dir, "--method", "fixmatch"]) == 0
    run = json.loads(capsys.readouterr().out.strip().splitlines()[-1])["run"]
    assert main(["eval", f"{run}/model.ckpt", "--data", cfg.output_dir]) == 0
    svg = tmp_path / "c.svg"
    assert main(["plot", f"{run}/curve.csv", "--out", str(svg)]) == 0
    assert svg.read_text().lstrip().startswith("<?xml")


def test_online_warm_start_and_prefill(tmp_path):
    d = dict(env={"height": 16, "width": 16, "n_objects": [2, 3]}, n_grasps=4, seeds=[0],
             pretrain_steps=2, train={"hidden": 4, "critic_hidden": 4, "steps_per_grasp": 1},
             output_dir=str(tmp_path))
    with pytest.raises(ConfigurationError):
        harness.OnlineConfig.from_dict({**d, "pretrain_steps": -1})
    cfg = harness.OnlineConfig.from_dict(d)
    model, offline = harness.prepare_online(cfg, 0)
    assert model is not None and len(offline) == 500
    assert harness.prepare_online(cfg, 0, pretrain=False)[0] is None
    a = harness.online_run(cfg, MethodConfig("none"), 0, prepared=(model, offline))
    b = harness.online_run(cfg, MethodConfig("none"), 0)
    assert a == b and len(a) == 4
    # the warm-start model is cloned, never trained in place
    again = harness.prepare_online(cfg, 0)[0]
    assert all(np.array_equal(model.params[k].data, again.params[k].data) for k in model.params)
    res = harness.run_online(cfg)
    assert set(res) == {"ON", "FI-C0.95-L0.5-Kfull"}
    assert (tmp_path / "online_summary.json").exists()
