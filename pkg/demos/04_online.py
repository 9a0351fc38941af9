"""Online grasp learning: the greedy policy grasps, stores one reward, trains 10 steps.

Compares the injected oracle and an untrained network, then warm-starts a
labeled-only model on an offline collection and continues it online with
and without pseudo-labels.  Both learners start from the same model and
replay contents, so the grasp budgets are directly comparable.

Run:  python3 demos/04_online.py [n_grasps]
"""
import sys

from sslconvsac.binsim import SceneSpec
from sslconvsac.harness import OnlineConfig, online_run, prepare_online, untrained_success
from sslconvsac.trainer import OraclePolicy, online_loop
from sslconvsac.weights import MethodConfig

n = int(sys.argv[1]) if len(sys.argv) > 1 else 150
spec = SceneSpec()
print("oracle trailing success:", online_loop(spec, OraclePolicy(), n)[-1]["trailing_sr_15bins"])
print("untrained greedy:", untrained_success(spec, n))

cfg = OnlineConfig(n_grasps=n, seeds=[0])
prepared = prepare_online(cfg, seed=0)
print("warm start greedy:", untrained_success(spec, n, model=prepared[0]))
for entry in (MethodConfig("none"), MethodConfig("flexmatch", tau_lb=0.9, soft_weight=True, contextual=True)):
    rows = online_run(cfg, entry, seed=0, prepared=prepared)
    wins = sum(r["reward"] for r in rows)
    print(f"{entry.label:28s} successes {wins}/{n}  trailing {rows[-1]['trailing_sr_15bins']:.2f}")
