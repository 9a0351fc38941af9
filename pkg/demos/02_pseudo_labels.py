"""How the weighting schemes turn one weak-view prediction into a weight mask.

A freshly initialised network sits near q = 0.5 everywhere, so a fixed
threshold accepts almost nothing while a warm-up curriculum with no lower
bound accepts nearly every pixel, which is what lets confirmation bias in.

Run:  python3 demos/02_pseudo_labels.py
"""
import numpy as np

from sslconvsac.augment import align_map, strong_augment, weak_augment
from sslconvsac.binsim import SceneSpec, generate_scene
from sslconvsac.net import ConvSAC
from sslconvsac.weights import MethodConfig, compose_lambda, init_threshold_state

rng = np.random.default_rng(0)
state, gt = generate_scene(SceneSpec(seed=3))
weak, strong = weak_augment(state, rng), strong_augment(state, rng)
print("weak view:", weak.transform, "\nstrong view:", strong.transform)

model = ConvSAC(seed=0)
q_weak, _ = model.predict(weak.state[None])
q, valid = align_map(q_weak[0], weak.transform, strong.transform, "nearest")
valid = valid.astype(bool) & strong.validity_mask.astype(bool)
print(f"untrained q range {q.min():.3f}..{q.max():.3f}, valid pixels {valid.sum()}")

entries = [MethodConfig("fixmatch"), MethodConfig("fixmatch", tau=0.5),
           MethodConfig("flexmatch", tau_lb=0.5), MethodConfig("flexmatch", tau_lb=0.9),
           MethodConfig("flexmatch", tau_lb=0.5, soft_weight=True)]
for cfg in entries:
    state_ = init_threshold_state(cfg)
    lam = compose_lambda(cfg, q, (16, 16), valid, state_)
    print(f"{cfg.label:28s} accepted {int((lam > 0).sum()):4d}  mean weight {lam.mean():.3f}")
