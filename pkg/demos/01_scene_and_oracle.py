"""A synthetic bin, its ground-truth quality map, and what grasping does to it.

Run:  python3 demos/01_scene_and_oracle.py
"""
import numpy as np

from sslconvsac.binsim import SceneSpec, execute_grasp, generate_scene, remove_object
from sslconvsac.net import select_grasp

state, gt = generate_scene(SceneSpec(seed=7))
print("state channels x H x W:", state.shape)
print("objects:", len(gt.objects), " graspable pixels:", int((gt.quality > 0.5).sum()),
      " background pixels:", int(gt.background_mask.sum()))

# coarse picture of the quality map, one character per pixel
for row in gt.quality[::2, ::1]:
    print("".join(" .:-=+*#%@"[min(9, int(v * 9.99))] for v in row))

# the oracle takes the best pixel with its ground-truth approach
attempts = 0
while gt.objects and attempts < 15:
    pixel, action, _ = select_grasp(gt.quality, gt.action)
    r = execute_grasp(state, gt, pixel, action)
    attempts += 1
    print(f"grasp {attempts}: pixel {pixel} reward {r}")
    if r:
        state, gt = remove_object(gt, int(gt.object_map[pixel]))

# a tilted approach at the same pixel usually fails
state, gt = generate_scene(SceneSpec(seed=7))
pixel, action, _ = select_grasp(gt.quality, gt.action)
print("oracle:", execute_grasp(state, gt, pixel, action),
      " tilted 0.6 rad:", execute_grasp(state, gt, pixel, action + np.array([0.0, 0.6, 0.0])))
