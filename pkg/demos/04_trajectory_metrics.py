"""APE and RPE on hand-made trajectories.

Monocular VO only knows the path up to scale, so APE is computed after a
similarity alignment.  Here a scaled, rotated and noisy copy of a circle is
scored against the circle.
"""
import numpy as np
from scipy.spatial.transform import Rotation

from dynaclean.dataset_io import Trajectory
from dynaclean.trajeval import ape, rpe, scale_to_reference

rng = np.random.default_rng(0)
n = 60
a = np.linspace(0, 2 * np.pi, n)
pos = np.column_stack([np.cos(a), np.zeros(n), np.sin(a)]) * 5
quats = Rotation.from_euler("y", -a).as_quat()
ts = np.arange(n) * 0.1
gt = Trajectory(ts, quats, pos)

g = Rotation.from_euler("xyz", [10, 40, -5], degrees=True)
noisy = 0.3 * g.apply(pos) + np.array([1.0, 2.0, 3.0]) + rng.normal(scale=0.01, size=pos.shape)
est = Trajectory(ts, (g * Rotation.from_quat(quats)).as_quat(), noisy)

for mode in ("none", "se3", "sim3"):
    print(f"APE {mode:4s} rmse {ape(gt, est, mode)[0].rmse:.4f}")

print(f"RPE raw scale    rmse {rpe(gt, est)[0].rmse:.4f}")
print(f"RPE sim3 scaled  rmse {rpe(gt, scale_to_reference(gt, est))[0].rmse:.4f}")
print(f"RPE rotation     rmse {rpe(gt, est, part='rot')[0].rmse:.4f} deg")
