# A miniature end-to-end experiment: six environments, two training epochs.
# The desk-scale version lives in the acceptance suite and the CLI.

# %%
import tempfile

import numpy as np

from beamscene import harness as hs
from beamscene.features import LidarScanConfig

cfg = hs.RunConfig(
    seed=1,
    train_envs=5,
    test_envs=1,
    lidar=LidarScanConfig(azimuth_step=np.deg2rad(1.0)),
    train=hs.TrainConfig(epochs=2),
    experiment=hs.ExperimentConfig(m_values=(1, 5, 10), fig5_fractions=(0.5, 1.0), fig6_ranges=(120.0,)),
)
out = tempfile.mkdtemp(prefix="beamscene_demo_")
summary = hs.run_experiment(cfg, out, "all")

# %%
for tag, run in summary["runs"].items():
    acc = ", ".join(f"top-{m} {a:.1%}" for m, a in run["top_m"].items())
    print(f"{tag:18s} n_train={run['n_train']:4d}  {acc}")
print("random top-5 baseline:", f"{5 / 900:.2%}")
print("reports written to", out)
