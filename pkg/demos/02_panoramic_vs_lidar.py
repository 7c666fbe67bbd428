# Two ways of describing the same street to a network: the BS's panoramic
# voxel grid and a LIDAR scan taken by the MS itself.

# %%
import numpy as np

from beamscene import harness as hs
from beamscene.features import LidarScanConfig, default_grid_spec, extract_lidar_feature, extract_panoramic, lidar_grid_spec, simulate_lidar_scan
from beamscene.scene import PointCloud, default_layout, generate_environment, make_building_catalog, ms_positions, synthesize_point_cloud

layout = default_layout()
env = generate_environment(layout, make_building_catalog(), seed=hs.env_seed(0, 1))
cloud = synthesize_point_cloud(env, density=1.0, noise_sigma=0.05, seed=hs.env_seed(0, 1, 1))
bs = layout.bs_position
ms = ms_positions(layout)[100]
print(f"{len(cloud.points)} cloud points, MS at {ms}")

# %%
pano = extract_panoramic(PointCloud(cloud.points - bs), ms - bs, default_grid_spec())
occupied = np.any(pano.g != 0, axis=-1)
print("panoramic grid", pano.g.shape, f"{occupied.sum()} occupied voxels, MS voxel {pano.marker_voxel}")
print("MS voxel holds", pano.g[pano.marker_voxel])

# %% [markdown]
# The scan only sees what is in line of sight of the MS and within range S.
# A coarse 1 degree azimuth step keeps this demo quick.

# %%
spec = lidar_grid_spec(layout.params.h_ms)
for S in (60.0, 120.0, 200.0):
    scan = simulate_lidar_scan(env, ms, LidarScanConfig(range_m=S, azimuth_step=np.deg2rad(1.0)))
    local = extract_lidar_feature(scan, bs - ms, spec)
    n = int(np.any(local.g != 0, axis=-1).sum())
    print(f"S = {S:5.0f} m: {len(scan.points):5d} returns, {n:4d} occupied voxels")

# %% [markdown]
# Past roughly 115 m every downward beam has already hit the ground and the
# cube corners end near 131 m, so S = 120 and S = 200 give the same grid.
