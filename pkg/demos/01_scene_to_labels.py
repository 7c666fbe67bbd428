# A walk from one random street canyon to the beam-pair labels a network
# would be trained on.

# %%
import numpy as np

from beamscene import harness as hs
from beamscene.phy import UpaConfig, beam_pair_objective, build_codebook, receive_snr
from beamscene.raytrace import trace_many
from beamscene.scene import default_layout, generate_environment, make_building_catalog, ms_positions

layout = default_layout()
print("SA rectangles (xmin, ymin, xmax, ymax):")
print(np.round(layout.sa_rects, 2))
print("BS at", layout.bs_position, "track", layout.track_start, "->", layout.track_end)

# %% [markdown]
# Five of the eight SAs receive one building each; at least one lands in SA2 or SA3,
# the two lots sitting between the BS and the track.

# %%
env = generate_environment(layout, make_building_catalog(), seed=hs.env_seed(0, 0))
for b in env.buildings:
    print(f"SA{b.sa_index}: type {b.spec.type_id} at {np.round(b.min_corner, 1)}")

# %%
ms = ms_positions(layout)
per_ms = trace_many(env, layout.bs_position, ms)
counts = np.array([len(p) for p in per_ms])
los = np.array([any(p.bounces == 0 for p in paths) for paths in per_ms])
print(f"{len(ms)} MS positions, paths per position {counts.min()}..{counts.max()}, LOS at {los.mean():.0%}")

# %% [markdown]
# Labels come from an exhaustive sweep over all 30 x 30 codebook pairs.

# %%
cfg = hs.RunConfig()
labels = hs.label_paths(per_ms, cfg)
cb = build_codebook(UpaConfig(), 30)
for k in (0, 40, 80, 120, 160):
    lab = labels[k]
    if lab is None:
        print(f"MS {k:3d}: no link")
        continue
    link = receive_snr(per_ms[k], cb.beams[lab.t_opt], cb.beams[lab.r_opt])
    print(f"MS {k:3d} x={ms[k, 0]:+6.1f}: t={lab.t_opt:2d} r={lab.r_opt:2d} SNR {10 * np.log10(link.snr):.1f} dB")

# %% [markdown]
# The objective surface is sharply peaked, which is why guessing is hopeless
# and a learned prior over the scene helps.

# %%
obj = beam_pair_objective(per_ms[80], cb, cb)
top = np.sort(obj.ravel())[::-1]
print("best five pair gains relative to the optimum:", np.round(top[:5] / top[0], 3))
