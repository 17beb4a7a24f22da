"""How the serialization choices order one clip's sampled points.

Run: python demos/scan_orders.py
"""
import numpy as np

from ustssm import tensor as T
from ustssm.data import SynthConfig, normalize, synth_generate
from ustssm.sampling import fps, fps_seed
from ustssm.serialization import (PromptNetParams, mean_adjacent_distance, prompt_forward,
                                  scan_bench_rows, stss)

clip = normalize(synth_generate(SynthConfig(n_classes=2, videos_per_class=1, T=8, N=256))[1])
print(f"clip: {clip.T} frames x {clip.N} points, label {clip.label} (rotation about z)")

# 64 farthest-point samples per frame stand in for the sampler's anchors
anchors = np.stack([f[fps(f, 64, fps_seed(f))] for f in clip.coords])

net = PromptNetParams.init(3, 4, seed=0, hidden=16)
with T.no_grad():
    prompts = prompt_forward(anchors.reshape(-1, 3), anchors.reshape(-1, 3), net)
print("cluster sizes from an untrained prompt network:", np.bincount(prompts.assignment, minlength=4))

# an untrained network tends to put everything in one cluster; for the selection scan
# below use the quadrant of each point relative to its frame's centroid instead
rel = anchors - anchors.mean(axis=1, keepdims=True)
quadrant = ((rel[..., 0] > 0) * 2 + (rel[..., 1] > 0)).reshape(-1)
print("quadrant cluster sizes:", np.bincount(quadrant, minlength=4))

print(f"\n{'strategy':15s} {'curve':8s} mean step between consecutive points")
for row in scan_bench_rows(anchors, quadrant):
    print(f"{row['strategy']:15s} {row['curve']:8s} {row['mean_adjacent_distance']:.4f}")

seq = stss(anchors, quadrant)
clusters = quadrant[seq.perm]
print("\nselection scan: cluster id then frame at every 16th position")
print(" ".join(f"{c}:{f}" for c, f in zip(clusters[::16], seq.frame_of[::16])))
print(f"whole-sequence mean step {mean_adjacent_distance(seq.coords):.4f}")
