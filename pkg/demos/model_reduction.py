"""
Pruning a group model without refitting
=======================================

Fit a small cohort, build the group model over the modulatory (B)
parameters, and switch parameters off by reduction of the full posterior.
Two of the six true B effects are zero; see whether pruning finds them.
"""

import numpy as np

from bdc import bmr, compare, dcm, peb, synth

spec, inputs, truth = synth.default_scenario()
bundles, gt = synth.generate_cohort(spec, truth, n_subjects=8, noise_levels=[0.135], seed=5,
                                    inputs=inputs)
fits = compare.fit_bundles(bundles)
posts = fits.posteriors["D1"]

labels = posts[0].labels
idx = peb.subset_indices(labels, "B")
group = peb.fit_peb(posts, idx, prior=posts[0].theta_prior)

true_b = dcm.pack(truth.group_mean, spec)[idx]
print(f"{'parameter':<22}{'truth':>8}{'group':>8}{'sd':>8}")
for k, i in enumerate(idx):
    sd = np.sqrt(group.beta_post.covariance[k, k])
    print(f"{labels[i]:<22}{true_b[k]:8.2f}{group.beta_post.mean[k]:8.2f}{sd:8.2f}")

# one reduction by hand: turn off the first zero effect
off = [labels[i] for i, v in zip(idx, true_b) if v == 0.0]
red = bmr.reduce_peb(group, off[:1])
print()
print(f"switching off {off[0]}: dF = {red.delta_f:.2f}")

# greedy search over everything
pruned = bmr.prune_greedy(group)
print("greedy prune removed:", pruned.switched_off)
print("true zeros:          ", off)

# the neighbourhood of the pruned model
space = bmr.build_model_space(pruned)
for m in space[:8]:
    print(f"{m.delta_f:8.2f}  off = {sorted(m.switched_off)}")
