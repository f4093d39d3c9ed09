"""
Sampling counts and the slice-walk stop rule by hand
====================================================

No training here. The first half shows how many training points a single
disk-shaped nodule slice contributes; the second drives the slice walk with
hand-made masks so each stop reason shows up.

    python demos/sampling_and_propagation.py
"""
import numpy as np

from noduleseg.boundary_sampler import SamplerConfig, estimate_imbalance, plan_slice_samples
from noduleseg.evaluator import consistency_matrix, format_consistency
from noduleseg.phantom_gen import PhantomSpec, generate
from noduleseg.segmenter import SeedBox, propagate_masks
from noduleseg.volume_store import boundary_voxels_2d


def disk(radius, shape=(48, 48)):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return (yy - shape[0] // 2) ** 2 + (xx - shape[1] // 2) ** 2 <= radius**2


# a 15 mm nodule on a 512 x 512 slice is outnumbered about 370 to 1
print("imbalance for 15 mm on 512^2: 1:%.0f" % estimate_imbalance(15, 512**2))

# radius-5 disk: 81 voxels, 28 on the boundary, so 28 + 28 nodule points
m = disk(5)
entries, warnings = plan_slice_samples(m, 0, SamplerConfig(), np.random.default_rng(0), 10.0, "disk")
tags = [e.tag for e in entries]
print("T =", int(m.sum()), " B =", int(boundary_voxels_2d(m).sum()))
print({t: tags.count(t) for t in ("boundary", "interior", "near", "far")})

# the same disk as a 4 mm nodule: every foreground voxel is taken
entries, _ = plan_slice_samples(m, 0, SamplerConfig(), np.random.default_rng(0), 4.0, "disk")
print("sub-6 mm nodule points:", sum(e.label for e in entries))


# a walk from a 100-voxel start at z = 2: slice 1 keeps 40 of it, slice 0 only 8 of
# those 40, and slice 3 slides sideways so just 20 voxels overlap
def square(h, w, r0=0, c0=0):
    s = np.zeros((20, 20), bool)
    s[r0 : r0 + h, c0 : c0 + w] = True
    return s


stack = np.stack([square(2, 5), square(10, 4), square(10, 10), square(10, 10, 0, 8), np.zeros((20, 20), bool)])
walk = propagate_masks(lambda z: stack[z], stack.shape, SeedBox(2, 0, 0, 19, 19), 0.3, True)
print("kept slices", walk.slices, "stop reasons", walk.stop_reasons)
for step in walk.trace:
    print(step)

# four simulated raters on one phantom and how well they agree
case = generate(PhantomSpec(nodule_type="isolated", diameter_mm=10.0, seed=1))
sources = {f"R{k + 1}": [m] for k, m in enumerate(case.rater_masks)}
sources["truth"] = [case.true_mask]
print(format_consistency(consistency_matrix(sources), ["R1", "R2", "R3", "R4"]))
