"""
Seed box to 3-D mask on a synthetic phantom
===========================================

Generate a few phantoms, plan boundary-weighted samples, train a very small
dual-branch network for one epoch, then segment a held-out case from its seed
box and score it. Sizes are tiny so the script finishes in a few seconds;
the numbers it prints are not meant to be good.

    python demos/walkthrough.py
"""
import numpy as np

from noduleseg.boundary_sampler import SamplerConfig, plan_dataset
from noduleseg.dbresnet import NetworkConfig, build, param_count
from noduleseg.evaluator import asd, dsc, ppv, sen
from noduleseg.patch_engine import PatchSource, extract_multiscale, extract_multiview
from noduleseg.phantom_gen import generate_dataset
from noduleseg.segmenter import intensity_baseline, propagate
from noduleseg.trainer import TrainConfig, train
from noduleseg.volume_store import normalize_hu

# seven phantoms cycling through the six nodule types; the seventh is held out
cases = generate_dataset(7, seed=0)
train_cases, test_case = cases[:6], cases[6]
for c in cases:
    print(f"{c.case_id}  {c.spec.nodule_type:12s} {c.record.diameter_mm:5.2f} mm  {c.true_mask.volume:5d} voxels")

vols = {c.case_id: normalize_hu(c.volume) for c in cases}

# one voxel's network inputs: three adjacent slices, and three concentric crops rescaled to 35 x 35
z, r0, c0, r1, c1 = test_case.seed_box
center = (z, (r0 + r1) // 2, (c0 + c1) // 2)
print("multi-view", extract_multiview(vols[test_case.case_id], center).shape)
print("multi-scale", extract_multiscale(vols[test_case.case_id], center).shape)

# training points: every boundary voxel, as many interior ones, matched background
manifest = plan_dataset(
    [(c.case_id, c.true_mask, c.record.diameter_mm) for c in train_cases],
    SamplerConfig(seed=0, max_samples=600),
)
print("samples (nodule, background):", manifest.label_counts())

net = build(NetworkConfig(channel_divisor=16))
print("parameters:", param_count(net))
ckpt = train(net, manifest, PatchSource(vols), TrainConfig(max_epochs=1), on_epoch=print)

# propagate from the seed box, slice by slice, and compare against the true mask
result = propagate(net, vols[test_case.case_id], test_case.seed_box)
print("slices", result.slices, "stops", result.stop_reasons)
truth = test_case.true_mask
print(
    "network   DSC %.3f  ASD %.2f mm  SEN %.3f  PPV %.3f"
    % (dsc(truth, result.mask), asd(truth, result.mask), sen(truth, result.mask), ppv(truth, result.mask))
)

# reference: thresholding halfway between the box's nodule and lung intensities
base = intensity_baseline(vols[test_case.case_id], test_case.seed_box)
print("threshold DSC %.3f" % dsc(truth, base.mask))

# per-slice trace of the walk
for step in result.trace:
    print(step)
print("voxels per slice:", {z: int(np.count_nonzero(result.mask.data[z])) for z in result.slices})
