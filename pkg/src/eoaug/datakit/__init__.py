"""Datasets, splits, image I/O and classical augmentation."""

from .augment import augment_advanced, augment_basic, baseline, bilinear_sample, crop_resize, hflip, resize, \
    rotate, vflip
from .autoaugment import autoaugment_apply, load_policy, parse_policy
from .dataset import LabeledDataset, SplitSpec, make_synth_dataset, split
from .imageio import load_dataset, load_image, save_dataset, save_image, to_pnm

__all__ = [
    "LabeledDataset", "SplitSpec", "make_synth_dataset", "split",
    "augment_basic", "augment_advanced", "baseline", "bilinear_sample", "crop_resize", "hflip", "vflip",
    "resize", "rotate", "autoaugment_apply", "load_policy", "parse_policy",
    "load_dataset", "load_image", "save_dataset", "save_image", "to_pnm",
]
