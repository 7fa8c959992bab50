"""Paired-data synthesis, degradation, cropping, registration and I/O."""

from .degrade import DegradationConfig, blur, degrade, motion_blur_kernel
from .patches import PatchGrid, crop_patches, reassemble
from .pgm import (ManifestEntry, read_label_pgm, read_manifest, read_pgm, read_pgm_raw, write_label_pgm,
                  write_manifest, write_pgm, write_pgm_raw)
from .registration import Registration, register_patch, translate, zncc
from .split import SplitSpec, split_dataset
from .synth import synth_scene

__all__ = [
    "DegradationConfig", "ManifestEntry", "PatchGrid", "Registration", "SplitSpec", "blur", "crop_patches",
    "degrade", "motion_blur_kernel", "read_label_pgm", "read_manifest", "read_pgm", "read_pgm_raw",
    "reassemble", "register_patch", "split_dataset", "synth_scene", "translate", "write_label_pgm",
    "write_manifest", "write_pgm", "write_pgm_raw", "zncc",
]
