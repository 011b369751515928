"""Synthetic ptychography data generation, an ePIE oracle and FRC evaluation."""

from .core import RandomSeed, derive_stream, fft2_forward, fft2_inverse, fftshift, ifftshift
from .forward import (DiffractionStack, NormalizationFactors, Probe, make_test_probe,
                      simulate_dataset)
from .metrics import FrcResult, Registration, frc, frc_auc_pipeline, radial_psd
from .objgen import ObjectClass, ObjectKind, SyntheticObject, generate_object
from .recon import ReconConfig, ReconResult, reconstruct
from .scan import GroupSet, ScanPattern, ScanPlan, group_quadrants, make_scan, regroup

__version__ = "0.1.0"

__all__ = [
    "DiffractionStack",
    "FrcResult",
    "GroupSet",
    "NormalizationFactors",
    "ObjectClass",
    "ObjectKind",
    "Probe",
    "RandomSeed",
    "ReconConfig",
    "ReconResult",
    "Registration",
    "ScanPattern",
    "ScanPlan",
    "SyntheticObject",
    "derive_stream",
    "fft2_forward",
    "fft2_inverse",
    "fftshift",
    "frc",
    "frc_auc_pipeline",
    "generate_object",
    "group_quadrants",
    "ifftshift",
    "make_scan",
    "make_test_probe",
    "radial_psd",
    "reconstruct",
    "regroup",
    "simulate_dataset",
]
