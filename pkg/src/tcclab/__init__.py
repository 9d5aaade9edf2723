"""Similarity calibration of cached transformer features along the corrected sampling trajectory."""

from .cache import CacheKind, CachePolicy, SimilarityDistortion
from .calibration import CalibrationOperator, PoolingMode, Variant, apply, fit, residual
from .config import RunConfig, parse_config, render
from .denoiser import DenoiserConfig, ModuleKind, SiteId, build_denoiser
from .packfile import load_pack, save_pack
from .schedule import build_schedule
from .trajectory import (CalibrationPack, CalibrationWindow, estimate_priors, estimate_priors_oneshot,
                         run_calibrated_inference, run_full)

__version__ = "0.1.0"
