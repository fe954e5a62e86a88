"""Image quality metrics: PSNR, MS-SSIM, the deep perceptual loss and 2AFC tooling."""

from .classic import MS_SSIM_WEIGHTS, ms_ssim, mse8, psnr
from .perceptual import (
    ChannelWeights, FeatureExtractor, IdentityExtractor, VGG16Extractor, default_extractor, dpl, dpl_value,
    tap_distances,
)
from .twoafc import (
    ComboFit, DegenerateDataError, TwoAFCRecord, fit_channel_weights, fit_linear_combo, load_records,
    metric_distances, save_records, synthetic_records, twoafc_from_distances, twoafc_score,
)

__all__ = [
    "MS_SSIM_WEIGHTS", "ChannelWeights", "ComboFit", "DegenerateDataError", "FeatureExtractor",
    "IdentityExtractor", "TwoAFCRecord", "VGG16Extractor", "default_extractor", "dpl", "dpl_value",
    "fit_channel_weights", "fit_linear_combo", "load_records", "metric_distances", "ms_ssim", "mse8", "psnr",
    "save_records", "synthetic_records", "tap_distances", "twoafc_from_distances", "twoafc_score",
]
