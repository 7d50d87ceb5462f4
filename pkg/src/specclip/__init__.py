"""Spectral analysis and singular value clipping for implicitly linear layers."""

__version__ = "0.1.0"

from .clipping import (  # noqa: E402
    ClipConfig,
    ClipResult,
    FastClipConfig,
    bn_direct_clip,
    clip_top,
    concat_clip,
    fast_clip_run,
    scale_clip,
)
from .closedform import closed_form_spectrum, duplicate_check, padding_gap_experiment, spectral_bounds  # noqa: E402
from .linops import (  # noqa: E402
    BatchNormSpec,
    CompositionSpec,
    ConvSpec,
    DenseSpec,
    adjoint_apply,
    apply,
    circular_conv1d,
    conv1d,
    gram_apply,
    materialize,
)
from .serialize import load_spec, save_spec  # noqa: E402
from .specmod import SpectrumEditPlan, fit_parameters  # noqa: E402
from .spectral import PowerQRConfig, SpectrumEstimate, deflated_power_baseline, power_qr, svd_oracle, track_step  # noqa: E402

__all__ = [
    "__version__",
    "DenseSpec",
    "ConvSpec",
    "BatchNormSpec",
    "CompositionSpec",
    "conv1d",
    "circular_conv1d",
    "apply",
    "adjoint_apply",
    "gram_apply",
    "materialize",
    "load_spec",
    "save_spec",
    "PowerQRConfig",
    "SpectrumEstimate",
    "power_qr",
    "track_step",
    "deflated_power_baseline",
    "svd_oracle",
    "ClipConfig",
    "FastClipConfig",
    "ClipResult",
    "clip_top",
    "scale_clip",
    "bn_direct_clip",
    "concat_clip",
    "fast_clip_run",
    "closed_form_spectrum",
    "spectral_bounds",
    "duplicate_check",
    "padding_gap_experiment",
    "SpectrumEditPlan",
    "fit_parameters",
]
