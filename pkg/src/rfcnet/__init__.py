"""RFC-Net: loose dense connections on an m-way receptive-field tree, on a small numpy autodiff engine."""

from .autodiff import (
    ConvKernel,
    Tensor,
    backward,
    bilinear_upsample,
    ce_per_pixel,
    concat_channels,
    conv2d,
    grad_check,
    maxpool2,
    no_grad,
    relu,
    softmax_channels,
)
from .ldcs import (
    LdcsLayer,
    LdcsLayerSpec,
    build_ldcs_layer,
    build_sdcs_layer,
    enumerate_params,
    ldcs_forward,
    param_count_ldcs,
    param_count_sdcs,
)
from .net import (
    PRESETS,
    ChainDescriptor,
    RfcConfig,
    RfcModel,
    build_rfc_net,
    empirical_rf_probe,
    enumerate_chains,
    isolate_strong_paths,
    receptive_field,
)

__version__ = "0.1.0"
