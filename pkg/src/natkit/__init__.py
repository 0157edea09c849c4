"""Neighborhood attention kernels, the NAT backbone, and its cost model."""

from .attention import (
    AttentionGrads,
    AttentionParams,
    mhna_layer,
    na_av,
    na_backward,
    na_forward,
    na_qk,
    na_reference,
    self_attention,
)
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    NATError,
    NumericError,
    PaddingRequiredError,
    WeightError,
)
from .model import PRESETS, NATConfig, count_params, extract_pyramid, init_weights, nat_forward
from .neighborhood import NeighborhoodSpec, neighborhood_indices, rel_bias_index, window_start

__version__ = "0.1.0"
