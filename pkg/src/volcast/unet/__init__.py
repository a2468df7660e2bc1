"""Volumetric UNet family: layers, assembly, receptive field and cost."""

from volcast.unet.layers import (
    conv3d,
    conv3d_backward,
    film,
    film_backward,
    group_norm,
    group_norm_backward,
    resample_down,
    resample_down_backward,
    resample_up,
    resample_up_backward,
    resblock,
    resblock_backward,
    sinusoidal_embed,
    swish,
    swish_backward,
)
from volcast.unet.model import (
    ConfigError,
    Forward,
    ModelConfig,
    ModelState,
    ReceptiveField,
    block_flops,
    build_model,
    conv_flops,
    flops_breakdown,
    flops_estimate,
    forward,
    load_checkpoint,
    output_extent,
    main_config,
    param_shapes,
    receptive_field,
    save_checkpoint,
)
