"""Message embedding in ODE generative latents with Euler inversion."""

from .core import (
    CapacityError,
    ConfigError,
    DomainError,
    FlowStegoError,
    FormatError,
    IntegrationError,
    LatentVector,
    Message,
    ShapeError,
    StegoKey,
    TimeGrid,
    TrajectoryRecord,
    keyed_uniform,
    read_latent,
    write_latent,
)
from .flows import (
    GaussianEndpoints,
    GmmSpec,
    VelocityField,
    VPSchedule,
    guided_field,
    linear_coupling_field,
    rf_gaussian_field,
    vp_score_field,
)
from .mapping import MappingParams, embed_message, extract_message, tolerance_radius
from .samplers import (
    SamplerKind,
    ddim_forward,
    ddim_inverse,
    ddpm_forward,
    euler_forward,
    euler_inverse,
    local_and_global_error,
    pcli_residual,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ConfigError",
    "DomainError",
    "FlowStegoError",
    "FormatError",
    "IntegrationError",
    "LatentVector",
    "Message",
    "ShapeError",
    "StegoKey",
    "TimeGrid",
    "TrajectoryRecord",
    "keyed_uniform",
    "read_latent",
    "write_latent",
    "GaussianEndpoints",
    "GmmSpec",
    "VelocityField",
    "VPSchedule",
    "guided_field",
    "linear_coupling_field",
    "rf_gaussian_field",
    "vp_score_field",
    "SamplerKind",
    "ddim_forward",
    "ddim_inverse",
    "ddpm_forward",
    "euler_forward",
    "euler_inverse",
    "local_and_global_error",
    "pcli_residual",
    "MappingParams",
    "embed_message",
    "extract_message",
    "tolerance_radius",
]
