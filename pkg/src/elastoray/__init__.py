"""Bicharacteristic tracing, tensor ray transforms and density-uniqueness operators
for isotropic elastic media."""

__version__ = "0.1.0"

from .medium import (
    Grid3,
    LensRegion,
    MediumModel,
    MediumPoint,
    admissibility_report,
    canonical_config,
    eval_medium,
    load_config,
    parse_model_config,
    region_membership,
)
from .raytrace import (
    amplitude_next_order,
    amplitude_transport,
    eikonal_grid,
    geodesic_residual,
    integrate_bicharacteristic,
)
from .reconstruct import assemble_t4_operator, certify_uniqueness, solve_beta_minus
from .sgf import SGFField, read_sgf, write_sgf
from .tensorfield import (
    OneFormField,
    SymTensor2Field,
    SymTensor4Field,
    build_difference_tensor,
    saint_venant,
    sym_derivative_g,
    t4_functional,
)
from .xray import (
    FanSpec,
    forward_transform,
    generate_fan,
    invert_transform,
    solenoidal_project,
    transform_g_form,
)
