"""Anticipating Girsanov transformations on fractional Wiener space.

Grid-level kernel, path generation, Malliavin calculus, transformation
families with their densities, and a solver for linear Skorokhod SDEs
driven by fractional Brownian motion.
"""

from ._accel import ENV_FLAG, backend
from .fractional import (Hurst, Increments, KernelWeights, SamplePath, TimeGrid,
                         apply_fractional_operator, cameron_martin_norm, covariance,
                         fbm_cholesky_oracle, fbm_from_increments, kernel_cell_weights,
                         kernel_value, sample_increment_batch, sample_increments)
from .girsanov import (DensityProcess, DerivativeKernel, InverseSlice, TransformFamily,
                       cf_determinant_closed, cf_determinant_spectral, forward_density,
                       forward_transform, inverse_density, inverse_transform, shift_derivative)
from .malliavin import (CylindricalFunctional, DerivativeField, SobolevEstimate, StepProcess,
                        derivative_field, directional_derivative, eval_functional,
                        skorokhod_integral, sobolev_norms)
from .rng import Stream
from .sde import (InitialCondition, SolutionPath, duality_residual, solve_anchor_ode,
                  solve_skorokhod_sde, validate_drift)
from .special import hyp2f1
from .stats import McStats, mc_summarize

__version__ = "0.1.0"
