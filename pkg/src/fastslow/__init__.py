"""fastslow: fast-slow Lagrangian particles, homogenized coefficients, transport noise.

A desk-scale toolkit that simulates deterministic fast-slow Lagrangian
particle systems driven by chaotic (or surrogate) fast dynamics, estimates
the homogenized drift and diffusion coefficients of the effective slow SDE
from time-integrated autocorrelations, integrates that SDE in both Ito and
Stratonovich conventions, and verifies numerically that the slow dynamics
converges weakly to the effective law.  A displacement-statistics pipeline
recovers the spatial noise modes from Lagrangian trajectory data.
"""

__version__ = "0.1.0"

from .drivers import (
    Acf,
    DoublingMap,
    FastDriver,
    FirstZeroCrossing,
    FixedLag,
    Lorenz63,
    ObservableChannel,
    OuSurrogate,
    autocorrelation,
    green_kubo_integral,
    sample_invariant_measure,
    step_driver,
)
from .errors import ToolError
from .homogenization import (
    CoefficientEstimate,
    CoefficientField,
    estimate_diffusion_tensor,
    estimate_drift,
    extract_xi,
    factor_diffusion,
    outer,
)
from .modes import (
    DisplacementState,
    ModeBasis,
    TrigMode,
    centering_residual,
    dzeta_dt,
    eval_zeta,
    mean_map_jacobian,
)
from .multiscale import (
    CouplingSpec,
    MultiscaleState,
    simulate_multiscale,
    slow_rhs,
    step_multiscale,
)
from .sde import (
    SdeSpec,
    advect_density_particles,
    euler_maruyama_step,
    simulate_sde_ensemble,
    stratonovich_heun_step,
)
