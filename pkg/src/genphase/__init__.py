"""Compressive phase retrieval with generative image priors.

Recovers an image from noisy magnitude-only linear measurements by gradient
descent over the latent input of a fixed feed-forward generator, with random
restarts. Ships three measurement families (complex Gaussian, coded
diffraction patterns, transmission-matrix rows), image quality metrics, and a
sweep harness with CSV / JSON / figure reports.
"""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    GenphaseError,
    ModelValidationError,
    SolveFailed,
)
from .generator import (
    GeneratorModel,
    LayerSpec,
    describe,
    forward,
    load_generator,
    make_padded_generator,
    make_synthetic_generator,
    save_generator,
    vjp,
)
from .measure import (
    CDPOperator,
    GaussianOperator,
    MeasurementVector,
    TMDataset,
    TransmissionMatrixOperator,
    apply,
    apply_adjoint,
    load_tm,
    make_cdp,
    make_gaussian,
    measure_magnitude,
    read_prtm,
    write_prtm,
)
from .metrics import ScoreReport, per_pixel_error, psnr, resolve_sign, score, ssim
from .solver import (
    RestartResult,
    SolverConfig,
    grad_loss,
    loss,
    project_to_range,
    solve,
)

__version__ = "0.1.0"
