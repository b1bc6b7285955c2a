"""Graph-network particle simulators with type classification and mass posteriors.

Modules:
    autodiff   reverse-mode differentiation over float64 numpy arrays
    sim        elastic, spring and gravity trajectory generators
    dataset    per-frame graph samples, normalization and splits
    flow       conditional deep-sigmoidal normalizing flow
    model      encoder, decoders, flow head and checkpoints
    train      Adam training loop
    evaluate   metrics, statistics and report writing
    cli        ``graphphys`` command line
"""

from .errors import (ConfigError, ContractError, DimensionError, DomainError, IntegrationError,
                     InversionError, RangeError, StatisticsError, TrainingError)

__version__ = "0.1.0"
