"""Block compressive sensing with non-local priors.

Two reconstruction paths share one sampling model:

* :func:`nlcs.classical.solve`, an augmented Lagrangian solver with a DCT
  sparsity prior and a non-local means regularizer;
* :func:`nlcs.network.net_forward`, the same iteration unrolled into a
  trainable network with learned transforms and patch attention.

:mod:`nlcs.estimators` wraps both as scikit-learn style estimators.
"""

from .classical import SolverConfig, solve
from .estimators import ClassicalCS, NLCSNet
from .network import NetParams, net_forward, reconstruct
from .sampling import SamplingMatrix, init_gaussian, measurements_for_rate
from .training import TrainConfig, psnr, train

__all__ = [
    "ClassicalCS",
    "NLCSNet",
    "NetParams",
    "SamplingMatrix",
    "SolverConfig",
    "TrainConfig",
    "init_gaussian",
    "measurements_for_rate",
    "net_forward",
    "psnr",
    "reconstruct",
    "solve",
    "train",
]

__version__ = "0.1.0"
