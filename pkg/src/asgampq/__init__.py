"""Sharpness-aware differentiable mixed-precision quantization search.

Modules:

- :mod:`asgampq.autodiff` reverse-mode autodiff over float64 matrices
- :mod:`asgampq.quantization` fake quantization with straight-through gradients
- :mod:`asgampq.supernet` bitwidth supernet, complexity loss, policy extraction
- :mod:`asgampq.sharpness` perturbed loss, surrogate gap, Hessian power iteration
- :mod:`asgampq.optim` ASGA, SAM and SGD steps
- :mod:`asgampq.harness` proxy -> target experiments, metrics, checkpoints
"""
from .errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from .optim import AsgaParams, adaptive_rho, asga_perturbation_point, asga_step, sam_step, sgd_step
from .quantization import QuantSpec, quantize
from .sharpness import SharpnessReport, perturbed_loss, sharpness_report
from .supernet import BitCandidates, MpqPolicy, Supernet, complexity_loss, extract_policy

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "FormatError", "NumericError", "ShapeError",
           "AsgaParams", "adaptive_rho", "asga_perturbation_point", "asga_step", "sam_step",
           "sgd_step", "QuantSpec", "quantize", "SharpnessReport", "perturbed_loss",
           "sharpness_report", "BitCandidates", "MpqPolicy", "Supernet", "complexity_loss",
           "extract_policy"]
