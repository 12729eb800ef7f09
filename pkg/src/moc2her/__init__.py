"""Multi-updates option-critic with hindsight and dual-objective hindsight replay."""

from .errors import ContractViolation

__version__ = "0.1.0"

__all__ = ["ContractViolation", "__version__"]
