"""Exception hierarchy shared across the package."""


class MFGError(Exception):
    """Base class for all package errors."""


class ConfigError(MFGError, ValueError):
    """Malformed game, policy or experiment configuration."""


class GuardrailError(MFGError):
    """A desk-scale size limit would be exceeded."""


class HypothesisError(MFGError):
    """A structural precondition of an exact construction does not hold."""


class ChainStructureError(HypothesisError):
    """The closed-loop state chain is reducible or periodic."""


class EmptyEquilibriumError(MFGError):
    """No subjective equilibrium exists in the policy set."""
