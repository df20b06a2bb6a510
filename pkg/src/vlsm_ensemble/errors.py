class ConfigurationError(ValueError):
    """A model or run configuration is inconsistent."""


class StructuralError(ValueError):
    """Tensor shapes do not line up between two connected stages."""


class FreezeViolation(AssertionError):
    """A parameter that must stay frozen was modified."""
