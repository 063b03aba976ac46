class ValidationError(ValueError):
    """Domain invariant violated (bad channel data, bad op arguments)."""


class ContainerError(ValueError):
    """On-disk container missing, corrupt, or inconsistent with its manifest."""


class BundleError(ValueError):
    """Model bundle missing, corrupt, or used before training."""


class ConfigError(ValueError):
    """Bad configuration document or key."""
