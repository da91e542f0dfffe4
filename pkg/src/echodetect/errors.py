"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Bad configuration, manifest, or command-line input."""


class GridMismatchError(RuntimeError):
    """Two volumes that must share a grid (shape/spacing) do not."""


class DegenerateInputError(RuntimeError):
    """Input is structurally valid but degenerate (constant ROI, empty mask, ...)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
