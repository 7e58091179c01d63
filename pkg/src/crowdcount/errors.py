"""Exception taxonomy shared by all crowdcount modules."""


class CrowdCountError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(CrowdCountError):
    """Invalid parameter, shape mismatch, or unusable configuration."""


class ParseError(CrowdCountError):
    """Malformed annotation, manifest, or config file."""


class AnnotationError(CrowdCountError):
    """Head annotation violates image bounds or other invariants."""


class AugmentationError(CrowdCountError):
    """Image too small or otherwise unusable for augmentation."""


class InferenceError(CrowdCountError):
    """Input unusable for a forward pass (too small after scaling, etc.)."""


class CheckpointError(CrowdCountError):
    """Checkpoint file is corrupt, truncated, or from an unknown version."""


class DivergenceError(CrowdCountError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(
            f"non-finite training loss ({loss}) at iteration {iteration}"
        )
