"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a shape or value precondition."""


class ImageFormatError(ValueError):
    """A raster file exists but cannot be decoded."""


class EmptyDatasetError(RuntimeError):
    """A dataset scan produced no usable visible/infrared pairs."""


class CheckpointError(RuntimeError):
    """A checkpoint is corrupt or incompatible with the current config."""


class TrainingAbort(RuntimeError):
    """Raised when a loss component becomes non-finite during training."""

    def __init__(self, component, values=None):
        self.component = component
        self.values = dict(values or {})
        detail = ", ".join(f"{k}={v}" for k, v in self.values.items())
        super().__init__(f"non-finite loss component '{component}' ({detail})")
