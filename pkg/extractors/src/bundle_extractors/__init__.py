"""Frame-bundle extraction adapters around off-the-shelf vision models."""

__version__ = "0.1.0"


class ModalityError(RuntimeError):
    """A modality's model could not be loaded or applied; the message names the modality."""
