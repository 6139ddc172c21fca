"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed, missing, or insufficient interaction data."""


class NumericalError(RuntimeError):
    """Training diverged (NaN/inf loss)."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline phase was run before the phase that produces its inputs."""

    def __init__(self, artifact, producer):
        super().__init__(f"missing {artifact}; run `{producer}` first")
        self.artifact = artifact
        self.producer = producer
