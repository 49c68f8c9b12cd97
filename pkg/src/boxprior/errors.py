"""Exception hierarchy shared by all boxprior modules."""


class BoxPriorError(Exception):
    """Base class for every domain error raised by the package."""


class ChainError(BoxPriorError):
    """A pose chain is empty or its frame labels do not line up."""


class TransformError(BoxPriorError):
    """A matrix violates the rigid-transform or intrinsic invariants."""


class BoxNotVisibleError(BoxPriorError):
    """A 3D box has no usable projection on the image plane."""


class ShapeError(BoxPriorError):
    pass


class LabelError(BoxPriorError):
    pass


class NormalizationError(BoxPriorError):
    pass


class EvaluationError(BoxPriorError):
    """A loss evaluated to a non-finite value during gradient checking."""


class LossUndefinedError(BoxPriorError):
    """No non-empty box remains in a batch, so the box losses are undefined."""


class GenerationError(BoxPriorError):
    pass


class SceneParseError(BoxPriorError):
    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: offset {offset}: {message}")


class ConsistencyError(BoxPriorError):
    pass


class ConfigError(BoxPriorError):
    pass
