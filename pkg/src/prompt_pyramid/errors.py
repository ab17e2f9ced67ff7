"""Exception hierarchy shared across the package."""


class PromptPyramidError(Exception):
    """Base class for every error raised by this package."""


# pyramid structure
class PyramidError(PromptPyramidError, ValueError):
    pass


class DivisibilityError(PyramidError):
    pass


class TopLayerError(PyramidError):
    pass


class NonPositiveLayerError(PyramidError):
    pass


class DegenerateLayerError(PyramidError):
    """A prompt layer whose segments coincide with the layer below it."""


# encoders
class ShapeError(PromptPyramidError, ValueError):
    pass


class MaskShapeError(ShapeError):
    pass


class UnknownMechanismError(PromptPyramidError, ValueError):
    pass


class LengthError(PromptPyramidError, ValueError):
    pass


class UnknownTokenError(PromptPyramidError, KeyError):
    pass


# training
class EmptyLevelError(PromptPyramidError, ValueError):
    pass


class NaNLossError(PromptPyramidError, FloatingPointError):
    pass


class TieError(PromptPyramidError, RuntimeError):
    pass


# data
class VocabTooSmallError(PromptPyramidError, ValueError):
    pass


# evaluation
class EmptyCorpusError(PromptPyramidError, ValueError):
    pass


class MissingGroundTruthError(PromptPyramidError, KeyError):
    pass


# persistence / cli
class ConfigError(PromptPyramidError, ValueError):
    pass


class VersionError(PromptPyramidError, ValueError):
    pass


class CorruptBlobError(PromptPyramidError, ValueError):
    pass
