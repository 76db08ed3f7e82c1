class BeamsightError(Exception):
    """Base class for every error raised by the pipeline."""


class InvalidArgumentError(BeamsightError, ValueError):
    pass


class ConfigError(InvalidArgumentError):
    pass


class InvalidStateError(BeamsightError, RuntimeError):
    pass


class IdentificationFailure(BeamsightError):
    pass


class TrackingLost(BeamsightError):
    """The TX track was dropped.

    Args:
        frame_index (int): Index (within the tracked run) of the frame where the track was lost.
        boxes (list): TX boxes produced before the loss.
    """

    def __init__(self, frame_index, boxes=()):
        super().__init__('TX track lost at frame {}'.format(frame_index))
        self.frame_index = frame_index
        self.boxes = list(boxes)


class EmptySearchSpaceError(BeamsightError):
    pass


class NoVanishingPointError(BeamsightError):
    pass


class DegenerateGeometryError(BeamsightError):
    pass


class NumericFailure(BeamsightError, ArithmeticError):

    def __init__(self, layer):
        super().__init__('non-finite activations after layer {}'.format(layer))
        self.layer = layer


class IOFailure(BeamsightError, OSError):
    pass
