"""Exception types shared across the toolkit."""


class ShadowMarkError(Exception):
    """Base class for toolkit errors."""


class ShapeError(ShadowMarkError, ValueError):
    pass


class NonFiniteError(ShadowMarkError, FloatingPointError):
    pass


class CorruptionError(ShadowMarkError):
    """Stored bytes do not match their recorded digest."""


class FrozenParameterError(ShadowMarkError, PermissionError):
    pass


class PretrainingError(ShadowMarkError):
    def __init__(self, message, final_loss=None):
        super().__init__(message)
        self.final_loss = final_loss


class DivergenceError(ShadowMarkError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log or []
