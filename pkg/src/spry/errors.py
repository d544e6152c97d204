"""Exception types raised across the engine."""


class SpryError(Exception):
    pass


class BoundsError(SpryError, ValueError):
    """Pixel coordinate outside the image."""


class BehindCameraError(SpryError, ValueError):
    """Point has non-positive depth in the camera frame."""


class DegenerateBatchError(SpryError, ValueError):
    """A reduction was asked to average over zero valid elements."""


class SceneLoadError(SpryError, OSError):
    pass


class CheckpointError(SpryError, OSError):
    pass


class TrainingDivergence(SpryError, FloatingPointError):
    """A loss or intermediate became non-finite.

    ``op`` names the first graph stage whose output was non-finite.
    """

    def __init__(self, op, message=None, iteration=None, scene=None):
        self.op = op
        self.iteration = iteration
        self.scene = scene
        parts = [message or f"non-finite value produced by '{op}'"]
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        if scene is not None:
            parts.append(f"scene={scene}")
        super().__init__(", ".join(parts))
