"""Exception hierarchy shared across the pipeline."""


class VisionError(Exception):
    """Base class for every domain error raised by this package."""


class DomainFailure(VisionError):
    """Failures that mean "no answer for this input" rather than misuse.

    The CLI maps these to exit code 2.
    """


# geometry
class LimitViolation(VisionError):
    pass


class BehindCamera(VisionError):
    pass


class InvalidDepth(VisionError):
    pass


# cylinder_fit
class DegenerateInput(DomainFailure):
    pass


class NoConsensus(DomainFailure):
    pass


class CenterCoincident(DomainFailure):
    pass


class OffSurface(VisionError):
    pass


# roi_fusion
class EmptyBox(DomainFailure):
    pass


class NoValidDepth(DomainFailure):
    pass


# mission
class IllegalEvent(VisionError):
    pass


class BackendFailure(VisionError):
    pass


# vlm_client
class VlmError(VisionError):
    pass


class UnknownProfile(VlmError):
    pass


class NoParsableJson(VlmError):
    pass


class UnknownLabel(VlmError):
    pass


class InvalidAssessment(VlmError):
    pass


class FixtureMiss(VlmError):
    pass


# simulator
class CameraOutsideCylinder(VisionError):
    pass


class NotVisible(DomainFailure):
    pass
