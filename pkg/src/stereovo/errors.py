"""Exception types shared across the toolkit."""


class StereoVoError(Exception):
    """Base class for all stereovo errors."""


class PointBehindCamera(StereoVoError):
    """A point has non-positive depth in a camera it must project into."""


class NonPositiveDisparity(StereoVoError):
    """A stereo measurement has ul - ur <= 0 and cannot be triangulated."""


class DegenerateSample(StereoVoError):
    """A minimal point sample is too close to collinear to constrain a pose."""


class InsufficientCorrespondences(StereoVoError):
    """Fewer correspondences than the minimal sample / problem size needs."""


class AllHypothesesDegenerate(StereoVoError):
    """Every sampled minimal set was degenerate; no hypothesis produced."""


class NoValidModel(StereoVoError):
    """A-contrario search found no hypothesis with NFA <= epsilon."""


class OptimizerDiverged(StereoVoError):
    """Refinement cost became non-finite; the input data is unusable."""


class FrustumEmpty(StereoVoError):
    """Scene sampling could not place points visible in both frames."""


class MalformedFile(StereoVoError):
    """An on-disk artifact violates its documented format."""


class InvalidConfig(StereoVoError):
    """A configuration file is missing fields or contains unknown ones."""
