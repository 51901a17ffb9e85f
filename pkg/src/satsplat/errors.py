"""Exception and warning types shared across the package."""


class SatsplatError(Exception):
    """Base class for all package errors."""


class NonFiniteInput(SatsplatError):
    pass


class DenominatorNearZero(SatsplatError):
    pass


class NoConvergence(SatsplatError):
    pass


class DegenerateNormal(SatsplatError):
    pass


class ShapeMismatch(SatsplatError):
    pass


class NonFiniteFeature(SatsplatError):
    pass


class NonFiniteWeights(SatsplatError):
    pass


class AllInvalid(SatsplatError):
    pass


class AllPatchesDegenerate(SatsplatError):
    pass


class EmptyMesh(SatsplatError):
    pass


class NoSurface(SatsplatError):
    pass


class EmptyView(SatsplatError):
    pass


class NonFiniteLoss(SatsplatError):
    pass


class AffineFitError(SatsplatError):
    pass


class RpcParseError(SatsplatError):
    pass


class HookFailure(SatsplatError):
    pass


class ExtrapolationWarning(UserWarning):
    """Issued when a point leaves the fitted validity cube of an RPC model."""


class DegenerateNormalWarning(UserWarning):
    """Issued when the in-plane reference axis is nearly parallel to the normal."""
