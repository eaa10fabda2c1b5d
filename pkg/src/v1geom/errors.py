"""Exception types shared across the package."""


class V1GeomError(Exception):
    """Base class for all package errors."""


class GridTooCoarse(V1GeomError):
    """Retinal grid step exceeds the aliasing guard (lambda/8)."""


class GridTooSmall(V1GeomError):
    """Retinal grid does not cover the 4-sigma support of a filter."""


class GridMismatch(V1GeomError):
    """Two sampled filters do not share the same retinal grid."""


class NodeNotOnGrid(V1GeomError):
    """A query point is not a node of the feature grid."""


class LeftDomain(V1GeomError):
    """A flow trajectory exited the orientation-map domain."""


class NoConvergence(V1GeomError):
    """Shooting iteration failed to converge within the iteration cap."""


class OnExceptionalSet(V1GeomError):
    """Query point lies in a pinwheel cell where the map is not differentiable."""


class RadiusUnresolved(V1GeomError):
    """Ball radius too small for the grid to resolve (fewer than 4 cells across)."""


class ZeroRowMass(V1GeomError):
    """Kernel normalization hit a row with zero mass."""


class EmptyRow(V1GeomError):
    """A kernel row has no neighbor besides the diagonal within the cutoff."""


class DisconnectedGraph(V1GeomError):
    """The neighborhood graph is not connected."""

    def __init__(self, n_components: int):
        self.n_components = n_components
        super().__init__(f"graph has {n_components} connected components")


class UnstableStep(V1GeomError):
    """Explicit Euler step violates the row-sum stability bound."""
