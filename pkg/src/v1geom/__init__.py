"""Metric measure spaces induced by receptive-profile filter banks.

Subpackages:
  filters    Gabor bank, sampling, L2 inner products
  metric     generating kernel, patches, glued distance, local tensor
  surface    orientation maps, exponential coordinates, surface distance
  measure    ball volumes, approximating Dirichlet form, contraction checks
  diffusion  normalized connectivity kernels, graph Laplacian heat flow
  cli        experiment driver with reproducible manifests
"""

from .errors import (
    DisconnectedGraph,
    EmptyRow,
    GridMismatch,
    GridTooCoarse,
    GridTooSmall,
    LeftDomain,
    NoConvergence,
    NodeNotOnGrid,
    OnExceptionalSet,
    RadiusUnresolved,
    UnstableStep,
    V1GeomError,
    ZeroRowMass,
)
from .filters import (
    FeaturePoint,
    GaborParams,
    RetinalGrid,
    SampledFilter,
    gabor_eval,
    l2_inner,
    sample_filter,
)
from .metric import (
    FeatureGrid,
    GluedDistance,
    MetricConfig,
    MetricTensor,
    PatchSpec,
    distance,
    glued_distance,
    kernel,
    kernel_closed,
    kernel_numeric,
    limit_cometric,
    local_metric_tensor,
    patch_contains,
)

__version__ = "0.1.0"
