"""Learning distortion-minimizing transport maps across incomparable spaces.

The package factors a learnable map between point clouds into an approximate
isometry onto a reference cloud followed by a transport map onto the target,
trains both networks with a distortion-gap-regularized loss, and ships
brute-force oracles that certify the solvers on tiny instances.
"""

from .geometry import (
    PointCloud,
    CostMatrix,
    CrossCost,
    RigidTransform,
    ShearTransform,
    pairwise_cost,
    cross_cost,
    apply_rigid,
    apply_linear,
    random_rotation,
    random_shear,
)
from .kernels import (
    Coupling,
    OtResult,
    GwResult,
    DivergenceResult,
    DistortionResult,
    GmGapResult,
    sinkhorn,
    sinkhorn_divergence,
    entropic_gw,
    distortion_sq,
    gromov_monge_gap,
)
from .nets import (
    MlpMap,
    AdamState,
    init_orthogonal,
    forward,
    backward,
    adam_step,
    save_checkpoint,
    load_checkpoint,
)
from .oracle import (
    GmOracleResult,
    SizeLimitError,
    brute_force_gromov_monge,
    gw_cost_naive,
    permutation_plan,
    reference_equivalence_check,
    composition_optimality_check,
    finite_diff,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
