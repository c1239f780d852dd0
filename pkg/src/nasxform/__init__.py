"""Loop-nest transformations that unify program and neural-architecture rewrites."""
from __future__ import annotations

from .errors import *  # noqa: F401,F403
from .expr import Expr
from .interp import ExecEnv, bind, conv_numpy, count_macs, execute, execute_sequential, reference_conv
from .ir import (
    AccessMap,
    Band,
    ConvSpec,
    DependenceSet,
    Instance,
    IterVar,
    LoopNest,
    Statement,
    TensorDecl,
    compute_dependences,
    conv_nest,
    enumerate_instances,
)
from .nnet import (
    Batch,
    FisherReport,
    Network,
    NetworkConfig,
    build_network,
    fisher_channel,
    fisher_layer,
    fisher_potential,
    legality_fisher,
    load_network_config,
    toy_network_config,
)
from .search import (
    Candidate,
    SearchConfig,
    SearchReport,
    draw_candidates,
    filter_and_score,
    run_search,
)
from .transforms import (
    LegalityResult,
    Transform,
    TransformSequence,
    Verdict,
    bottleneck,
    check_semantic_legality,
    depthwise,
    fuse,
    group,
    interchange,
    parse_sequence,
    sequence1,
    sequence2,
    sequence3,
    simplify,
    spatial_bottleneck,
    split,
    strip_mine,
    tile,
    unroll,
)

__version__ = "0.1.0"
