"""projnet: gradient-free neural network training via constraint projections.

Networks are lowered to computation graphs of scalar primitives; training
finds edge values satisfying every node's local constraint by iterative
projection (alternating projections, Douglas-Rachford, cyclic projections).
"""

from .projops import (
    CrossEntropyProx,
    Dot,
    Identity,
    Margin,
    Max,
    Quantize,
    ScalarSolveConfig,
    Sum,
    SumReLU,
)
from .graph import (
    EdgeState,
    Graph,
    GraphBuilder,
    ParamTree,
    bipartition,
    extract_params,
    init_state,
    trace,
)
from .solve import Method, SolverConfig, TrainReport, train

__all__ = [
    "CrossEntropyProx",
    "Dot",
    "EdgeState",
    "Graph",
    "GraphBuilder",
    "Identity",
    "Margin",
    "Max",
    "Method",
    "ParamTree",
    "Quantize",
    "ScalarSolveConfig",
    "SolverConfig",
    "Sum",
    "SumReLU",
    "TrainReport",
    "bipartition",
    "extract_params",
    "init_state",
    "trace",
    "train",
]

__version__ = "0.1.0"
