"""Exact discrete tools for multi-cause causal inference with a latent confounder."""

from .errors import (
    DagViolation,
    InconsistentFactors,
    InfeasibleMargins,
    NoConfounding,
    OverlapViolation,
    StratumTooSmall,
    ZeroLikelihoodRow,
    ZeroProbabilityEvidence,
    ZhatMismatch,
)
from .tables import (
    UNDEFINED,
    CopulaGrid,
    Dataset,
    JointTable,
    VarSpec,
    compose_joint,
    condition,
    copula_density,
    decompose_joint,
    marginalize,
)
from .scm import (
    PotentialOutcomeDist,
    ScmSpec,
    ground_truth_po,
    make_confounded_pair,
    observed_joint,
    sample,
)

__version__ = "0.1.0"
