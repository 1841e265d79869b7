"""Data-driven discovery of governing equations for dynamical systems.

The search evolves symbolic expressions for each state variable's time
derivative on island populations, with a pluggable proposal operator (an LLM
chat endpoint, a scripted test double, or uninformed random variation),
assembles per-variable Pareto fronts into candidate systems, and selects the
knee of the system-level complexity/fitness front.
"""

__version__ = "0.1.0"

from .expr import (  # noqa: F401
    Binary,
    Const,
    Expr,
    Literal,
    Unary,
    Variable,
    complexity,
    evaluate,
    parse,
    random_seed_expr,
    render_with_constants,
    to_masked_string,
)
from .numeric import (  # noqa: F401
    Divergence,
    TrajectoryData,
    estimate_derivatives,
    fit_constants,
    integrate,
)
from .dataset import (  # noqa: F401
    BenchmarkSystem,
    ProblemInstance,
    load_registry,
    make_instance,
)
from .proposer import (  # noqa: F401
    PromptContext,
    ProposerConfig,
    build_prompt,
    make_proposer,
    parse_response,
)
from .evolve import (  # noqa: F401
    FittedEquation,
    Island,
    SearchConfig,
    equation_pareto,
    evolve_island,
    llm_symreg,
    refine,
    score_equation,
    softmax_select,
)
from .assemble import (  # noqa: F401
    DiscoveryResult,
    SystemCandidate,
    cartesian_candidates,
    discover,
    select_knee,
    system_pareto,
    trajectory_fitness,
)
from .bench import (  # noqa: F401
    LAMBDAS,
    RunReport,
    discovery_table,
    evaluate_discovery,
    nmse,
    run_benchmark,
)
