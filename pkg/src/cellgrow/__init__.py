"""cellgrow: recurrent-cell architecture search that grows its own search space.

The pieces compose bottom-up:

- autodiff: a small reverse-mode tape over dense float64 matrices
- cells: mixed-operator recurrent cell specs, builders and baselines
- bilevel: alternating weight/architecture optimization
- morphism: output-preserving growth, neuron splitting, pruning
- search: the staged grow-score-prune controller
- tasks: forecasting and character-modelling harnesses
- analysis: parameter accounting and run exports
- cli: the ``cellgrow`` command line
"""

from .analysis import CountSpec, complexity_estimate, count_params, inventory
from .autodiff import NumericError, Tape, Tensor, numerical_gradient
from .bilevel import BilevelConfig, train_stage
from .cells import (
    CellSpec,
    ModelState,
    build_baseline,
    build_darts,
    build_two_to_one,
    cell_forward,
    load_cell,
    save_cell,
    unroll,
)
from .morphism import (
    ConfigError,
    MorphConfig,
    grow_node,
    grow_operator_morph,
    grow_operator_split,
    preservation_error,
    prune_stage,
    replay_events,
    split_report,
    structural_signature,
)
from .search import SearchConfig, SearchResult, run_search
from .tasks import ForecastTask, LanguageTask, load_csv_series, load_text, synth_var_series

__version__ = "0.1.0"

__all__ = [
    "BilevelConfig",
    "CellSpec",
    "ConfigError",
    "CountSpec",
    "ForecastTask",
    "LanguageTask",
    "ModelState",
    "MorphConfig",
    "NumericError",
    "SearchConfig",
    "SearchResult",
    "Tape",
    "Tensor",
    "build_baseline",
    "build_darts",
    "build_two_to_one",
    "cell_forward",
    "complexity_estimate",
    "count_params",
    "grow_node",
    "grow_operator_morph",
    "grow_operator_split",
    "inventory",
    "load_cell",
    "load_csv_series",
    "load_text",
    "numerical_gradient",
    "preservation_error",
    "prune_stage",
    "replay_events",
    "run_search",
    "save_cell",
    "split_report",
    "structural_signature",
    "synth_var_series",
    "train_stage",
    "unroll",
]
