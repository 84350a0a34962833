"""Risk-aware 2.5D traversability mapping and planning toolkit."""

__version__ = "0.1.0"

from .cvar import compound_risk, cvar_gaussian, cvar_tail_factor
from .grid import BeliefGridMap, load_snapshot, save_snapshot

__all__ = [
    "BeliefGridMap",
    "compound_risk",
    "cvar_gaussian",
    "cvar_tail_factor",
    "load_snapshot",
    "save_snapshot",
    "__version__",
]
