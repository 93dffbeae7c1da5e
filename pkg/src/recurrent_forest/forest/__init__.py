from .forest import HistoricalRandomForest, Tree, two_stage_bootstrap
from .io import dump_forest, load_forest

__all__ = ["HistoricalRandomForest", "Tree", "two_stage_bootstrap", "dump_forest",
           "load_forest"]
