"""Tree-guided aggregation of rare features for sparse linear regression."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .admm import FitConfig, FitResult, fit, fit_path, kkt_residual, make_grid, objective
from .kernels import BACKEND
from .tree import (AggregatingSet, FeatureTree, aggregation_matrix, build_from_parent_list,
                   build_tree_hclust, coarsest_aggregating_set, cut_tree, cut_tree_k,
                   read_tree_csv, write_tree_csv)

__all__ = ["AggregatingSet", "BACKEND", "FeatureTree", "FitConfig", "FitResult",
           "aggregation_matrix", "build_from_parent_list", "build_tree_hclust",
           "coarsest_aggregating_set", "cut_tree", "cut_tree_k", "fit", "fit_path",
           "kkt_residual", "make_grid", "objective", "read_tree_csv", "write_tree_csv"]
