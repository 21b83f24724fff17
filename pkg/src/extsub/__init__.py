"""Parameter arithmetic on LoRA adapters: direct subtraction and extraction-before-subtraction."""

from .adapter import (
    AdapterLayer,
    AdapterModel,
    Convention,
    DeltaModel,
    assemble,
    check_compatible,
    compose_delta,
    export,
)
from .core import (
    Degeneracy,
    GeometryReport,
    Mode,
    RowGeometry,
    UnlearnConfig,
    add,
    direct_subtract,
    ext_sub,
    ext_sub_row,
    extract,
    extract_row,
    general_direction,
    geometry_stats,
    unlearn,
)
from .errors import ExtSubError
from .lowrank import TruncationResult, effective_rank, svd_truncate
from .tensor_store import DType, TensorEntry, TensorStore, load, save, to_compute
from .textmetrics import RepScore, rep_n, score_file

__version__ = "0.1.0"

__all__ = [
    "AdapterLayer",
    "AdapterModel",
    "Convention",
    "DType",
    "Degeneracy",
    "DeltaModel",
    "ExtSubError",
    "GeometryReport",
    "Mode",
    "RepScore",
    "RowGeometry",
    "TensorEntry",
    "TensorStore",
    "TruncationResult",
    "UnlearnConfig",
    "add",
    "assemble",
    "check_compatible",
    "compose_delta",
    "direct_subtract",
    "effective_rank",
    "export",
    "ext_sub",
    "ext_sub_row",
    "extract",
    "extract_row",
    "general_direction",
    "geometry_stats",
    "load",
    "rep_n",
    "save",
    "score_file",
    "svd_truncate",
    "to_compute",
    "unlearn",
]
