"""Incremental robot-centric implicit mapping on CPU with numpy."""
from .config import GridConfig, MapperConfig, read_config, write_config
from .decoder import Decoder, init_decoder
from .errors import RimError
from .feature_grid import LocalFeatureGrid, create_grid
from .global_map import GlobalMap
from .mesh import TriangleMesh
from .trainer import Mapper, bce_loss, sigmoid_map

__all__ = [
    "GridConfig", "MapperConfig", "read_config", "write_config", "Decoder", "init_decoder",
    "RimError", "LocalFeatureGrid", "create_grid", "GlobalMap", "TriangleMesh", "Mapper",
    "bce_loss", "sigmoid_map",
]
__version__ = "0.1.0"
