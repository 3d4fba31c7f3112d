"""Mixed-dimensional finite-volume simulation of fractured porous media with
coupled flow, heat transport, poroelasticity and frictional contact."""

from .errors import FracThmError
from .fvm import MaterialParams
from .io import Scenario, dump_scenario, load_scenario, parse_scenario
from .mdgrid import FractureNetwork, MixedDimGrid, build_structured, import_msh
from .physics import Model, State
from .solver import SolverControls, TimePhase, run_simulation

__all__ = [
    "FracThmError",
    "FractureNetwork",
    "MaterialParams",
    "MixedDimGrid",
    "Model",
    "Scenario",
    "SolverControls",
    "State",
    "TimePhase",
    "build_structured",
    "dump_scenario",
    "import_msh",
    "load_scenario",
    "parse_scenario",
    "run_simulation",
]
__version__ = "0.1.0"
