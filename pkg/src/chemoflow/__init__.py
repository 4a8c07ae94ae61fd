"""P1/MINI finite elements for a two-species chemotaxis-Navier-Stokes system."""
from .mesh import Mesh, generate_rect_mesh
from .scheme import (
    Forcing,
    InitialData,
    ModelParams,
    SimulationError,
    State,
    build_spaces,
    init_state,
    run_simulation,
)

__version__ = "0.1.0"

__all__ = [
    "Forcing",
    "InitialData",
    "Mesh",
    "ModelParams",
    "SimulationError",
    "State",
    "build_spaces",
    "generate_rect_mesh",
    "init_state",
    "run_simulation",
]
