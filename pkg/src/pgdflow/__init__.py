"""HDG Stokes solver on parametrised geometries with a priori and a posteriori PGD reduced models."""

from .analysis import (
    ErrorReport,
    ResponseSurface,
    comparison_report,
    drag_errors,
    drag_response_surface,
    multidim_l2_error,
)
from .aposteriori import (
    AposterioriConfig,
    SnapshotPlan,
    SnapshotTensor,
    als_rank_one,
    compute_snapshots,
    run_aposteriori,
)
from .apriori import AprioriConfig, ParametricSystem, run_apriori
from .hdg import DataTerm, FullOrderSolution, HDGSystem, SolverError, StokesProblem, compute_drag, solve_full_order
from .mapping import SeparatedMapping, SwimmerGeometry, identity_mapping, separate_det_adj, swimmer_mapping
from .mesh import ParametricGrid, ReferenceMesh, load_mesh, save_mesh
from .separated import Mode, SeparatedSolution, compress, evaluate_at, normalize_mode

__version__ = "0.1.0"
