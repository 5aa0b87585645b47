"""Conduction-velocity tensor and fiber-field identification on triangle
meshes from sparse activation-time maps."""
from .conductivity import (DEFAULT_SPEED2_CAP, FiberParams, assemble_tensor, conduction_velocity,
                           fiber_and_transverse, fiber_direction)
from .eikonal import (ActivationMap, ConductivityTensorField, analytic_constant_tensor_map,
                      local_cv, map_gradient, solve_fim)
from .errors import (ConfigError, FiberFieldError, InvalidArgument, MeshError,
                     NonFiniteLossError, SolverError)
from .geometry import (PointSample, SampleSet, TriMesh, build_unit_grid_mesh,
                       farthest_point_sample, latin_hypercube_sample, project_points)
from .tangent_basis import TangentBasis, trivial_planar_basis, vector_heat_basis
from .trainer import Dataset, TrainingConfig, compute_loss, huber, train

__version__ = "0.1.0"
