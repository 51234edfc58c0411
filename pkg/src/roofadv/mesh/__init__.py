from .core import (
    MeshValidationError,
    TriangleMesh,
    icosphere,
    laplacian_loss,
    laplacian_loss_and_grad,
    laplacian_operator,
    merge_meshes,
)
from .deform import (
    AdversaryTemplate,
    DeformConfig,
    DeformParams,
    apply_deformation,
    deform_vertices,
    params_vjp,
    rotation_z,
)
from .io import MeshFormatError, read_mesh, write_mesh
from .random_mesh import random_watertight_mesh
