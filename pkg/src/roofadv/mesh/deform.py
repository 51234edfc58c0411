"""Box-constrained deformation of an adversary template.

Vertices are reconstructed as::

    v_i = R(theta) (b * s_i * sigmoid(v0_raw_i + dv_i)) + c * tanh(t_raw)

where ``s_i`` is the stored initial sign per axis and ``v0_raw_i =
logit(|v0_i| / b)``.  Any real-valued parameters therefore give a mesh that
stays inside the size box ``b``, keeps each vertex in its initial octant and
translates by at most ``c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .core import TriangleMesh, icosphere

__all__ = [
    "DeformConfig",
    "DeformParams",
    "AdversaryTemplate",
    "apply_deformation",
    "deform_vertices",
    "rotation_z",
]

NUDGE = 1e-6


def rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class DeformConfig:
    b: tuple = (0.7, 0.7, 0.5)
    c: tuple = (0.1, 0.1, 0.0)
    rotation_mode: str = "fixed_identity"
    max_vertex_perturbation: float | None = None

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if b.shape != (3,) or c.shape != (3,):
            raise ValueError("b and c must be 3-vectors")
        if np.any(b <= 0):
            raise ValueError("size limits b must be positive")
        if np.any(c < 0):
            raise ValueError("translation limits c must be non-negative")
        if self.rotation_mode not in ("fixed_identity", "planar_z"):
            raise ValueError(f"unknown rotation_mode {self.rotation_mode!r}")
        if self.max_vertex_perturbation is not None and self.max_vertex_perturbation <= 0:
            raise ValueError("max_vertex_perturbation must be positive")
        object.__setattr__(self, "b", tuple(b.tolist()))
        object.__setattr__(self, "c", tuple(c.tolist()))

    @property
    def b_arr(self) -> np.ndarray:
        return np.asarray(self.b)

    @property
    def c_arr(self) -> np.ndarray:
        return np.asarray(self.c)


@dataclass(frozen=True, eq=False)
class DeformParams:
    dv: np.ndarray
    t_raw: np.ndarray
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dv", np.asarray(self.dv, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "t_raw", np.asarray(self.t_raw, dtype=float).reshape(3))
        object.__setattr__(self, "theta", float(self.theta))
        if not (np.all(np.isfinite(self.dv)) and np.all(np.isfinite(self.t_raw)) and np.isfinite(self.theta)):
            raise ValueError("deformation parameters must be finite")

    @classmethod
    def zeros(cls, n_vertices: int) -> "DeformParams":
        return cls(np.zeros((n_vertices, 3)), np.zeros(3), 0.0)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.dv.ravel(), self.t_raw, [self.theta]])

    @classmethod
    def from_vector(cls, vec, n_vertices: int) -> "DeformParams":
        vec = np.asarray(vec, dtype=float)
        if vec.size != 3 * n_vertices + 4:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {3 * n_vertices + 4}")
        return cls(vec[: 3 * n_vertices].reshape(-1, 3), vec[3 * n_vertices : 3 * n_vertices + 3], vec[-1])


@dataclass(frozen=True, eq=False)
class AdversaryTemplate:
    """Initial mesh plus its normalised (logit-space) vertex positions."""

    base: TriangleMesh
    v0_raw: np.ndarray
    signs: np.ndarray
    b: tuple

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, b=(0.7, 0.7, 0.5)) -> "AdversaryTemplate":
        """Build a template from a mesh already expressed in the adversary frame.

        Coordinates that are exactly zero, or that touch the size box, are nudged
        by ``1e-6`` m so the logit exists; the nudged mesh becomes ``base``.
        """
        b = np.asarray(b, dtype=float)
        v = mesh.vertices
        if np.any(np.abs(v) > b + 1e-9):
            raise ValueError("template vertices must lie inside the size box b")
        signs = np.where(v < 0, -1.0, 1.0)
        mag = np.clip(np.abs(v), NUDGE, b - NUDGE)
        base = TriangleMesh(signs * mag, mesh.faces)
        return cls(base, logit(mag / b), signs, tuple(b.tolist()))

    @classmethod
    def icosphere(cls, b=(0.7, 0.7, 0.5), subdivisions: int = 2) -> "AdversaryTemplate":
        return cls.from_mesh(icosphere(subdivisions).scaled(b), b)

    @property
    def n_vertices(self) -> int:
        return self.base.n_vertices

    def zero_params(self) -> DeformParams:
        return DeformParams.zeros(self.n_vertices)


def deform_vertices(template: AdversaryTemplate, params: DeformParams, config: DeformConfig, with_jacobian=False):
    """Reconstruct deformed vertices; optionally return the pieces of the Jacobian.

    The Jacobian pieces are ``(R, dlocal_ddv, dt_dtraw, local)`` where
    ``dlocal_ddv`` is the diagonal derivative of the pre-rotation coordinates
    with respect to ``dv`` (zero where common-object clamping is active).
    """
    if params.dv.shape[0] != template.n_vertices:
        raise ValueError(
            f"parameter size mismatch: {params.dv.shape[0]} displacements for {template.n_vertices} vertices"
        )
    b = config.b_arr
    c = config.c_arr
    if not np.allclose(b, template.b):
        raise ValueError("config size limits differ from the template's")
    # floor at the smallest normal float so a vertex never collapses onto the plane it may not cross
    sig = np.maximum(expit(template.v0_raw + params.dv), np.finfo(float).tiny)
    local = b * template.signs * sig
    active = np.ones_like(local, dtype=bool)
    if config.max_vertex_perturbation is not None:
        lo = template.base.vertices - config.max_vertex_perturbation
        hi = template.base.vertices + config.max_vertex_perturbation
        clamped = np.clip(local, lo, hi)
        active = clamped == local
        local = clamped
    theta = params.theta if config.rotation_mode == "planar_z" else 0.0
    R = rotation_z(theta)
    tanh_t = np.tanh(params.t_raw)
    translation = c * tanh_t
    vertices = local @ R.T + translation
    if not with_jacobian:
        return vertices
    dlocal = np.where(active, b * template.signs * sig * (1.0 - sig), 0.0)
    dtrans = c * (1.0 - tanh_t**2)
    return vertices, (R, dlocal, dtrans, local, theta)


def apply_deformation(template: AdversaryTemplate, params: DeformParams, config: DeformConfig) -> TriangleMesh:
    return TriangleMesh(deform_vertices(template, params, config), template.base.faces)


def params_vjp(jac, grad_vertices: np.ndarray, config: DeformConfig) -> np.ndarray:
    """Pull a vertex gradient back to the flat parameter vector ``[dv, t_raw, theta]``."""
    R, dlocal, dtrans, local, theta = jac
    g_local = grad_vertices @ R
    g_dv = g_local * dlocal
    g_t = grad_vertices.sum(axis=0) * dtrans
    if config.rotation_mode == "planar_z":
        dR = np.array([[-np.sin(theta), -np.cos(theta), 0.0], [np.cos(theta), -np.sin(theta), 0.0], [0, 0, 0]])
        g_theta = float(np.sum(grad_vertices * (local @ dR.T)))
    else:
        g_theta = 0.0
    return np.concatenate([g_dv.ravel(), g_t, [g_theta]])
