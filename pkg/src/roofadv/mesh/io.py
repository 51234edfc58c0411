"""Wavefront OBJ and ASCII PLY reading/writing for triangle meshes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import TriangleMesh

__all__ = ["MeshFormatError", "read_mesh", "write_mesh"]


class MeshFormatError(ValueError):
    """Malformed mesh file; the message names the offending line or face."""


def _fmt(x: float) -> str:
    return repr(float(x))


def write_mesh(mesh: TriangleMesh, path) -> Path:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        lines = [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    elif suffix == ".ply":
        lines = [
            "ply",
            "format ascii 1.0",
            f"element vertex {mesh.n_vertices}",
            "property double x",
            "property double y",
            "property double z",
            f"element face {mesh.n_faces}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
        lines += [f"{_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
        lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    else:
        raise MeshFormatError(f"unsupported mesh format {suffix!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    text = path.read_text(encoding="utf-8").splitlines()
    if suffix == ".obj":
        verts, faces = _read_obj(text)
    elif suffix == ".ply":
        verts, faces = _read_ply(text)
    else:
        raise MeshFormatError(f"unsupported mesh format {suffix!r}")
    vertices = np.array(verts, dtype=float).reshape(-1, 3)
    faces_arr = np.array([f for f, _ in faces], dtype=np.int64).reshape(-1, 3)
    for k, (f, lineno) in enumerate(faces):
        if min(f) < 0 or max(f) >= len(vertices):
            raise MeshFormatError(f"line {lineno}: face {k} references a vertex index out of range")
    return TriangleMesh(vertices, faces_arr)


def _parse_floats(parts, lineno, n):
    try:
        vals = [float(p) for p in parts[:n]]
    except ValueError:
        raise MeshFormatError(f"line {lineno}: cannot parse coordinates") from None
    if len(vals) != n:
        raise MeshFormatError(f"line {lineno}: expected {n} coordinates")
    return vals


def _read_obj(lines):
    verts, faces = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *parts = line.split()
        if tag == "v":
            verts.append(_parse_floats(parts, lineno, 3))
        elif tag == "f":
            if len(parts) != 3:
                raise MeshFormatError(f"line {lineno}: non-triangular face with {len(parts)} vertices")
            idx = []
            for p in parts:
                try:
                    i = int(p.split("/")[0])
                except ValueError:
                    raise MeshFormatError(f"line {lineno}: bad face index {p!r}") from None
                # negative OBJ indices are relative to the vertices read so far
                idx.append(i - 1 if i > 0 else len(verts) + i)
            faces.append((idx, lineno))
    return verts, faces


def _read_ply(lines):
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError("line 1: missing 'ply' magic")
    n_vert = n_face = None
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1:2] != ["ascii"]:
            raise MeshFormatError(f"line {lineno}: only ascii PLY is supported")
        if parts[0] == "element":
            try:
                count = int(parts[2])
            except (IndexError, ValueError):
                raise MeshFormatError(f"line {lineno}: bad element declaration") from None
            if parts[1] == "vertex":
                n_vert = count
            elif parts[1] == "face":
                n_face = count
        if parts[0] == "end_header":
            header_end = lineno
            break
    if header_end is None or n_vert is None:
        raise MeshFormatError("PLY header incomplete")
    n_face = n_face or 0
    body = lines[header_end:]
    if len(body) < n_vert + n_face:
        raise MeshFormatError(f"line {header_end + len(body)}: file truncated")
    verts, faces = [], []
    for k in range(n_vert):
        lineno = header_end + k + 1
        verts.append(_parse_floats(body[k].split(), lineno, 3))
    for k in range(n_face):
        lineno = header_end + n_vert + k + 1
        parts = body[n_vert + k].split()
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise MeshFormatError(f"line {lineno}: bad face record") from None
        if not vals or vals[0] != 3 or len(vals) != 4:
            raise MeshFormatError(f"line {lineno}: non-triangular face")
        faces.append((vals[1:], lineno))
    return verts, faces
