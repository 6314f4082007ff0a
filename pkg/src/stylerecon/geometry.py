"""Triangle meshes, the icosphere template, offset decoding and mesh regularizers."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

TEMPLATE_SUBDIVISIONS = 3
OFFSET_BOUND = 1.0
LAPLACIAN_WEIGHT = 3e-3
FLATTEN_WEIGHT = 3e-4


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with ``(V, 3)`` float vertices and ``(F, 3)`` int faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted ``(E, 2)`` array."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        return self.num_vertices - len(self.edges()) + self.num_faces

    def translated(self, offset) -> "Mesh":
        return Mesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces)

    def scaled(self, factor) -> "Mesh":
        return Mesh(self.vertices * np.asarray(factor, dtype=np.float64), self.faces)


def _icosahedron():
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = np.array(verts, dtype=np.float64)
    return v / np.linalg.norm(v, axis=1, keepdims=True), faces


def icosphere(subdivisions: int = TEMPLATE_SUBDIVISIONS) -> Mesh:
    """Unit icosphere built by repeated midpoint subdivision.

    Vertex order is fully determined by the face traversal order, so the
    result is identical across runs and platforms.
    """
    verts, faces = _icosahedron()
    verts = [tuple(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
                p /= np.linalg.norm(p)
                verts.append(tuple(p))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.array(verts), np.array(faces))


@lru_cache(maxsize=None)
def _cached_template() -> Mesh:
    return icosphere(TEMPLATE_SUBDIVISIONS)


def make_sphere_template() -> Mesh:
    """The 642-vertex / 1280-face unit sphere every reconstruction starts from."""
    return _cached_template()


def offset_dim(template: Mesh) -> int:
    """Length of the flat network output decoded by :func:`decode_mesh`."""
    return template.num_vertices * 3 + 3


def split_offsets(flat: torch.Tensor, num_vertices: int):
    """Split ``(B, 3V + 3)`` network output into per-vertex and global parts."""
    if flat.shape[-1] != num_vertices * 3 + 3:
        raise ValueError(f"expected {num_vertices * 3 + 3} offset values, got {flat.shape[-1]}")
    per_vertex = flat[..., : num_vertices * 3].reshape(*flat.shape[:-1], num_vertices, 3)
    return per_vertex, flat[..., num_vertices * 3:]


def decode_mesh(per_vertex: torch.Tensor, global_offset: torch.Tensor, template: Mesh,
                bound: float = OFFSET_BOUND) -> torch.Tensor:
    """Deform the template by bounded per-vertex offsets plus a global translation.

    Parameters
    ----------
    per_vertex : tensor of shape (B, V, 3) or (V, 3)
        Raw, unbounded offsets; squashed with ``bound * tanh``.
    global_offset : tensor of shape (B, 3) or (3,)
    template : Mesh

    Returns
    -------
    vertices : tensor with the same leading shape as ``per_vertex``.
        Faces are always ``template.faces``.
    """
    if per_vertex.shape[-2:] != (template.num_vertices, 3):
        raise ValueError(
            f"offsets of shape {tuple(per_vertex.shape)} do not match template with "
            f"{template.num_vertices} vertices")
    if global_offset.shape[-1] != 3 or global_offset.shape[:-1] != per_vertex.shape[:-2]:
        raise ValueError("global offset must be a 3-vector per mesh")
    base = torch.as_tensor(template.vertices, dtype=per_vertex.dtype, device=per_vertex.device)
    return base + bound * torch.tanh(per_vertex) + global_offset.unsqueeze(-2)


# -- regularizers ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _laplacian_matrix(faces_key: bytes, num_vertices: int) -> np.ndarray:
    faces = np.frombuffer(faces_key, dtype=np.int64).reshape(-1, 3)
    adj = np.zeros((num_vertices, num_vertices))
    for i, j in ((0, 1), (1, 2), (2, 0)):
        adj[faces[:, i], faces[:, j]] = 1.0
        adj[faces[:, j], faces[:, i]] = 1.0
    deg = adj.sum(axis=1, keepdims=True)
    deg[deg == 0] = 1.0
    return np.eye(num_vertices) - adj / deg


@lru_cache(maxsize=8)
def _flatten_quads(faces_key: bytes) -> np.ndarray:
    """(E, 4) array of (v0, v1, opposite_a, opposite_b) for interior edges."""
    faces = np.frombuffer(faces_key, dtype=np.int64).reshape(-1, 3)
    opposite: dict[tuple[int, int], list[int]] = {}
    for a, b, c in faces.tolist():
        for u, v, w in ((a, b, c), (b, c, a), (c, a, b)):
            opposite.setdefault((min(u, v), max(u, v)), []).append(w)
    quads = [(u, v, ws[0], ws[1]) for (u, v), ws in sorted(opposite.items()) if len(ws) == 2]
    return np.array(quads, dtype=np.int64).reshape(-1, 4)


def laplacian_loss(vertices: torch.Tensor, faces: np.ndarray) -> torch.Tensor:
    """Sum over vertices of ``|v - mean(neighbours)|^2``, averaged over the batch.

    Uniform umbrella weights, so the value scales with the square of a global
    scale factor applied to the mesh.
    """
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    lap = torch.as_tensor(_laplacian_matrix(faces.tobytes(), vertices.shape[-2]),
                          dtype=vertices.dtype, device=vertices.device)
    delta = torch.matmul(lap, vertices)
    per_mesh = (delta ** 2).sum(dim=(-1, -2))
    return per_mesh.mean()


def flatten_loss(vertices: torch.Tensor, faces: np.ndarray, eps: float = 1e-12) -> torch.Tensor:
    """Sum over interior edges of ``(1 + cos theta)^2``; theta is the dihedral angle.

    Zero for a flat pair of faces, scale invariant.
    """
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    quads = torch.as_tensor(_flatten_quads(faces.tobytes()), device=vertices.device)
    v0 = vertices[..., quads[:, 0], :]
    v1 = vertices[..., quads[:, 1], :]
    va = vertices[..., quads[:, 2], :]
    vb = vertices[..., quads[:, 3], :]
    axis = v1 - v0
    axis_sq = (axis * axis).sum(-1, keepdim=True) + eps

    def perp(p):
        rel = p - v0
        return rel - axis * (rel * axis).sum(-1, keepdim=True) / axis_sq

    pa, pb = perp(va), perp(vb)
    cos = (pa * pb).sum(-1) / torch.sqrt(((pa * pa).sum(-1) + eps) * ((pb * pb).sum(-1) + eps))
    per_mesh = ((1.0 + cos) ** 2).sum(-1)
    return per_mesh.mean()


def mesh_regularizers(vertices, faces=None, laplacian_weight: float = LAPLACIAN_WEIGHT,
                      flatten_weight: float = FLATTEN_WEIGHT) -> torch.Tensor:
    """Weighted Laplacian smoothing plus face-normal flatness penalty."""
    if isinstance(vertices, Mesh):
        vertices, faces = torch.as_tensor(vertices.vertices), vertices.faces
    return (laplacian_weight * laplacian_loss(vertices, faces)
            + flatten_weight * flatten_loss(vertices, faces))


# -- primitive shapes -----------------------------------------------------------------------


def make_cube(half_extent=0.5) -> Mesh:
    h = np.broadcast_to(np.asarray(half_extent, dtype=np.float64), (3,))
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return Mesh(corners * h, np.array(faces))


def make_pyramid(half_base=0.5, height=1.0) -> Mesh:
    """Square pyramid standing on the plane ``y = -height / 2``."""
    b = half_base
    y0, y1 = -height / 2.0, height / 2.0
    verts = np.array([[-b, y0, -b], [b, y0, -b], [b, y0, b], [-b, y0, b], [0.0, y1, 0.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3], [0, 4, 1], [1, 4, 2], [2, 4, 3], [3, 4, 0]])
    return Mesh(verts, faces)


def make_torus(major=0.5, minor=0.2, segments=24, rings=12) -> Mesh:
    """Torus around the y axis."""
    u = np.arange(segments) * 2 * np.pi / segments
    v = np.arange(rings) * 2 * np.pi / rings
    uu, vv = np.meshgrid(u, v, indexing="ij")
    r = major + minor * np.cos(vv)
    verts = np.stack([r * np.cos(uu), minor * np.sin(vv), r * np.sin(uu)], -1).reshape(-1, 3)
    faces = []
    for i in range(segments):
        for j in range(rings):
            a = i * rings + j
            b = ((i + 1) % segments) * rings + j
            c = ((i + 1) % segments) * rings + (j + 1) % rings
            d = i * rings + (j + 1) % rings
            faces += [(a, d, c), (a, c, b)]
    return Mesh(verts, np.array(faces))


def make_sphere(radius=0.5, subdivisions=2) -> Mesh:
    return icosphere(subdivisions).scaled(radius)


# -- OBJ io ---------------------------------------------------------------------------------


def save_obj(mesh: Mesh, path) -> None:
    """Write an ASCII Wavefront OBJ with ``v`` and ``f`` records (1-based indices)."""
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.8f} {y:.8f} {z:.8f}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def load_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
