"""Smooth differentiable mesh renderer.

Pixels see each face through a sigmoid of the signed squared screen distance
to that face; coverage is aggregated as ``1 - prod(1 - D_i)`` and colours by a
depth-weighted softmax. Only pixel/face pairs whose coverage could exceed
``cull_eps`` are evaluated, which keeps a 642-vertex sphere cheap at 64x64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import Mesh

DEFAULT_DISTANCE = 2.732
DEFAULT_ELEVATION = 30.0
DEFAULT_VIEWING_ANGLE = 30.0
DEFAULT_SMOOTHING = 1e-4
DEFAULT_DEPTH_GAMMA = 1e-4
NEAR, FAR = 1.0, 100.0
FACE_GREY = 0.7
AMBIENT, DIRECTIONAL = 0.5, 0.5
LIGHT_DIRECTION = (0.0, 1.0, 0.0)


@dataclass(frozen=True)
class ViewSpec:
    """Camera looking at the origin from (azimuth, elevation, distance)."""

    azimuth: float
    elevation: float = DEFAULT_ELEVATION
    distance: float = DEFAULT_DISTANCE
    image_size: int = 64
    viewing_angle: float = DEFAULT_VIEWING_ANGLE

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError("camera distance must be positive")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")

    def with_azimuth(self, azimuth: float) -> "ViewSpec":
        return replace(self, azimuth=float(azimuth))


def camera_frames(azimuth, elevation, distance):
    """Eye positions ``(B, 3)`` and world-to-camera rotations ``(B, 3, 3)``.

    Angles in degrees. Camera ``z`` points at the origin, ``y`` is up.
    """
    az = torch.deg2rad(azimuth)
    el = torch.deg2rad(elevation)
    eye = torch.stack([distance * torch.cos(el) * torch.sin(az),
                       distance * torch.sin(el),
                       -distance * torch.cos(el) * torch.cos(az)], dim=-1)
    z_axis = -eye / eye.norm(dim=-1, keepdim=True)
    up = torch.tensor([0.0, 1.0, 0.0], dtype=eye.dtype).expand_as(eye)
    x_axis = torch.cross(up, z_axis, dim=-1)
    x_axis = x_axis / x_axis.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    y_axis = torch.cross(z_axis, x_axis, dim=-1)
    return eye, torch.stack([x_axis, y_axis, z_axis], dim=-2)


def project(vertices: torch.Tensor, azimuth, elevation, distance, viewing_angle=DEFAULT_VIEWING_ANGLE):
    """Perspective projection to normalized screen coords in ``[-1, 1]`` plus camera depth.

    Returns ``(B, V, 2)`` screen xy (x right, y up) and ``(B, V)`` depth.
    """
    az, el, dist = (torch.as_tensor(a, dtype=vertices.dtype) for a in (azimuth, elevation, distance))
    eye, rot = camera_frames(az, el, dist)
    cam = torch.einsum("bij,bvj->bvi", rot, vertices - eye[:, None, :])
    depth = cam[..., 2]
    width = math.tan(math.radians(viewing_angle))
    safe = torch.where(depth.abs() > 1e-9, depth, torch.full_like(depth, 1e-9))
    return cam[..., :2] / (safe[..., None] * width), depth


def pixel_centers(image_size: int, dtype=torch.float32):
    """Screen x of columns and screen y of rows (row 0 is the top)."""
    c = (2.0 * torch.arange(image_size, dtype=dtype) + 1.0) / image_size - 1.0
    return c, -c


class CameraBatch(NamedTuple):
    """Per-element camera angles as tensors, for rendering training batches."""

    azimuth: torch.Tensor
    elevation: torch.Tensor
    distance: torch.Tensor
    image_size: int
    viewing_angle: float = DEFAULT_VIEWING_ANGLE

    @classmethod
    def from_views(cls, views: Sequence[ViewSpec]) -> "CameraBatch":
        az, el, dist, size, angle = _views_to_tensors(list(views), len(views), torch.float64)
        return cls(az, el, dist, size, angle)


def _views_to_tensors(views, batch: int, dtype):
    if isinstance(views, CameraBatch):
        if views.azimuth.shape[0] != batch:
            raise ValueError(f"{views.azimuth.shape[0]} cameras for a batch of {batch} meshes")
        return (views.azimuth.to(dtype), views.elevation.to(dtype), views.distance.to(dtype),
                views.image_size, views.viewing_angle)
    if isinstance(views, ViewSpec):
        views = [views] * batch
    if len(views) != batch:
        raise ValueError(f"{len(views)} views for a batch of {batch} meshes")
    sizes = {v.image_size for v in views}
    angles = {v.viewing_angle for v in views}
    if len(sizes) != 1 or len(angles) != 1:
        raise ValueError("all views in a batch must share image_size and viewing_angle")
    az = torch.tensor([v.azimuth for v in views], dtype=dtype)
    el = torch.tensor([v.elevation for v in views], dtype=dtype)
    dist = torch.tensor([v.distance for v in views], dtype=dtype)
    return az, el, dist, sizes.pop(), angles.pop()


def _face_shading(vertices, faces):
    """Half-Lambert grey per face, smooth in the vertex positions."""
    tri = vertices[:, faces]
    normal = torch.cross(tri[:, :, 1] - tri[:, :, 0], tri[:, :, 2] - tri[:, :, 0], dim=-1)
    normal = normal / torch.sqrt((normal ** 2).sum(-1, keepdim=True) + 1e-20)
    light = torch.tensor(LIGHT_DIRECTION, dtype=vertices.dtype)
    cos = (normal * light).sum(-1)
    return FACE_GREY * (AMBIENT + DIRECTIONAL * (0.5 + 0.5 * cos))


def _seg_dist2(p, a, b, eps):
    ab = b - a
    t = ((p - a) * ab).sum(-1) / ((ab * ab).sum(-1) + eps)
    t = t.clamp(0.0, 1.0)
    d = p - a - t[..., None] * ab
    return (d * d).sum(-1)


def _signed_scaled_dist(p, tri, smoothing, inner_power, eps=1e-20):
    """``+d_in^2 / smoothing`` inside the triangle, ``-d_out^2 / smoothing`` outside.

    Outside it is the exact squared distance to the triangle; inside it is a
    smooth p-norm soft-minimum of the distances to the three edge lines,
    which vanishes on the boundary and stays C1 across it.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    w0 = cross(b - a, p - a)
    w1 = cross(c - b, p - b)
    w2 = cross(a - c, p - c)
    inside = ((w0 > 0) & (w1 > 0) & (w2 > 0)) | ((w0 < 0) & (w1 < 0) & (w2 < 0))

    d_out = torch.minimum(torch.minimum(_seg_dist2(p, a, b, eps), _seg_dist2(p, b, c, eps)),
                          _seg_dist2(p, c, a, eps))

    lengths = torch.stack([(b - a).norm(dim=-1), (c - b).norm(dim=-1), (a - c).norm(dim=-1)], -1)
    heights = torch.stack([w0, w1, w2], -1).abs() / (lengths + eps)
    heights = torch.where(inside[:, None], heights, torch.ones_like(heights))
    # factor out the smallest height so no power overflows when a pixel sits on an edge
    heights = heights.clamp_min(1e-30)
    h_min = heights.min(-1, keepdim=True).values
    ratio = h_min / heights
    d_in = h_min[:, 0] * (ratio ** inner_power).sum(-1) ** (-1.0 / inner_power)
    return torch.where(inside, d_in ** 2, -d_out) / smoothing


def _candidate_pairs(tri, valid, margin, size):
    """(batch, face, row, col) index tensors of pixels inside each grown face bbox."""
    n_faces = tri.shape[1]
    lo = tri.min(dim=2).values - margin
    hi = tri.max(dim=2).values + margin
    # column j has centre x_j = (2j + 1) / size - 1; row i has y_i = 1 - (2i + 1) / size
    c0 = torch.ceil(((lo[..., 0] + 1.0) * size - 1.0) / 2.0).clamp(0, size)
    c1 = torch.floor(((hi[..., 0] + 1.0) * size - 1.0) / 2.0).clamp(-1, size - 1)
    r0 = torch.ceil(((1.0 - hi[..., 1]) * size - 1.0) / 2.0).clamp(0, size)
    r1 = torch.floor(((1.0 - lo[..., 1]) * size - 1.0) / 2.0).clamp(-1, size - 1)
    nx = (c1 - c0 + 1).clamp_min(0).long()
    ny = (r1 - r0 + 1).clamp_min(0).long()
    count = (nx * ny * valid).flatten()
    owner = torch.repeat_interleave(torch.arange(count.numel()), count)
    start = torch.cumsum(count, 0) - count
    local = torch.arange(owner.numel()) - start[owner]
    nx_o = nx.flatten()[owner]
    rows = r0.flatten().long()[owner] + local // nx_o
    cols = c0.flatten().long()[owner] + local % nx_o
    return owner // n_faces, owner % n_faces, rows, cols


def render_batch(vertices: torch.Tensor, faces, views, smoothing: float = DEFAULT_SMOOTHING,
                 depth_gamma: float = DEFAULT_DEPTH_GAMMA, cull_eps: float | None = None,
                 inner_power: float = 4.0, background=(0.0, 0.0, 0.0)) -> torch.Tensor:
    """Render a batch of meshes that share one face list.

    Parameters
    ----------
    vertices : tensor (B, V, 3)
    faces : int array (F, 3)
    views : ViewSpec, sequence of B ViewSpec, or CameraBatch
    smoothing : positive float
        Width of the soft boundary in squared normalized-screen units.
    depth_gamma : positive float
        Temperature of the depth softmax used for colour aggregation.
    cull_eps : float, optional
        Coverage below which a pixel/face pair is skipped; defaults to 1e-8 in
        float32 and 1e-20 in float64.

    Returns
    -------
    tensor (B, 4, H, W) in [0, 1]; channels RGB then alpha.
    """
    if smoothing <= 0 or depth_gamma <= 0:
        raise ValueError("smoothing and depth_gamma must be positive")
    if vertices.dim() != 3 or vertices.shape[-1] != 3:
        raise ValueError("vertices must have shape (B, V, 3)")
    dtype = vertices.dtype
    batch = vertices.shape[0]
    az, el, dist, size, angle = _views_to_tensors(views, batch, dtype)
    faces_t = torch.as_tensor(np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    n_pix = size * size
    bg = torch.tensor(background, dtype=dtype)
    if faces_t.numel() == 0 or vertices.shape[1] == 0:
        rgb = bg.view(1, 3, 1, 1).expand(batch, 3, size, size)
        return torch.cat([rgb, torch.zeros(batch, 1, size, size, dtype=dtype)], 1) + 0 * vertices.sum()

    screen, depth = project(vertices, az, el, dist, angle)
    tri = screen[:, faces_t]                      # (B, F, 3, 2)
    tri_depth = depth[:, faces_t]                 # (B, F, 3)
    valid = (tri_depth > NEAR).all(-1)            # faces touching the near plane are dropped
    shade = _face_shading(vertices, faces_t)      # (B, F)
    zn = (FAR - tri_depth.mean(-1)) / (FAR - NEAR)

    # conservative candidate pairs: pixel centre within the face bbox grown by the cull margin
    if cull_eps is None:
        cull_eps = 1e-20 if dtype == torch.float64 else 1e-8
    margin = math.sqrt(smoothing * math.log(1.0 / cull_eps))
    xs, ys = pixel_centers(size, dtype)
    b_idx, f_idx, r_idx, c_idx = _candidate_pairs(tri.detach(), valid, margin, size)

    p = torch.stack([xs[c_idx], ys[r_idx]], -1)
    x = _signed_scaled_dist(p, tri[b_idx, f_idx], smoothing, inner_power)
    pix = b_idx * n_pix + r_idx * size + c_idx

    log_miss = torch.zeros(batch * n_pix, dtype=dtype).index_add(0, pix, F.logsigmoid(-x))
    alpha = 1.0 - torch.exp(log_miss)

    # colour: softmax over faces of log D + depth / gamma, with a background slot
    logit = F.logsigmoid(x) + zn[b_idx, f_idx] / depth_gamma
    bg_logit = 1e-3 / depth_gamma
    with torch.no_grad():
        m = torch.full((batch * n_pix,), bg_logit, dtype=dtype)
        m = m.scatter_reduce(0, pix, logit.detach(), reduce="amax", include_self=True)
    e = torch.exp(logit - m[pix])
    denom = torch.exp(bg_logit - m).index_add(0, pix, e)
    colour = torch.zeros(batch * n_pix, dtype=dtype).index_add(0, pix, e * shade[b_idx, f_idx])
    w_bg = torch.exp(bg_logit - m) / denom
    rgb = (colour / denom)[:, None] + w_bg[:, None] * bg

    img = torch.cat([rgb, alpha[:, None]], -1).view(batch, size, size, 4)
    return img.permute(0, 3, 1, 2).clamp(0.0, 1.0)


def render(mesh: Mesh, view: ViewSpec, smoothing: float = DEFAULT_SMOOTHING, **kwargs) -> np.ndarray:
    """Render one mesh to an ``(H, W, 4)`` float array."""
    verts = torch.as_tensor(mesh.vertices, dtype=torch.float64)[None]
    with torch.no_grad():
        img = render_batch(verts, mesh.faces, view, smoothing=smoothing, **kwargs)
    return img[0].permute(1, 2, 0).numpy()


def render_silhouette(mesh: Mesh, view: ViewSpec, smoothing: float = DEFAULT_SMOOTHING,
                      **kwargs) -> np.ndarray:
    """Alpha channel of :func:`render` as an ``(H, W)`` array."""
    return render(mesh, view, smoothing=smoothing, **kwargs)[..., 3]


def hard_silhouette(mesh: Mesh, view: ViewSpec) -> np.ndarray:
    """Binary coverage by point-in-triangle tests at pixel centres (no smoothing).

    Shares only the camera projection with the soft path.
    """
    size = view.image_size
    out = np.zeros((size, size), dtype=bool)
    if mesh.num_faces == 0:
        return out
    verts = torch.as_tensor(mesh.vertices, dtype=torch.float64)[None]
    t = lambda v: torch.tensor([v], dtype=torch.float64)  # noqa: E731
    screen, depth = project(verts, t(view.azimuth), t(view.elevation), t(view.distance),
                            view.viewing_angle)
    screen, depth = screen[0].numpy(), depth[0].numpy()
    xs, ys = (c.numpy() for c in pixel_centers(size, torch.float64))
    px, py = np.meshgrid(xs, ys)
    for face in mesh.faces:
        if np.any(depth[face] <= NEAR):
            continue
        (ax, ay), (bx, by), (cx, cy) = screen[face]
        e0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        e1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        e2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        out |= ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    return out


def views_for(azimuths: Sequence[float], elevation=DEFAULT_ELEVATION, distance=DEFAULT_DISTANCE,
              image_size=64, viewing_angle=DEFAULT_VIEWING_ANGLE):
    return [ViewSpec(float(a), elevation, distance, image_size, viewing_angle) for a in azimuths]


def save_png(image, path) -> None:
    """Write an ``(H, W, C)`` float image in [0, 1] as 8-bit PNG (C in 1, 3, 4)."""
    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] in (1, 3, 4) and arr.shape[-1] not in (1, 3, 4):
        arr = arr.transpose(1, 2, 0)
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)
