"""Weak-perspective projection and hard rasterization of vertex attributes.

Image coordinates are normalised to [-1, 1]^2 with x to the right and y
downwards; pixel (i, j) has its centre at ((2j + 1)/W - 1, (2i + 1)/H - 1).
Larger camera-space z is nearer to the viewer, so a triangle is front
facing when its projected corners run counter-clockwise in (x, y).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Mesh, MorphableModel, ParamSet, decode, vertex_normals


@dataclass(frozen=True)
class ImageGrid:
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def x_centers(self) -> np.ndarray:
        return (2.0 * np.arange(self.width) + 1.0) / self.width - 1.0

    def y_centers(self) -> np.ndarray:
        return (2.0 * np.arange(self.height) + 1.0) / self.height - 1.0

    def pixel_centers(self) -> np.ndarray:
        """(H, W, 2) normalised (x, y) of every pixel centre: the identity field."""
        xs, ys = np.meshgrid(self.x_centers(), self.y_centers())
        return np.stack([xs, ys], axis=-1)

    def to_pixels(self, points: np.ndarray) -> np.ndarray:
        """Normalised (x, y) -> continuous (column, row) pixel coordinates."""
        points = np.asarray(points, dtype=np.float64)
        col = ((points[..., 0] + 1.0) * self.width - 1.0) / 2.0
        row = ((points[..., 1] + 1.0) * self.height - 1.0) / 2.0
        return np.stack([col, row], axis=-1)


@dataclass
class AttributeImage:
    data: np.ndarray  # (H, W, a)
    coverage: np.ndarray  # (H, W) in {0, 1}
    face_index: np.ndarray  # (H, W), -1 where nothing was drawn

    @property
    def attribute_dim(self) -> int:
        return self.data.shape[-1]


def project(vertices: np.ndarray, scale: float, translation) -> tuple[np.ndarray, np.ndarray]:
    """Weak perspective: ``p = s * (x, y) + t``; depth ``z`` is passed through."""
    vertices = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    return scale * vertices[..., :2] + t, vertices[..., 2].copy()


def project_jacobian(vertices: np.ndarray, scale: float) -> dict[str, np.ndarray]:
    """Analytic derivatives of :func:`project` per vertex.

    ``scale``: (n, 2), ``translation``: (2, 2), ``vertex``: (2, 3).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    d_vertex = np.zeros((2, 3))
    d_vertex[0, 0] = d_vertex[1, 1] = scale
    return {"scale": vertices[..., :2].copy(), "translation": np.eye(2), "vertex": d_vertex}


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize_screen(
    points: np.ndarray,
    depth: np.ndarray,
    faces: np.ndarray,
    attributes: np.ndarray,
    grid: ImageGrid,
    face_mask: np.ndarray | None = None,
    cull_backfaces: bool = True,
) -> AttributeImage:
    """Z-buffer rasterization of already projected vertices.

    A pixel centre is covered when all three edge functions are
    nonnegative. The nearest (largest depth) fragment wins; equal depths
    keep the lower face index. Attributes are interpolated as
    ``a0 + w1 (a1 - a0) + w2 (a2 - a0)`` so constant attributes stay exact.
    """
    attributes = np.asarray(attributes, dtype=np.float64)
    if attributes.ndim == 1:
        attributes = attributes[:, None]
    if attributes.shape[0] != len(points):
        raise ValueError(f"attributes have {attributes.shape[0]} rows for {len(points)} vertices")
    h, w = grid.shape
    adim = attributes.shape[1]
    zbuf = np.full((h, w), -np.inf)
    fbuf = np.full((h, w), -1, dtype=np.int64)
    w1buf = np.zeros((h, w))
    w2buf = np.zeros((h, w))
    xs, ys = grid.x_centers(), grid.y_centers()
    faces = np.asarray(faces, dtype=np.int64)
    active = np.ones(len(faces), dtype=bool) if face_mask is None else np.asarray(face_mask, dtype=bool)

    for f in np.flatnonzero(active):
        i0, i1, i2 = faces[f]
        x0, y0 = points[i0]
        x1, y1 = points[i1]
        x2, y2 = points[i2]
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0 or (cull_backfaces and area < 0) or not np.isfinite(area):
            continue
        # bounding box padded by one pixel; the edge test is authoritative
        cmin = int(np.floor(((min(x0, x1, x2) + 1.0) * w - 1.0) / 2.0)) - 1
        cmax = int(np.ceil(((max(x0, x1, x2) + 1.0) * w - 1.0) / 2.0)) + 1
        rmin = int(np.floor(((min(y0, y1, y2) + 1.0) * h - 1.0) / 2.0)) - 1
        rmax = int(np.ceil(((max(y0, y1, y2) + 1.0) * h - 1.0) / 2.0)) + 1
        cmin, rmin = max(cmin, 0), max(rmin, 0)
        cmax, rmax = min(cmax, w - 1), min(rmax, h - 1)
        if cmin > cmax or rmin > rmax:
            continue
        px = xs[None, cmin : cmax + 1]
        py = ys[rmin : rmax + 1, None]
        b0 = _edge(x1, y1, x2, y2, px, py) / area
        b1 = _edge(x2, y2, x0, y0, px, py) / area
        b2 = _edge(x0, y0, x1, y1, px, py) / area
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        if not inside.any():
            continue
        z0 = depth[i0]
        z = z0 + b1 * (depth[i1] - z0) + b2 * (depth[i2] - z0)
        window = (slice(rmin, rmax + 1), slice(cmin, cmax + 1))
        win = inside & (z > zbuf[window])
        zbuf[window] = np.where(win, z, zbuf[window])
        fbuf[window] = np.where(win, f, fbuf[window])
        w1buf[window] = np.where(win, b1, w1buf[window])
        w2buf[window] = np.where(win, b2, w2buf[window])

    data = np.zeros((h, w, adim))
    covered = fbuf >= 0
    if covered.any():
        tri = faces[fbuf[covered]]
        a0 = attributes[tri[:, 0]]
        b1 = w1buf[covered][:, None]
        b2 = w2buf[covered][:, None]
        data[covered] = a0 + b1 * (attributes[tri[:, 1]] - a0) + b2 * (attributes[tri[:, 2]] - a0)
    return AttributeImage(data, covered.astype(np.float64), fbuf)


def rasterize(
    mesh: Mesh,
    scale: float,
    translation,
    attributes: np.ndarray,
    grid: ImageGrid,
    face_mask: np.ndarray | None = None,
    cull_backfaces: bool = True,
) -> AttributeImage:
    """Render per-vertex ``attributes`` of ``mesh`` seen through camera (s, t)."""
    points, depth = project(mesh.vertices, scale, translation)
    return rasterize_screen(points, depth, mesh.faces, attributes, grid, face_mask, cull_backfaces)


def bilinear_sample(image: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinearly sample ``image`` (H, W, C) at normalised ``points`` (..., 2).

    Samples outside the image clamp to the border. Positions within 1e-9
    pixel of a pixel centre snap onto it so that resampling on the identity
    grid reproduces the image bit-exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot sample an empty image")
    pix = ImageGrid(h, w).to_pixels(points)
    col = np.clip(pix[..., 0], 0.0, w - 1.0)
    row = np.clip(pix[..., 1], 0.0, h - 1.0)
    col = np.where(np.abs(col - np.round(col)) < 1e-9, np.round(col), col)
    row = np.where(np.abs(row - np.round(row)) < 1e-9, np.round(row), row)
    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    fc = (col - c0)[..., None]
    fr = (row - r0)[..., None]
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    top = image[r0, c0] * (1.0 - fc) + image[r0, c1] * fc
    bottom = image[r1, c0] * (1.0 - fc) + image[r1, c1] * fc
    out = top * (1.0 - fr) + bottom * fr
    return out[..., 0] if squeeze else out


def sample_texture(image: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Per-point colours from ``image`` at normalised ``points`` (n, 2)."""
    return bilinear_sample(image, points)


def projected_vertices(model: MorphableModel, params: ParamSet) -> tuple[Mesh, np.ndarray]:
    mesh = decode(model, params)
    points, _ = project(mesh.vertices, params.camera_scale, params.camera_translation)
    return mesh, points


def render_reenactment(
    model: MorphableModel, source: ParamSet, driving: ParamSet, source_image: np.ndarray, grid: ImageGrid
) -> AttributeImage:
    """Source texture sampled at the projected source mesh, drawn on the driving mesh."""
    _, src_points = projected_vertices(model, source)
    texture = sample_texture(source_image, src_points)
    mesh = decode(model, driving)
    return rasterize(mesh, driving.camera_scale, driving.camera_translation, texture, grid, model.uv_face_mask)


def render_normal_map(
    model: MorphableModel, params: ParamSet, grid: ImageGrid, cull_backfaces: bool = True
) -> AttributeImage:
    """Vertex normals of the decoded mesh rendered under its own camera."""
    mesh = decode(model, params)
    normals = vertex_normals(mesh)
    return rasterize(
        mesh, params.camera_scale, params.camera_translation, normals, grid, model.uv_face_mask, cull_backfaces
    )


def render_3d_motion(
    model: MorphableModel, source: ParamSet, driving: ParamSet, grid: ImageGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Face motion field from driving to source.

    Per-vertex displacement ``Proj(M_S) - Proj(M_D)`` is rendered on the
    driving mesh and added to the pixel grid. Returns ``(field (H, W, 2),
    coverage (H, W))``; uncovered pixels hold the identity mapping.
    """
    _, src_points = projected_vertices(model, source)
    mesh, drv_points = projected_vertices(model, driving)
    displacement = src_points - drv_points
    img = rasterize(mesh, driving.camera_scale, driving.camera_translation, displacement, grid, model.uv_face_mask)
    field = grid.pixel_centers() + img.data
    return field, img.coverage
