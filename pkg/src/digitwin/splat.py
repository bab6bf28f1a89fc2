"""Software rasterizer for anisotropic 3D Gaussians.

The pixel convention follows OpenCV: pixel ``(u, v)`` has its centre at image
coordinates ``(u, v)``, the camera looks down ``+z`` with ``x`` right and
``y`` down. All arithmetic is float64. Rendering runs through torch so that
the corrector can differentiate the image with respect to splat means and
orientations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .math3d import quat_from_matrix, quat_identity, quat_normalize, quat_product, quat_to_matrix

TRUNCATION_SIGMA = 3.0
TAPER_SIGMA = 2.0
_CUT = TRUNCATION_SIGMA**2
_TAPER = TAPER_SIGMA**2


def truncated_kernel(maha):
    """Gaussian falloff ``exp(-m/2)`` cut at 3σ, with a smoothstep taper over the outer band.

    ``m`` is the squared Mahalanobis distance. Inside 2σ the value is the
    plain Gaussian; between 2σ and 3σ it is multiplied by
    ``1 - 3t² + 2t³`` with ``t`` running from 0 to 1 across the band, so value
    and slope reach zero at the cut. Continuity of the slope keeps photometric
    losses differentiable when a footprint boundary sweeps across a pixel.
    """
    g = torch.exp(-0.5 * maha)
    t = ((maha - _TAPER) / (_CUT - _TAPER)).clamp(0.0, 1.0)
    return torch.where(maha < _CUT, g * (1.0 - t * t * (3.0 - 2.0 * t)), torch.zeros_like(g))


class MissingAnchorError(KeyError):
    """A Gaussian refers to an anchor that has no transform."""


@dataclass
class Gaussian3D:
    """One splat. ``anchor`` indexes an anchor frame; ``offset``/``rel_q`` live in that frame."""

    mean: np.ndarray
    orientation: np.ndarray = field(default_factory=quat_identity)
    scale: np.ndarray = field(default_factory=lambda: np.full(3, 1e-3))
    opacity: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.ones(3))
    anchor: int = -1
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.orientation = quat_normalize(np.asarray(self.orientation, dtype=float).reshape(4))
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        self.offset = np.asarray(self.offset, dtype=float).reshape(3)
        _validate(self.scale[None], np.array([self.opacity]), self.color[None])


def _validate(scales, opacity, colors):
    problems = []
    if np.any(~(scales > 0)):
        problems.append("scales must be positive")
    if np.any(~((opacity > 0) & (opacity <= 1))):
        problems.append("opacity must lie in (0, 1]")
    if np.any(~((colors >= 0) & (colors <= 1))):
        problems.append("color components must lie in [0, 1]")
    if problems:
        raise ValueError("; ".join(problems))


@dataclass
class GaussianSet:
    """Struct-of-arrays collection of splats.

    Attributes
    ----------
    means, quats, scales, opacity, colors
        World-frame splat parameters, shapes ``(N, 3)``, ``(N, 4)``, ``(N, 3)``,
        ``(N,)`` and ``(N, 3)``.
    anchor : (N,) int
        Index of the anchor frame that carries each splat (``-1`` = none).
    offset, rel_q : (N, 3), (N, 4)
        Pose of each splat relative to its anchor frame.
    particle : (N,) int
        Entity-level index used to distribute correction forces.
    """

    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    anchor: np.ndarray | None = None
    offset: np.ndarray | None = None
    rel_q: np.ndarray | None = None
    particle: np.ndarray | None = None

    def __post_init__(self):
        n = len(np.asarray(self.means).reshape(-1, 3))
        self.means = np.asarray(self.means, dtype=float).reshape(n, 3)
        self.quats = quat_normalize(np.asarray(self.quats, dtype=float).reshape(n, 4)) if n else np.zeros((0, 4))
        self.scales = np.asarray(self.scales, dtype=float).reshape(n, 3)
        self.opacity = np.asarray(self.opacity, dtype=float).reshape(n)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        self.anchor = np.full(n, -1, np.int64) if self.anchor is None else np.asarray(self.anchor, np.int64).reshape(n)
        self.offset = np.zeros((n, 3)) if self.offset is None else np.asarray(self.offset, float).reshape(n, 3)
        self.rel_q = np.tile(quat_identity(), (n, 1)) if self.rel_q is None else np.asarray(self.rel_q,
                                                                                               float).reshape(n, 4)
        self.particle = self.anchor.copy() if self.particle is None else np.asarray(self.particle,
                                                                                  np.int64).reshape(n)
        _validate(self.scales, self.opacity, self.colors)

    def __len__(self):
        return len(self.means)

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_list(cls, gaussians) -> "GaussianSet":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            means=[g.mean for g in gaussians], quats=[g.orientation for g in gaussians],
            scales=[g.scale for g in gaussians], opacity=[g.opacity for g in gaussians],
            colors=[g.color for g in gaussians], anchor=[g.anchor for g in gaussians],
            offset=[g.offset for g in gaussians],
        )

    def to_list(self) -> list[Gaussian3D]:
        return [Gaussian3D(self.means[k], self.quats[k], self.scales[k], float(self.opacity[k]), self.colors[k],
                           int(self.anchor[k]), self.offset[k]) for k in range(len(self))]

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(self.means[idx], self.quats[idx], self.scales[idx], self.opacity[idx], self.colors[idx],
                           self.anchor[idx], self.offset[idx], self.rel_q[idx], self.particle[idx])

    def copy(self) -> "GaussianSet":
        # integer indexing copies; a slice would share memory
        return self.subset(np.arange(len(self)))

    @staticmethod
    def concatenate(sets) -> "GaussianSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return GaussianSet.empty()
        cat = lambda name: np.concatenate([getattr(s, name) for s in sets])  # noqa: E731
        return GaussianSet(cat("means"), cat("quats"), cat("scales"), cat("opacity"), cat("colors"), cat("anchor"),
                           cat("offset"), cat("rel_q"), cat("particle"))

    def place(self, anchor_pos, anchor_q) -> "GaussianSet":
        """Return a copy with every splat carried by its anchor frame.

        ``mean = p_a + R_a offset`` and ``q = q_a ⊗ rel_q``.
        """
        out = self.copy()
        if len(self) == 0:
            return out
        if np.any(self.anchor < 0):
            raise MissingAnchorError("every splat needs an anchor to be placed")
        pa = np.asarray(anchor_pos, float)[self.anchor]
        qa = np.asarray(anchor_q, float)[self.anchor]
        out.means = pa + np.einsum("nij,nj->ni", quat_to_matrix(qa), self.offset)
        out.quats = quat_normalize(quat_product(qa, self.rel_q))
        return out


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose ``x_c = R x_w + t``."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 10.0
    name: str = "cam"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        problems = []
        if not (self.fx > 0 and self.fy > 0):
            problems.append("focal lengths must be positive")
        if not self.near < self.far:
            problems.append("near must be smaller than far")
        if self.width < 1 or self.height < 1:
            problems.append("resolution must be positive")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), width=160, height=120, fov_y=np.deg2rad(50.0), **kw):
        """Camera at ``eye`` looking at ``target`` with a vertical field of view ``fov_y``."""
        eye = np.asarray(eye, float)
        fwd = np.asarray(target, float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        f = 0.5 * height / np.tan(0.5 * fov_y)
        return cls(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height, rotation=r,
                   translation=-r @ eye, **kw)

    def moved(self, rotation, translation) -> "Camera":
        """The same camera after the world is moved by ``x -> R x + t``."""
        rotation = np.asarray(rotation, float)
        new_r = self.rotation @ rotation.T
        new_t = self.translation - new_r @ np.asarray(translation, float)
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, new_r, new_t, self.near, self.far,
                      self.name)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass
class RenderedImage:
    """``rgb`` is ``(H, W, 3)`` in [0, 1]; ``alpha`` the accumulated opacity ``(H, W)``."""

    rgb: np.ndarray
    alpha: np.ndarray

    def to_ppm(self) -> bytes:
        return encode_ppm(self.rgb)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_ppm())


def encode_ppm(rgb) -> bytes:
    """Binary P6 pixmap: ``b"P6\\n<W> <H>\\n255\\n"`` then row-major RGB bytes."""
    rgb = np.asarray(rgb, dtype=float)
    h, w = rgb.shape[:2]
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + data.tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary P6 pixmap")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3).astype(float) / 255.0


# --- geometry ---------------------------------------------------------------------------


def covariance(quat, scale) -> np.ndarray:
    """``Σ = R S Sᵀ Rᵀ`` for one splat or a batch."""
    r = quat_to_matrix(quat)
    s2 = np.asarray(scale, float) ** 2
    return np.einsum("...ij,...j,...kj->...ik", r, s2, r)


def _t(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=torch.float64)


def quat_to_matrix_torch(q):
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    x, y, z, w = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], -1).reshape(q.shape[:-1] + (3, 3))


def _project_torch(means, quats, scales, cam: Camera):
    rc = _t(cam.rotation)
    pc = means @ rc.T + _t(cam.translation)
    x, y, z = pc.unbind(-1)
    r = rc @ quat_to_matrix_torch(quats)
    m = r * scales[:, None, :]
    cov_c = m @ m.transpose(1, 2)
    zs = torch.where(z > 0, z, torch.ones_like(z))
    jac = torch.zeros(len(z), 2, 3, dtype=torch.float64)
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / zs**2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / zs**2
    cov2 = jac @ cov_c @ jac.transpose(1, 2)
    uv = torch.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], -1)
    return uv, cov2, z


def project_gaussians(gaussians: GaussianSet, cam: Camera):
    """Project every splat.

    Returns
    -------
    uv : (N, 2) pixel-space means
    cov2 : (N, 2, 2) pixel-space covariances
    depth : (N,) camera-frame z
    visible : (N,) bool, False for culled splats
    """
    with torch.no_grad():
        uv, cov2, z = _project_torch(_t(gaussians.means), _t(gaussians.quats), _t(gaussians.scales), cam)
    uv, cov2, z = uv.numpy(), cov2.numpy(), z.numpy()
    return uv, cov2, z, _visible(uv, cov2, z, cam)


def project_gaussian(g: Gaussian3D, cam: Camera):
    """Single-splat projection; ``None`` when culled, else ``(uv, cov2, depth)``."""
    uv, cov2, z, vis = project_gaussians(GaussianSet.from_list([g]), cam)
    if not vis[0]:
        return None
    return uv[0], cov2[0], float(z[0])


def _visible(uv, cov2, z, cam: Camera):
    ext = TRUNCATION_SIGMA * np.sqrt(np.maximum(np.stack([cov2[:, 0, 0], cov2[:, 1, 1]], -1), 0.0))
    on_screen = ((uv[:, 0] + ext[:, 0] >= -0.5) & (uv[:, 0] - ext[:, 0] <= cam.width - 0.5)
                 & (uv[:, 1] + ext[:, 1] >= -0.5) & (uv[:, 1] - ext[:, 1] <= cam.height - 0.5))
    return (z >= cam.near) & (z <= cam.far) & on_screen & np.all(np.isfinite(uv), axis=1)


# --- rasterization ------------------------------------------------------------------------


def _pairs(uv, cov2, z, visible, cam: Camera, order_key=None):
    """Splat/pixel pairs inside the truncated footprint, sorted per pixel front to back.

    ``order_key`` replaces the depth ``z`` as the sort key when given.
    """
    idx = np.nonzero(visible)[0]
    if len(idx) == 0:
        return None
    ext = TRUNCATION_SIGMA * np.sqrt(np.stack([cov2[idx, 0, 0], cov2[idx, 1, 1]], -1))
    u0 = np.clip(np.ceil(uv[idx, 0] - ext[:, 0]), 0, cam.width - 1).astype(np.int64)
    u1 = np.clip(np.floor(uv[idx, 0] + ext[:, 0]), 0, cam.width - 1).astype(np.int64)
    v0 = np.clip(np.ceil(uv[idx, 1] - ext[:, 1]), 0, cam.height - 1).astype(np.int64)
    v1 = np.clip(np.floor(uv[idx, 1] + ext[:, 1]), 0, cam.height - 1).astype(np.int64)
    nu = np.maximum(u1 - u0 + 1, 0)
    nv = np.maximum(v1 - v0 + 1, 0)
    counts = nu * nv
    total = int(counts.sum())
    if total == 0:
        return None
    splat = np.repeat(idx, counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nu_r = np.repeat(nu, counts)
    pu = np.repeat(u0, counts) + local % nu_r
    pv = np.repeat(v0, counts) + local // nu_r
    d = np.stack([pu - uv[splat, 0], pv - uv[splat, 1]], -1)
    c = cov2[splat]
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] ** 2
    maha = (c[:, 1, 1] * d[:, 0] ** 2 - 2 * c[:, 0, 1] * d[:, 0] * d[:, 1] + c[:, 0, 0] * d[:, 1] ** 2) / det
    keep = maha < TRUNCATION_SIGMA**2
    splat, pix = splat[keep], (pv * cam.width + pu)[keep]
    if len(splat) == 0:
        return None
    key = z if order_key is None else order_key
    order = np.lexsort((splat, key[splat], pix))
    splat, pix = splat[order], pix[order]
    start = np.r_[0, np.nonzero(np.diff(pix))[0] + 1]
    seg = np.repeat(np.arange(len(start)), np.diff(np.r_[start, len(pix)]))
    rank = np.arange(len(pix)) - start[seg]
    return splat, pix[start], seg, rank


def camera_depth(means, cam: Camera) -> np.ndarray:
    """Camera-frame depth of each mean."""
    return np.asarray(means, float) @ np.asarray(cam.rotation)[2] + cam.translation[2]


def render_torch(means, quats, scales, opacity, colors, cam: Camera, background=(0.0, 0.0, 0.0),
                 order_key=None):
    """Differentiable render; returns ``(rgb (H, W, 3), alpha (H, W))`` torch tensors.

    Footprints are cut at 3σ with :func:`truncated_kernel`. Splats are
    composited by depth unless ``order_key`` (one value per splat, smaller
    is nearer) fixes the order; a fixed order keeps the image continuous in
    the means, since a depth swap of two overlapping splats is a jump.
    """
    h, w = cam.height, cam.width
    bg = _t(background).reshape(3)
    rgb = bg.expand(h * w, 3).clone()
    alpha_img = torch.zeros(h * w, dtype=torch.float64)
    if len(means) == 0:
        return rgb.reshape(h, w, 3), alpha_img.reshape(h, w)
    uv, cov2, z = _project_torch(means, quats, scales, cam)
    with torch.no_grad():
        vis = _visible(uv.numpy(), cov2.numpy(), z.numpy(), cam)
        pairs = _pairs(uv.numpy(), cov2.numpy(), z.numpy(), vis, cam,
                       None if order_key is None else np.asarray(order_key, float))
    if pairs is None:
        return rgb.reshape(h, w, 3), alpha_img.reshape(h, w)
    splat, pixels, seg, rank = pairs
    s = torch.as_tensor(splat)
    px = torch.as_tensor(pixels[seg] % w, dtype=torch.float64)
    py = torch.as_tensor(pixels[seg] // w, dtype=torch.float64)
    du = px - uv[s, 0]
    dv = py - uv[s, 1]
    c = cov2[s]
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] ** 2
    maha = (c[:, 1, 1] * du**2 - 2 * c[:, 0, 1] * du * dv + c[:, 0, 0] * dv**2) / det
    a = opacity[s] * truncated_kernel(maha)
    kmax = int(rank.max()) + 1
    npx = len(pixels)
    flat = torch.as_tensor(seg * kmax + rank)
    a_pad = torch.zeros(npx * kmax, dtype=torch.float64).index_put((flat,), a).reshape(npx, kmax)
    c_pad = torch.zeros(npx * kmax, 3, dtype=torch.float64).index_put((flat,), colors[s]).reshape(npx, kmax, 3)
    trans = torch.cumprod(1.0 - a_pad, dim=1)
    before = torch.cat([torch.ones(npx, 1, dtype=torch.float64), trans[:, :-1]], dim=1)
    weight = a_pad * before
    col = (weight[..., None] * c_pad).sum(1) + trans[:, -1:] * bg
    pix_t = torch.as_tensor(pixels)
    rgb = rgb.index_put((pix_t,), col)
    alpha_img = alpha_img.index_put((pix_t,), 1.0 - trans[:, -1])
    return rgb.reshape(h, w, 3), alpha_img.reshape(h, w)


def render(gaussians: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderedImage:
    """Front-to-back alpha compositing of depth-sorted splats (ties by splat index)."""
    with torch.no_grad():
        rgb, alpha = render_torch(_t(gaussians.means), _t(gaussians.quats), _t(gaussians.scales),
                                  _t(gaussians.opacity), _t(gaussians.colors), cam, background)
    return RenderedImage(rgb.numpy(), alpha.numpy())


def silhouette(gaussians: GaussianSet, cam: Camera, threshold: float = 0.5) -> np.ndarray:
    """Boolean mask of pixels whose accumulated opacity exceeds ``threshold``."""
    return render(gaussians, cam).alpha > threshold


def transform_gaussians(gaussians: GaussianSet, rotations, translations) -> GaussianSet:
    """Apply one rigid transform per anchor: ``μ ← R μ + t``, ``q ← q_T ⊗ q``.

    Parameters
    ----------
    rotations : mapping or array
        Per-anchor rotation, either ``(A, 3, 3)`` matrices or ``(A, 4)``
        quaternions, indexable by anchor id.
    translations : mapping or array
        Per-anchor translation ``(A, 3)``.
    """
    out = gaussians.copy()
    if len(out) == 0:
        return out
    if np.any(out.anchor < 0):
        raise MissingAnchorError("splat without anchor")
    try:
        rot = np.stack([np.asarray(rotations[a], float) for a in out.anchor])
        trans = np.stack([np.asarray(translations[a], float) for a in out.anchor])
    except (KeyError, IndexError) as exc:
        raise MissingAnchorError(f"no transform for anchor {exc}") from None
    if rot.shape[-1] == 4:
        q = quat_normalize(rot)
        mats = quat_to_matrix(q)
    else:
        mats = rot
        q = quat_from_matrix(mats)
    out.means = np.einsum("nij,nj->ni", mats, out.means) + trans
    out.quats = quat_normalize(quat_product(q, out.quats))
    return out
