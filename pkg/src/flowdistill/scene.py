"""Differentiable density/color voxel grid with a pinhole renderer.

The scene is an n^3 grid over the cube [-1, 1]^3.  Densities are stored
as softplus pre-activations and colors as sigmoid pre-activations, so any
unconstrained parameter update keeps density >= 0 and color in [0, 1].

Rendering casts one pinhole ray per pixel, takes ``samples_per_ray``
uniformly spaced points across the ray's cube intersection, trilinearly
interpolates density sigma and color, and composites front to back:

    tau_j   = sigma_j * delta            (delta = segment / samples)
    a_j     = 1 - exp(-tau_j)
    T_j     = exp(-sum_{k<j} tau_k)
    image   = sum_j T_j a_j color_j + T_final * background
    opacity = 1 - T_final

``render_vjp`` is the exact hand-written adjoint of this computation with
respect to both pre-activation grids (gradients flow through the image
only; opacity and the derived mask are treated as non-differentiable
gates, matching how the distillation loop uses them).  Written in terms
of tau the adjoint is division-free:

    dL/dtau_j = <r, T_{j+1} color_j - S_j>,
    S_j = sum_{m>j} T_m a_m color_m + T_final * background.

Shapes: images are (3, H, W) channels-first; rays are flattened row-major.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .noise_field import Camera

_TAU_MAX = 500.0  # exp(-tau) stays a normal double; gradient zero beyond


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class VoxelScene:
    """Cubic voxel grid: density_pre (n,n,n), color_pre (3,n,n,n)."""

    def __init__(self, density_pre, color_pre, background=(0.5, 0.5, 0.5)):
        self.density_pre = np.asarray(density_pre, dtype=np.float64)
        self.color_pre = np.asarray(color_pre, dtype=np.float64)
        self.background = np.asarray(background, dtype=np.float64)
        n = self.density_pre.shape[0]
        if self.density_pre.shape != (n, n, n):
            raise ConfigurationError("density_pre must be cubic (n,n,n)")
        if self.color_pre.shape != (3, n, n, n):
            raise ConfigurationError("color_pre must be (3,n,n,n)")
        if self.background.shape != (3,):
            raise ConfigurationError("background must be an RGB triple")

    @classmethod
    def uniform(cls, resolution: int, density_pre: float = -2.0,
                color_pre: float = 0.0,
                background=(0.5, 0.5, 0.5)) -> "VoxelScene":
        n = int(resolution)
        return cls(np.full((n, n, n), float(density_pre)),
                   np.full((3, n, n, n), float(color_pre)), background)

    @property
    def resolution(self) -> int:
        return self.density_pre.shape[0]

    @property
    def densities(self):
        return _softplus(self.density_pre)

    @property
    def colors(self):
        return _sigmoid(self.color_pre)

    def params(self) -> np.ndarray:
        return np.concatenate([self.density_pre.ravel(),
                               self.color_pre.ravel()])

    def set_params(self, vec):
        n3 = self.density_pre.size
        vec = np.asarray(vec, dtype=np.float64)
        self.density_pre = vec[:n3].reshape(self.density_pre.shape).copy()
        self.color_pre = vec[n3:].reshape(self.color_pre.shape).copy()

    def copy(self) -> "VoxelScene":
        return VoxelScene(self.density_pre.copy(), self.color_pre.copy(),
                          self.background.copy())

    def save(self, path_prefix: str):
        """Raw little-endian float32 blob plus a JSON shape descriptor."""
        blob = self.params().astype("<f4")
        blob.tofile(path_prefix + ".f32")
        desc = {
            "resolution": self.resolution,
            "extent": 1.0,
            "background": [float(v) for v in self.background],
            "layout": "density_pre:n^3,color_pre:3n^3",
            "dtype": "<f4",
        }
        with open(path_prefix + ".json", "w") as fh:
            json.dump(desc, fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path_prefix: str) -> "VoxelScene":
        with open(path_prefix + ".json") as fh:
            desc = json.load(fh)
        n = int(desc["resolution"])
        blob = np.fromfile(path_prefix + ".f32", dtype="<f4").astype(np.float64)
        scene = cls.uniform(n, background=desc["background"])
        scene.set_params(blob)
        return scene


@dataclass
class RenderOutput:
    image: np.ndarray     # (3, H, W) in [0, 1]
    opacity: np.ndarray   # (1, H, W) in [0, 1]
    mask: np.ndarray      # (1, H, W) float 0/1, opacity > threshold
    alpha_threshold: float


@dataclass
class VoxelGrad:
    density_pre: np.ndarray
    color_pre: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.density_pre.ravel(),
                               self.color_pre.ravel()])


def camera_rays(camera: Camera, image_hw):
    """Pinhole rays through pixel centers: (origin (3,), dirs (H*W, 3))."""
    h, w = image_hw
    origin = camera.position
    fwd = -origin / np.linalg.norm(origin)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-12:
        raise ConfigurationError("camera looks along +z; pick theta away from poles")
    right /= nrm
    true_up = np.cross(right, fwd)

    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    ndc_x = (jj + 0.5) / w * 2.0 - 1.0
    ndc_y = 1.0 - (ii + 0.5) / h * 2.0
    th = np.tan(0.5 * camera.fov)
    aspect = w / h
    dirs = (fwd[None, None, :]
            + ndc_x[..., None] * th * aspect * right[None, None, :]
            + ndc_y[..., None] * th * true_up[None, None, :])
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return origin, dirs.reshape(-1, 3)


def project_to_pixel(camera: Camera, point, image_hw):
    """Continuous (row, col) pixel coordinates of a world point.

    Exact inverse of camera_rays' pixel-to-direction map; used by the
    window-alignment geometry checks.
    """
    h, w = image_hw
    origin = camera.position
    fwd = -origin / np.linalg.norm(origin)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    v = np.asarray(point, dtype=np.float64) - origin
    depth = v @ fwd
    if depth <= 0:
        raise ConfigurationError("point is behind the camera")
    th = np.tan(0.5 * camera.fov)
    aspect = w / h
    ndc_x = (v @ right) / (depth * th * aspect)
    ndc_y = (v @ true_up) / (depth * th)
    col = (ndc_x + 1.0) * w / 2.0 - 0.5
    row = (1.0 - ndc_y) * h / 2.0 - 0.5
    return float(row), float(col)


def _ray_cube_span(origin, dirs):
    """Entry/exit distances of each ray with the cube [-1,1]^3 (0,0 if miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-1.0 - origin[None, :]) / dirs
        t2 = (1.0 - origin[None, :]) / dirs
    near = np.max(np.minimum(t1, t2), axis=1)
    far = np.min(np.maximum(t1, t2), axis=1)
    near = np.maximum(near, 0.0)
    hit = far > near
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 0.0)
    return near, far


def _trilinear_setup(points, n):
    """Corner indices (P, 8) per axis and weights (P, 8) for grid lookups."""
    g = (points + 1.0) * 0.5 * (n - 1)
    g = np.clip(g, 0.0, n - 1 - 1e-9)
    i0 = np.floor(g).astype(np.intp)
    f = g - i0
    i1 = np.minimum(i0 + 1, n - 1)
    corners = []
    weights = []
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                iz = i1[:, 2] if dz else i0[:, 2]
                corners.append((ix, iy, iz))
                weights.append(wx * wy * wz)
    return corners, np.stack(weights, axis=1)


def _forward(scene: VoxelScene, camera: Camera, samples_per_ray: int,
             image_hw):
    if samples_per_ray < 8:
        raise ConfigurationError("samples_per_ray must be >= 8")
    if np.max(np.abs(camera.position)) <= 1.0:
        raise ConfigurationError("camera must sit outside the scene cube")
    h, w = image_hw
    origin, dirs = camera_rays(camera, image_hw)
    near, far = _ray_cube_span(origin, dirs)
    n_rays = dirs.shape[0]
    s = samples_per_ray
    delta = (far - near) / s                                  # (R,)
    t_mid = near[:, None] + (np.arange(s) + 0.5) * delta[:, None]
    points = origin[None, None, :] + t_mid[..., None] * dirs[:, None, :]
    corners, tri_w = _trilinear_setup(points.reshape(-1, 3), scene.resolution)

    dens_act = _softplus(scene.density_pre)
    col_act = _sigmoid(scene.color_pre)
    sigma = np.zeros(n_rays * s)
    color = np.zeros((3, n_rays * s))
    for c, (ix, iy, iz) in enumerate(corners):
        wgt = tri_w[:, c]
        sigma += wgt * dens_act[ix, iy, iz]
        color += wgt * col_act[:, ix, iy, iz]
    sigma = sigma.reshape(n_rays, s)
    color = color.reshape(3, n_rays, s)

    tau = np.clip(sigma * delta[:, None], 0.0, _TAU_MAX)
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))          # T_j, exclusive
    trans_next = np.exp(-cum)             # T_{j+1}
    a = -np.expm1(-tau)
    weights = trans * a                   # (R, S)
    t_final = np.exp(-cum[:, -1])

    image = np.einsum("rs,crs->cr", weights, color)
    image += t_final[None, :] * scene.background[:, None]
    opacity = 1.0 - t_final
    cache = {
        "corners": corners, "tri_w": tri_w, "delta": delta, "tau": tau,
        "sigma": sigma, "color": color, "weights": weights,
        "trans_next": trans_next, "t_final": t_final,
        "dens_act": dens_act, "col_act": col_act, "n_rays": n_rays, "s": s,
    }
    return image.reshape(3, h, w), opacity.reshape(h, w), cache


def render(scene: VoxelScene, camera: Camera, samples_per_ray: int,
           image_hw=(8, 8), alpha_threshold: float = 0.5) -> RenderOutput:
    image, opacity, _ = _forward(scene, camera, samples_per_ray, image_hw)
    mask = (opacity > alpha_threshold).astype(np.float64)
    return RenderOutput(image=image, opacity=opacity[None],
                        mask=mask[None], alpha_threshold=alpha_threshold)


def render_vjp(scene: VoxelScene, camera: Camera, samples_per_ray: int,
               residual, image_hw=(8, 8)) -> VoxelGrad:
    """Adjoint of render()'s image against ``residual`` (shape (3, H, W))."""
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (3,) + tuple(image_hw):
        raise ConfigurationError(
            f"residual shape {residual.shape} != (3, {image_hw[0]}, {image_hw[1]})"
        )
    _, _, cache = _forward(scene, camera, samples_per_ray, image_hw)
    n_rays, s = cache["n_rays"], cache["s"]
    r = residual.reshape(3, n_rays)

    color = cache["color"]            # (3, R, S)
    weights = cache["weights"]        # (R, S)
    trans_next = cache["trans_next"]  # (R, S)
    t_final = cache["t_final"]        # (R,)

    # dL/dcolor_j = T_j a_j r  (per channel)
    grad_color_pts = weights[None] * r[:, :, None]            # (3, R, S)

    # S_j = sum_{m>j} T_m a_m c_m + T_final bg  (per channel)
    u = weights[None] * color                                  # (3, R, S)
    suffix_incl = np.cumsum(u[..., ::-1], axis=-1)[..., ::-1]  # sum_{m>=j}
    suffix = suffix_incl - u + (t_final[None, :, None]
                                * scene.background[:, None, None])
    grad_tau = np.einsum("cr,crs->rs", r, trans_next[None] * color - suffix)

    clipped = cache["sigma"] * cache["delta"][:, None] > _TAU_MAX
    grad_sigma_pts = np.where(clipped, 0.0, grad_tau * cache["delta"][:, None])

    # scatter through trilinear weights and activation derivatives
    n = scene.resolution
    grad_dens_act = np.zeros((n, n, n))
    grad_col_act = np.zeros((3, n, n, n))
    gs = grad_sigma_pts.reshape(-1)
    gc = grad_color_pts.reshape(3, -1)
    for c, (ix, iy, iz) in enumerate(cache["corners"]):
        wgt = cache["tri_w"][:, c]
        np.add.at(grad_dens_act, (ix, iy, iz), wgt * gs)
        for ch in range(3):
            np.add.at(grad_col_act[ch], (ix, iy, iz), wgt * gc[ch])

    grad_density_pre = grad_dens_act * _sigmoid(scene.density_pre)
    col = cache["col_act"]
    grad_color_pre = grad_col_act * col * (1.0 - col)
    return VoxelGrad(density_pre=grad_density_pre, color_pre=grad_color_pre)
