"""View-dependent deterministic noise functions.

A noise function assigns each camera a noise image to mix into the
rendered view.  Three designs:

  constant    the same fixed tensor for every view (texture-sticking
              baseline: perfectly correlated across views)
  i.i.d.      fresh standard normal per call (the mode-seeking baseline;
              handled by callers drawing from their stream directly)
  world map   a fixed equirectangular noise panorama epsilon_p; each view
              reads the window centered at (col, row) =
              (W * phi/2pi, H * theta/pi) with toroidal wrap, composited
              over a fixed background noise epsilon_b by the foreground
              mask, then blended with fresh noise:

                  sqrt(beta) * ((1-M) eps_b + M window(eps_p))
                + sqrt(1-beta) * fresh

The map dimensions follow from the angular extent Theta of one patch:
H = round(H_patch * pi / Theta), W = round(W_patch * 2pi / Theta), so the
window slides one full patch width per Theta of camera azimuth.  Entries
are unit-variance i.i.d. normals and the sqrt-mixing keeps every query
marginally standard normal for any beta.

Wrap notes: azimuth is genuinely periodic; wrapping the polar axis is a
geometric fiction near the poles but is the simplest deterministic rule
that also covers Theta > pi (where the map is smaller than one patch).
Window centers are rounded to integer texels; interpolation would break
unit variance.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

DEFAULT_THETA_EXTENT = 0.5 * np.pi


@dataclass(frozen=True)
class Camera:
    """Orbit camera: looks at the origin, +z up.

    fov:   vertical field of view, radians in (0, pi)
    r_cam: distance from the origin, > 0
    theta: polar angle from +z in [0, pi]
    phi:   azimuth in [0, 2pi)
    """

    fov: float
    r_cam: float
    theta: float
    phi: float

    def __post_init__(self):
        if not (0.0 < self.fov < np.pi):
            raise ConfigurationError(f"fov={self.fov} outside (0, pi)")
        if self.r_cam <= 0.0:
            raise ConfigurationError("r_cam must be positive")
        if not (0.0 <= self.theta <= np.pi):
            raise ConfigurationError(f"theta={self.theta} outside [0, pi]")
        if not (0.0 <= self.phi < 2.0 * np.pi):
            raise ConfigurationError(f"phi={self.phi} outside [0, 2pi)")

    @property
    def position(self) -> np.ndarray:
        st, ct = np.sin(self.theta), np.cos(self.theta)
        return self.r_cam * np.array([st * np.cos(self.phi),
                                      st * np.sin(self.phi), ct])


@dataclass(frozen=True)
class CameraSampler:
    """Uniform orbit sampling: theta in [theta_lo, theta_hi], phi in [0, 2pi)."""

    fov: float = np.deg2rad(40.0)
    r_cam: float = 2.5
    theta_lo: float = np.deg2rad(60.0)
    theta_hi: float = np.deg2rad(120.0)

    def __call__(self, rng) -> Camera:
        theta = rng.uniform(low=self.theta_lo, high=self.theta_hi)
        phi = rng.uniform(low=0.0, high=2.0 * np.pi)
        return Camera(fov=self.fov, r_cam=self.r_cam, theta=theta, phi=phi)


class WorldMapNoise:
    """Fixed noise panorama plus fixed background noise.

    Build with ``WorldMapNoise.create(rng, ...)``; the map and background
    are drawn once and never change.
    """

    def __init__(self, eps_panorama, eps_background, theta_extent, beta):
        self.eps_panorama = np.asarray(eps_panorama, dtype=np.float64)
        self.eps_background = np.asarray(eps_background, dtype=np.float64)
        if self.eps_panorama.ndim != 3 or self.eps_background.ndim != 3:
            raise ConfigurationError("noise tensors must be (channels, H, W)")
        if self.eps_panorama.shape[0] != self.eps_background.shape[0]:
            raise ConfigurationError("panorama/background channel mismatch")
        if theta_extent <= 0.0:
            raise ConfigurationError("theta_extent must be positive")
        if not (0.0 <= beta <= 1.0):
            raise ConfigurationError("beta must lie in [0, 1]")
        self.theta_extent = float(theta_extent)
        self.beta = float(beta)

    @classmethod
    def create(cls, rng, channels=3, patch_hw=(8, 8),
               theta_extent=DEFAULT_THETA_EXTENT, beta=1.0) -> "WorldMapNoise":
        if theta_extent <= 0.0:
            raise ConfigurationError("theta_extent must be positive")
        h_patch, w_patch = patch_hw
        h_map = max(1, int(round(h_patch * np.pi / theta_extent)))
        w_map = max(1, int(round(w_patch * 2.0 * np.pi / theta_extent)))
        eps_b = rng.normal((channels, h_patch, w_patch))
        eps_p = rng.normal((channels, h_map, w_map))
        return cls(eps_p, eps_b, theta_extent, beta)

    @property
    def channels(self) -> int:
        return self.eps_panorama.shape[0]

    @property
    def map_hw(self):
        return self.eps_panorama.shape[1:]

    @property
    def patch_hw(self):
        return self.eps_background.shape[1:]


def window_indices(field: WorldMapNoise, camera: Camera):
    """Toroidally wrapped (rows, cols) of the patch window for a camera."""
    h_map, w_map = field.map_hw
    h_patch, w_patch = field.patch_hw
    row_c = int(round(h_map * camera.theta / np.pi))
    col_c = int(round(w_map * camera.phi / (2.0 * np.pi)))
    rows = (row_c - h_patch // 2 + np.arange(h_patch)) % h_map
    cols = (col_c - w_patch // 2 + np.arange(w_patch)) % w_map
    return rows, cols


def _check_mask(mask, patch_hw):
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape != (1,) + tuple(patch_hw):
        raise ConfigurationError(
            f"mask shape {mask.shape} does not match patch {patch_hw}"
        )
    return mask.astype(np.float64)


def world_map_query(field: WorldMapNoise, camera: Camera, mask, rng=None):
    """Noise image for one view: masked window over background, blended.

    Deterministic (a pure function of the field and camera) when beta=1;
    otherwise draws the fresh component from rng.
    """
    mask = _check_mask(mask, field.patch_hw)
    rows, cols = window_indices(field, camera)
    window = field.eps_panorama[:, rows[:, None], cols[None, :]]
    deterministic = (1.0 - mask) * field.eps_background + mask * window
    if field.beta == 1.0:
        return deterministic
    if rng is None:
        raise ConfigurationError("beta < 1 requires a random stream")
    fresh = rng.normal(deterministic.shape)
    return np.sqrt(field.beta) * deterministic + np.sqrt(1.0 - field.beta) * fresh


def constant_noise_query(eps_fixed, camera: Camera, mask=None, rng=None):
    """The vanilla design: the same noise for every view."""
    return np.asarray(eps_fixed, dtype=np.float64)


def r_plus(camera: Camera, theta_extent: float):
    """Radii of the 3D points whose projections track the window motion.

    Between nearby views, a point at radius r on the optical axis moves in
    the image while the noise window slides across the map; the two
    displacements cancel at

        r_plus = 2 tan(fov/2) / (2 tan(fov/2) + Theta) * r_cam

    for polar motion, and with Theta * sin(theta) for azimuthal motion.
    Returns (r_theta, r_phi).
    """
    if theta_extent <= 0.0:
        raise ConfigurationError("theta_extent must be positive")
    g = 2.0 * np.tan(0.5 * camera.fov)
    r_theta = g / (g + theta_extent) * camera.r_cam
    r_phi = g / (g + theta_extent * np.sin(camera.theta)) * camera.r_cam
    return float(r_theta), float(r_phi)


def overlap_alignment_probe(field: WorldMapNoise, camera_a: Camera,
                            camera_b: Camera):
    """How much two views' noise windows share, exactly and empirically.

    Returns (overlap_fraction, rho).  overlap_fraction counts shared map
    texels by index arithmetic.  rho is the shared-texel covariance of the
    two window contents normalized by full window size and the windows'
    standard deviations, so identical windows give exactly 1, disjoint
    windows exactly 0, and a half-overlapping pair about 0.5.
    """
    rows_a, cols_a = window_indices(field, camera_a)
    rows_b, cols_b = window_indices(field, camera_b)
    h_patch, w_patch = field.patch_hw

    pos_a = (rows_a[:, None] * field.map_hw[1] + cols_a[None, :]).ravel()
    pos_b = (rows_b[:, None] * field.map_hw[1] + cols_b[None, :]).ravel()
    shared = np.intersect1d(pos_a, pos_b)
    # fraction of a's cells whose map texel is also visible to b; robust
    # to duplicated texels when the map is smaller than one patch
    overlap = float(np.isin(pos_a, pos_b).mean())

    win_a = field.eps_panorama[:, rows_a[:, None], cols_a[None, :]]
    win_b = field.eps_panorama[:, rows_b[:, None], cols_b[None, :]]
    if shared.size == 0:
        return overlap, 0.0
    r_idx, c_idx = np.divmod(shared, field.map_hw[1])
    vals = field.eps_panorama[:, r_idx, c_idx]
    mean_a, std_a = win_a.mean(), win_a.std()
    mean_b, std_b = win_b.mean(), win_b.std()
    cov = np.sum((vals - mean_a) * (vals - mean_b))
    rho = cov / (win_a.size * std_a * std_b)
    return overlap, float(rho)


def window_match_radius(camera: Camera, theta_extent: float, patch_hw,
                        axis: str = "phi", delta_angle: float = 0.01) -> float:
    """Radius where a point's image motion equals the window motion.

    Independent geometric construction of the quantity predicted by
    ``r_plus``: place a point at radius r on the optical axis, move the
    camera by delta_angle along the given axis, and measure the point's
    pixel displacement with the renderer's projection; the window slides
    at the map's continuous rate (W/2pi per radian of azimuth, H/pi per
    radian of polar angle).  Bisects for the radius where the two
    displacements agree.
    """
    from .scene import project_to_pixel  # lazy: scene depends on this module

    h_patch, w_patch = patch_hw
    h_map = h_patch * np.pi / theta_extent
    w_map = w_patch * 2.0 * np.pi / theta_extent
    if axis == "phi":
        cam_b = Camera(camera.fov, camera.r_cam, camera.theta,
                       (camera.phi + delta_angle) % (2.0 * np.pi))
        window_shift = w_map * delta_angle / (2.0 * np.pi)
    elif axis == "theta":
        cam_b = Camera(camera.fov, camera.r_cam, camera.theta + delta_angle,
                       camera.phi)
        window_shift = h_map * delta_angle / np.pi
    else:
        raise ConfigurationError(f"axis must be 'phi' or 'theta', got {axis!r}")

    direction = camera.position / camera.r_cam
    image_hw = (h_patch, w_patch)

    def pixel_shift(r: float) -> float:
        point = r * direction
        row_a, col_a = project_to_pixel(camera, point, image_hw)
        row_b, col_b = project_to_pixel(cam_b, point, image_hw)
        return float(np.hypot(row_b - row_a, col_b - col_a))

    lo, hi = 1e-9, camera.r_cam * (1.0 - 1e-6)
    if pixel_shift(hi) < window_shift:
        raise DomainError("window motion exceeds any on-axis point's motion")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pixel_shift(mid) < window_shift:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def marginal_stats_probe(field: WorldMapNoise, camera_sampler, n_views: int,
                         rng, mask=None):
    """Per-pixel statistics of queries over randomly sampled views.

    Uses an all-ones mask by default (pure window path; the background is
    unit normal too, so the bounds are mask-independent).  Returns a dict
    with per-pixel mean/variance arrays, their extremes, and the mean
    within-query correlation of horizontally/vertically adjacent pixels.
    """
    if n_views < 100:
        raise DomainError("n_views must be >= 100 for meaningful statistics")
    if mask is None:
        mask = np.ones((1,) + tuple(field.patch_hw))
    queries = np.empty((n_views, field.channels) + tuple(field.patch_hw))
    for i in range(n_views):
        cam = camera_sampler(rng)
        queries[i] = world_map_query(field, cam, mask, rng)

    mean = queries.mean(axis=0)
    var = queries.var(axis=0)

    def _mean_adjacent_corr(a, b):
        # a, b: (n_views, channels, n_pairs) paired pixel series
        am = a - a.mean(axis=0)
        bm = b - b.mean(axis=0)
        cov = (am * bm).mean(axis=0)
        denom = a.std(axis=0) * b.std(axis=0)
        return float(np.mean(cov / denom))

    horiz = _mean_adjacent_corr(queries[..., :, :-1].reshape(n_views, -1),
                                queries[..., :, 1:].reshape(n_views, -1))
    vert = _mean_adjacent_corr(queries[..., :-1, :].reshape(n_views, -1),
                               queries[..., 1:, :].reshape(n_views, -1))
    return {
        "per_pixel_mean": mean,
        "per_pixel_var": var,
        "max_abs_mean": float(np.max(np.abs(mean))),
        "var_min": float(var.min()),
        "var_max": float(var.max()),
        "adjacent_corr_horizontal": horiz,
        "adjacent_corr_vertical": vert,
    }
