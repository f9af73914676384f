"""Rotation + translation image warping with bilinear interpolation and zero fill.

The warp is defined by inverse sampling: the output pixel at centered
coordinate (u', v') pulls from the source coordinate

    R(-theta) @ ((u', v') - (du, dv))

so positive ``du``/``dv`` move image content toward +columns/+rows and
positive ``theta`` rotates content counter-clockwise in the (u, v) frame.
The image center is ((w-1)/2, (h-1)/2), i.e. between pixels for even sizes.
Sample points outside the raster contribute zero intensity. Angles are in
degrees everywhere; trig is evaluated with degree-exact routines so that
multiples of 90 land exactly on integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import cosdg, sindg

from .validation import as_image, check_finite_scalar

__all__ = [
    "TransformParams",
    "AttackSpace",
    "apply_transform",
    "warp_batch",
    "transform_vjp",
    "black_canvas_pad",
]


@dataclass(frozen=True)
class TransformParams:
    """A point in the attack's latent space.

    du, dv are translations in pixels (columns, rows); theta is a
    counter-clockwise rotation in degrees about the image center.
    """

    du: float = 0.0
    dv: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        for name in ("du", "dv", "theta"):
            check_finite_scalar(getattr(self, name), name)

    def as_array(self) -> np.ndarray:
        return np.array([self.du, self.dv, self.theta], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "TransformParams":
        a = np.asarray(a, dtype=np.float64)
        return TransformParams(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class AttackSpace:
    """Admissible box of (du, dv, theta) plus its grid discretization.

    Grid values are equally spaced over [-max, +max] per axis; grid counts
    must be odd so the identity transform is always a grid point.
    """

    max_trans: float = 3.0
    max_rot: float = 30.0
    trans_grid_points: int = 5
    rot_grid_points: int = 31

    def __post_init__(self):
        if not (math.isfinite(self.max_trans) and self.max_trans >= 0):
            raise ValueError(f"max_trans must be finite and >= 0, got {self.max_trans}")
        if not (math.isfinite(self.max_rot) and self.max_rot >= 0):
            raise ValueError(f"max_rot must be finite and >= 0, got {self.max_rot}")
        for name in ("trans_grid_points", "rot_grid_points"):
            n = getattr(self, name)
            if n < 1 or n % 2 == 0:
                raise ValueError(f"{name} must be an odd count >= 1, got {n}")

    @property
    def grid_size(self) -> int:
        return self.rot_grid_points * self.trans_grid_points ** 2

    def trans_values(self) -> np.ndarray:
        return np.linspace(-self.max_trans, self.max_trans, self.trans_grid_points)

    def rot_values(self) -> np.ndarray:
        return np.linspace(-self.max_rot, self.max_rot, self.rot_grid_points)

    def grid_params(self) -> np.ndarray:
        """All grid points as an (n, 3) array of (du, dv, theta).

        Scan order is rotation-major: theta varies slowest, then dv, then du.
        """
        th, dv, du = np.meshgrid(
            self.rot_values(), self.trans_values(), self.trans_values(), indexing="ij"
        )
        return np.stack([du.ravel(), dv.ravel(), th.ravel()], axis=1)

    def sample_uniform(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """n independent uniform draws from the continuous box, shape (n, 3)."""
        lo = [-self.max_trans, -self.max_trans, -self.max_rot]
        hi = [self.max_trans, self.max_trans, self.max_rot]
        return rng.uniform(lo, hi, size=(n, 3))

    def contains(self, params: TransformParams, atol: float = 1e-9) -> bool:
        return (
            abs(params.du) <= self.max_trans + atol
            and abs(params.dv) <= self.max_trans + atol
            and abs(params.theta) <= self.max_rot + atol
        )

    def translation_only(self) -> "AttackSpace":
        return AttackSpace(self.max_trans, 0.0, self.trans_grid_points, 1)

    def rotation_only(self) -> "AttackSpace":
        return AttackSpace(0.0, self.max_rot, 1, self.rot_grid_points)


def _as_params_array(params) -> np.ndarray:
    if isinstance(params, TransformParams):
        return params.as_array()[None, :]
    a = np.asarray(params, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"params must have shape (3,) or (n, 3), got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("transform parameters must be finite")
    return a


def _source_grids(h: int, w: int, params: np.ndarray):
    """Source sample coordinates for each output pixel.

    Returns (xs, ys) of shape (n, h, w) in pixel index units plus the
    centered source coordinates (us, vs) used by the rotation derivative.
    """
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    up = np.arange(w, dtype=np.float64) - cx          # u' per output column
    vp = np.arange(h, dtype=np.float64) - cy          # v' per output row
    du = params[:, 0][:, None, None]
    dv = params[:, 1][:, None, None]
    c = cosdg(params[:, 2])[:, None, None]
    s = sindg(params[:, 2])[:, None, None]
    a = up[None, None, :] - du                        # u' - du
    b = vp[None, :, None] - dv                        # v' - dv
    us = c * a + s * b
    vs = -s * a + c * b
    return us + cx, vs + cy, us, vs


def _gather(images: np.ndarray, bidx, yi, xi, valid):
    """Zero-filled gather of images[b, :, yi, xi]; returns (n, c, h, w) float64."""
    h, w = images.shape[2], images.shape[3]
    yc = np.clip(yi, 0, h - 1)
    xc = np.clip(xi, 0, w - 1)
    vals = images[bidx, :, yc, xc]                    # (n, h, w, c)
    vals = np.moveaxis(vals, -1, 1).astype(np.float64, copy=False)
    return vals * valid[:, None, :, :]


def warp_batch(images: np.ndarray, params) -> np.ndarray:
    """Warp a batch of images, one parameter triple per output.

    images: (c, h, w) or (b, c, h, w); a single image is broadcast across
    all parameter rows. params: (n, 3) array, TransformParams, or (3,).
    Returns (n, c, h, w) in the input dtype.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4:
        raise ValueError(f"images must be (c,h,w) or (b,c,h,w), got {images.shape}")
    if not np.isfinite(images).all():
        raise ValueError("image values must be finite")
    p = _as_params_array(params)
    n = p.shape[0]
    if images.shape[0] == 1:
        bidx = np.zeros((n, 1, 1), dtype=np.intp)
    elif images.shape[0] == n:
        bidx = np.arange(n, dtype=np.intp)[:, None, None]
    else:
        raise ValueError(
            f"batch mismatch: {images.shape[0]} images vs {n} parameter rows"
        )
    h, w = images.shape[2], images.shape[3]
    xs, ys, _, _ = _source_grids(h, w, p)

    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros((n, images.shape[1], h, w), dtype=np.float64)
    for iy, wy in ((0, 1.0 - fy), (1, fy)):
        for ix, wx in ((0, 1.0 - fx), (1, fx)):
            yi = y0 + iy
            xi = x0 + ix
            valid = ((yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)).astype(np.float64)
            out += (wy * wx)[:, None, :, :] * _gather(images, bidx, yi, xi, valid)
    return out.astype(images.dtype, copy=False)


def apply_transform(image: np.ndarray, params: TransformParams) -> np.ndarray:
    """Warp one (c, h, w) image by (du, dv, theta). See module docstring."""
    image = as_image(image)
    return warp_batch(image, params)[0]


def transform_vjp(image: np.ndarray, params: TransformParams, upstream: np.ndarray):
    """Vector-Jacobian product of apply_transform.

    Contracts ``upstream`` (same shape as the output) with the Jacobian of
    the warp, returning (grad_du, grad_dv, grad_theta, grad_image).
    grad_theta is per *degree*. At integer sample coordinates the bilinear
    kink takes its right-limit derivative.
    """
    image = as_image(image)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != image.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match image {image.shape}"
        )
    if not np.isfinite(upstream).all():
        raise ValueError("upstream values must be finite")
    p = _as_params_array(params)
    img = image[None].astype(np.float64, copy=False)
    c_ch, h, w = image.shape
    xs, ys, us, vs = _source_grids(h, w, p)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    bidx = np.zeros((1, 1, 1), dtype=np.intp)

    taps = {}
    for iy in (0, 1):
        for ix in (0, 1):
            yi = y0 + iy
            xi = x0 + ix
            valid = ((yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)).astype(np.float64)
            taps[iy, ix] = _gather(img, bidx, yi, xi, valid)

    # d(output)/d(sample coordinate), zero-fill aware
    gx = (1.0 - fy)[:, None] * (taps[0, 1] - taps[0, 0]) + fy[:, None] * (
        taps[1, 1] - taps[1, 0]
    )
    gy = (1.0 - fx)[:, None] * (taps[1, 0] - taps[0, 0]) + fx[:, None] * (
        taps[1, 1] - taps[0, 1]
    )
    up = upstream[None]
    sx = float(np.sum(up * gx))
    sy = float(np.sum(up * gy))
    # rotation moves each sample point along (vs, -us); per-pixel contraction
    sx_r = float(np.sum(np.sum(up * gx, axis=1) * vs))
    sy_r = float(np.sum(np.sum(up * gy, axis=1) * (-us)))

    c = float(cosdg(p[0, 2]))
    s = float(sindg(p[0, 2]))
    grad_du = -c * sx + s * sy
    grad_dv = -s * sx - c * sy
    grad_theta = (math.pi / 180.0) * (sx_r + sy_r)

    # scatter upstream mass back through the bilinear weights
    grad_image = np.zeros((c_ch, h, w), dtype=np.float64)
    for iy, wy in ((0, 1.0 - fy), (1, fy)):
        for ix, wx in ((0, 1.0 - fx), (1, fx)):
            yi = (y0 + iy)[0]
            xi = (x0 + ix)[0]
            inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            wgt = (wy * wx)[0] * inside
            contrib = upstream * wgt[None, :, :]
            yc = np.clip(yi, 0, h - 1).ravel()
            xc = np.clip(xi, 0, w - 1).ravel()
            for ch in range(c_ch):
                np.add.at(grad_image[ch], (yc, xc), contrib[ch].ravel() * inside.ravel())
    return grad_du, grad_dv, grad_theta, grad_image


def black_canvas_pad(image: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad an image symmetrically by ``pad`` pixels on every side.

    With pad >= ceil((sqrt(2)-1)/2 * max(h, w)) + max_trans, no warp inside
    the attack space moves any original pixel mass off the canvas.
    """
    image = as_image(image)
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return image
    return np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="constant")


def sufficient_pad(height: int, width: int, max_trans: float) -> int:
    """Smallest padding guaranteeing zero mass loss over the attack box."""
    return math.ceil((math.sqrt(2.0) - 1.0) / 2.0 * max(height, width)) + math.ceil(max_trans)
