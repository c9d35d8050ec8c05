"""Binary PPM (P6) rendering of densities and sample clouds, 512x512."""

from __future__ import annotations

import numpy as np

from .gmm import IsotropicGmm, gmm_logpdf

# Anchor stops of a viridis-like map, interpolated linearly in RGB.
_STOPS = np.array(
    [
        [68, 1, 84],
        [71, 44, 122],
        [59, 81, 139],
        [44, 113, 142],
        [33, 144, 141],
        [39, 173, 129],
        [92, 200, 99],
        [170, 220, 50],
        [253, 231, 37],
    ],
    dtype=np.float64,
)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB uint8 via the fixed anchor table."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pos = v * (len(_STOPS) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_STOPS) - 1)
    frac = (pos - lo)[..., None]
    rgb = _STOPS[lo] * (1.0 - frac) + _STOPS[hi] * frac
    return rgb.astype(np.uint8)


def write_ppm(path: str, rgb: np.ndarray, comment: str = "") -> None:
    """Write an (H, W, 3) uint8 image as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        header = f"P6\n"
        if comment:
            header += f"# {comment}\n"
        header += f"{w} {h}\n255\n"
        f.write(header.encode("ascii"))
        f.write(rgb.tobytes())


def _pixel_centers(lo: float, hi: float, res: int) -> np.ndarray:
    e = np.linspace(lo, hi, res + 1)
    return 0.5 * (e[:-1] + e[1:])


def density_image(
    g: IsotropicGmm, lo: float = -4.0, hi: float = 4.0, res: int = 512
) -> np.ndarray:
    """Heatmap of the mixture density, max-normalized."""
    c = _pixel_centers(lo, hi, res)
    xx, yy = np.meshgrid(c, c, indexing="xy")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dens = np.exp(gmm_logpdf(g, pts)).reshape(res, res)
    dens = dens / dens.max()
    return colormap(dens[::-1])  # image rows go top-down


def scatter_image(
    samples: np.ndarray, lo: float = -4.0, hi: float = 4.0, res: int = 512
) -> np.ndarray:
    """2D histogram of samples on the pixel grid, sqrt-scaled for visibility."""
    samples = np.atleast_2d(samples)
    e = np.linspace(lo, hi, res + 1)
    hist, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=[e, e])
    img = np.sqrt(hist / max(hist.max(), 1.0))
    return colormap(img.T[::-1])
