"""Slicewise structural and feature similarity, and Canny edge ratios.

All functions compare axial slices (array axis 0) and average over slices.
Images are expected on a known dynamic range; the package works on windowed
images normalized to [-1, 1], so ``data_range`` defaults to 2.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from skimage.feature import canny

from ..errors import NoEdgesInReference
from .overlap import _same_geometry, as_array


def _slices(v) -> np.ndarray:
    a = as_array(v).astype(np.float64)
    return a[None] if a.ndim == 2 else a


# --------------------------------------------------------------------------
# SSIM (Wang et al. 2004): 11x11 Gaussian window, sigma 1.5


def _ssim_slice(x, y, data_range, k1=0.01, k2=0.03, sigma=1.5):
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def blur(img):
        return ndimage.gaussian_filter(img, sigma, truncate=3.5, mode="reflect")

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 2.0) -> float:
    _same_geometry(a, b)
    xs, ys = _slices(a), _slices(b)
    return float(np.mean([_ssim_slice(x, y, data_range) for x, y in zip(xs, ys)]))


# --------------------------------------------------------------------------
# FSIM (Zhang et al. 2011) with Kovesi phase congruency


def _freq_grid(rows, cols):
    def axis(n):
        if n % 2:
            return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / max(n - 1, 1)
        return np.arange(-n / 2, n / 2) / n

    x, y = np.meshgrid(axis(cols), axis(rows))
    radius = np.fft.ifftshift(np.sqrt(x * x + y * y))
    theta = np.fft.ifftshift(np.arctan2(-y, x))
    return radius, theta


def phase_congruency(img: np.ndarray, nscale=4, norient=4, min_wavelength=6, mult=2.0,
                     sigma_onf=0.55, d_theta_on_sigma=1.2, k=2.0, eps=1e-4) -> np.ndarray:
    """2D phase congruency map from a log-Gabor filter bank."""
    rows, cols = img.shape
    imfft = np.fft.fft2(img)
    radius, theta = _freq_grid(rows, cols)
    radius[0, 0] = 1.0
    lowpass = 1.0 / (1.0 + (radius / 0.45) ** (2 * 15))
    theta_sigma = np.pi / norient / d_theta_on_sigma

    log_gabor = []
    for s in range(nscale):
        fo = 1.0 / (min_wavelength * mult ** s)
        lg = np.exp(-(np.log(radius / fo)) ** 2 / (2 * np.log(sigma_onf) ** 2)) * lowpass
        lg[0, 0] = 0.0
        log_gabor.append(lg)

    sin_t, cos_t = np.sin(theta), np.cos(theta)
    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    for o in range(norient):
        angle = o * np.pi / norient
        ds = sin_t * np.cos(angle) - cos_t * np.sin(angle)
        dc = cos_t * np.cos(angle) + sin_t * np.sin(angle)
        spread = np.exp(-np.arctan2(ds, dc) ** 2 / (2 * theta_sigma ** 2))

        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        eo = []
        spatial = []
        em_n = None
        for s in range(nscale):
            filt = log_gabor[s] * spread
            spatial.append(np.real(np.fft.ifft2(filt)) * np.sqrt(rows * cols))
            resp = np.fft.ifft2(imfft * filt)
            eo.append(resp)
            sum_an += np.abs(resp)
            sum_e += resp.real
            sum_o += resp.imag
            if s == 0:
                em_n = np.sum(filt ** 2)
        x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + eps
        mean_e = sum_e / x_energy
        mean_o = sum_o / x_energy
        energy = np.zeros((rows, cols))
        for resp in eo:
            e, od = resp.real, resp.imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)

        # noise threshold from the smallest scale (Rayleigh statistics)
        median_e2n = np.median(np.abs(eo[0]) ** 2)
        mean_e2n = -median_e2n / np.log(0.5)
        noise_power = mean_e2n / em_n
        est_sum_an2 = sum(f ** 2 for f in spatial)
        est_sum_aiaj = np.zeros((rows, cols))
        for i in range(nscale - 1):
            for j in range(i + 1, nscale):
                est_sum_aiaj += spatial[i] * spatial[j]
        est_noise_energy2 = 2 * noise_power * est_sum_an2.sum() + 4 * noise_power * est_sum_aiaj.sum()
        tau = np.sqrt(est_noise_energy2 / 2)
        est_noise = tau * np.sqrt(np.pi / 2)
        est_noise_sigma = np.sqrt((2 - np.pi / 2) * tau ** 2)
        threshold = (est_noise + k * est_noise_sigma) / 1.7
        energy_all += np.maximum(energy - threshold, 0.0)
        an_all += sum_an
    return energy_all / (an_all + 1e-12)


_SCHARR_X = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]], dtype=np.float64) / 16.0
_SCHARR_Y = _SCHARR_X.T.copy()


def _gradient_magnitude(img):
    gx = ndimage.convolve(img, _SCHARR_X, mode="constant")
    gy = ndimage.convolve(img, _SCHARR_Y, mode="constant")
    return np.sqrt(gx * gx + gy * gy)


def _fsim_slice(x, y, t1, t2):
    """Return (sum of weighted similarity, sum of weights) for one slice."""
    pc1, pc2 = phase_congruency(x), phase_congruency(y)
    g1, g2 = _gradient_magnitude(x), _gradient_magnitude(y)
    s_pc = (2 * pc1 * pc2 + t1) / (pc1 ** 2 + pc2 ** 2 + t1)
    s_g = (2 * g1 * g2 + t2) / (g1 ** 2 + g2 ** 2 + t2)
    pcm = np.maximum(pc1, pc2)
    return float(np.sum(s_pc * s_g * pcm)), float(np.sum(pcm))


def fsim(a, b, data_range: float = 2.0) -> float:
    """Grayscale FSIM per axial slice, averaged over slices.

    The gradient constant (160 for 8-bit images) is rescaled to ``data_range``.
    Slices without phase-congruent structure in either image are skipped.
    """
    _same_geometry(a, b)
    xs, ys = _slices(a), _slices(b)
    t1 = 0.85
    t2 = 160.0 * (data_range / 255.0) ** 2
    scores = []
    for x, y in zip(xs, ys):
        num, den = _fsim_slice(x, y, t1, t2)
        if den > 1e-12:
            scores.append(num / den)
    if not scores:
        return 1.0
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# edge preservation / generation


def edge_map(img: np.ndarray, sigma: float = 1.0, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Canny edges of a 2D slice; thresholds are fractions of its dynamic range."""
    rng = float(img.max() - img.min())
    if rng <= 0:
        return np.zeros(img.shape, bool)
    return canny(img, sigma=sigma, low_threshold=low * rng, high_threshold=high * rng)


def edge_ratios(a, b, tolerance: int = 1) -> tuple[float, float]:
    """Edge preservation and generation ratios of ``b`` relative to reference ``a``.

    A reference edge counts as preserved when ``b`` has an edge within
    ``tolerance`` pixels; ``b`` edges farther than that from any reference edge
    count as generated. Both counts are normalized by the reference edge count.
    """
    _same_geometry(a, b)
    xs, ys = _slices(a), _slices(b)
    struct = np.ones((2 * tolerance + 1,) * 2, bool)
    ref_total = kept = new = 0
    for x, y in zip(xs, ys):
        ea, eb = edge_map(x), edge_map(y)
        if tolerance:
            near_b = ndimage.binary_dilation(eb, struct)
            near_a = ndimage.binary_dilation(ea, struct)
        else:
            near_b, near_a = eb, ea
        ref_total += int(ea.sum())
        kept += int(np.logical_and(ea, near_b).sum())
        new += int(np.logical_and(eb, ~near_a).sum())
    if ref_total == 0:
        raise NoEdgesInReference("reference image has no edges")
    return kept / ref_total, new / ref_total
