"""Raster preprocessing: grayscale, Gaussian blur, non-local means,
adaptive mean thresholding and Canny edges, plus PGM/PPM I/O.

Images are numpy arrays: grayscale and binary rasters are 2-D ``uint8``
arrays of shape (height, width); RGB rasters are (height, width, 3).
Intermediate arithmetic is float64; results are quantized to [0, 255]
only when a stage returns.
"""
from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import FormatError, ParameterError

log = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)
CNN_INPUTS = ("denoised", "thresholded", "edges")


@dataclass
class PipelineConfig:
    blur_kernel: int = 5
    blur_sigma: float = 1.0
    nlm_h: float = 10.0
    nlm_template: int = 7
    nlm_search: int = 21
    nlm_sigma: float = 0.0
    at_block: int = 11
    at_c: float = 2.0
    canny_low: float = 50.0
    canny_high: float = 150.0
    cnn_input: str = "denoised"

    def validate(self):
        _check_odd("blur_kernel", self.blur_kernel, minimum=3)
        if self.blur_sigma <= 0:
            raise ParameterError("blur_sigma must be positive")
        if self.nlm_h <= 0:
            raise ParameterError("nlm_h must be positive")
        _check_odd("nlm_template", self.nlm_template)
        _check_odd("nlm_search", self.nlm_search)
        if self.nlm_template >= self.nlm_search:
            raise ParameterError("nlm_template must be smaller than nlm_search")
        _check_odd("at_block", self.at_block, minimum=3)
        if not 0 <= self.canny_low < self.canny_high <= 255:
            raise ParameterError("need 0 <= canny_low < canny_high <= 255")
        if self.cnn_input not in CNN_INPUTS:
            raise ParameterError(f"cnn_input must be one of {CNN_INPUTS}, got {self.cnn_input!r}")
        return self

    def to_dict(self):
        return asdict(self)


def _check_odd(name, value, minimum=1):
    if int(value) != value or value % 2 == 0 or value < minimum:
        raise ParameterError(f"{name} must be an odd integer >= {minimum}, got {value!r}")


def quantize(values):
    """Round half up and clamp to an 8-bit raster."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def as_gray(img):
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ParameterError(f"expected a non-empty 2-D grayscale raster, got shape {img.shape}")
    if img.dtype != np.uint8:
        if np.any(img < 0) or np.any(img > 255) or np.any(img != np.round(img)):
            raise ParameterError("grayscale intensities must be integers in [0, 255]")
        img = img.astype(np.uint8)
    return img


def to_grayscale(img):
    """Luma conversion of an (H, W, 3) RGB raster."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParameterError(f"expected an (H, W, 3) RGB raster, got shape {img.shape}")
    rgb = img.astype(np.float64)
    return quantize(LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2])


def gaussian_kernel1d(kernel, sigma):
    _check_odd("kernel", kernel, minimum=1)
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    r = kernel // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _smooth(values, kernel, sigma):
    # separable pass over float data, edge-replicated borders
    g = gaussian_kernel1d(kernel, sigma)
    r = kernel // 2
    padded = np.pad(values, r, mode="edge")
    h, w = values.shape
    rows = np.zeros((h + 2 * r, w))
    for i, gi in enumerate(g):
        rows += gi * padded[:, i:i + w]
    out = np.zeros((h, w))
    for i, gi in enumerate(g):
        out += gi * rows[i:i + h, :]
    return out


def gaussian_blur(img, kernel=5, sigma=1.0):
    img = as_gray(img)
    _check_odd("kernel", kernel, minimum=1)
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    return quantize(_smooth(img.astype(np.float64), kernel, sigma))


def _box_mean(values, size):
    """Mean over a size x size window with edge replication."""
    r = size // 2
    padded = np.pad(values, r, mode="edge")
    h, w = values.shape
    acc = np.zeros((h, w))
    for dy in range(size):
        for dx in range(size):
            acc += padded[dy:dy + h, dx:dx + w]
    return acc / (size * size)


def nlm_denoise(img, h=10.0, template=7, search=21, sigma=0.0):
    """Non-local means, quantized back to 8 bits (see :func:`nlm_estimate`)."""
    return quantize(nlm_estimate(img, h, template, search, sigma))


def nlm_estimate(img, h=10.0, template=7, search=21, sigma=0.0):
    """Unquantized non-local means: every pixel becomes the weighted mean of
    its search window, weighted by exp(-max(d2 - 2 sigma^2, 0) / h^2) where
    d2 is the mean squared difference of the surrounding template patches."""
    img = as_gray(img)
    if h <= 0:
        raise ParameterError("h must be positive")
    _check_odd("template", template)
    _check_odd("search", search)
    if template >= search:
        raise ParameterError("template window must be smaller than the search window")
    rows, cols = img.shape
    if search > rows or search > cols:
        raise ParameterError(f"search window {search} larger than image {cols}x{rows}")

    sr, tr = search // 2, template // 2
    f = img.astype(np.float64)
    big = np.pad(f, sr + tr, mode="edge")
    # centre pixels inside `big` live at offset sr + tr
    centre = big[sr:sr + rows + 2 * tr, sr:sr + cols + 2 * tr]
    num = np.zeros((rows, cols))
    den = np.zeros((rows, cols))
    h2 = h * h
    for dy in range(-sr, sr + 1):
        for dx in range(-sr, sr + 1):
            shifted = big[sr + dy:sr + dy + rows + 2 * tr, sr + dx:sr + dx + cols + 2 * tr]
            sq = (centre - shifted) ** 2
            part = np.zeros((rows, cols + 2 * tr))
            for ty in range(template):
                part += sq[ty:ty + rows, :]
            d2 = np.zeros((rows, cols))
            for tx in range(template):
                d2 += part[:, tx:tx + cols]
            d2 /= template * template
            wgt = np.exp(-np.maximum(d2 - 2.0 * sigma * sigma, 0.0) / h2)
            num += wgt * shifted[tr:tr + rows, tr:tr + cols]
            den += wgt
    return num / den


def adaptive_threshold(img, block=11, c=2.0):
    img = as_gray(img)
    _check_odd("block", block, minimum=3)
    mean = _box_mean(img.astype(np.float64), block)
    return np.where(img > mean - c, 255, 0).astype(np.uint8)


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T

# (row, col) step along each quantized gradient direction
_DIRECTION_STEPS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


def sobel(values):
    """Return (gx, gy) with gx along columns and gy along rows."""
    h, w = values.shape
    p = np.pad(values, 1, mode="edge")
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            win = p[i:i + h, j:j + w]
            gx += _SOBEL_X[i, j] * win
            gy += _SOBEL_Y[i, j] * win
    return gx, gy


def direction_bins(gx, gy):
    """Quantize gradient angles to 0/45/90/135 degrees (bins 0..3)."""
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    return (np.floor((angle + 22.5) / 45.0).astype(int)) % 4


def non_max_suppression(mag, bins):
    # ties along the gradient keep the pixel on the negative side only,
    # so a symmetric ridge yields a single-pixel line
    h, w = mag.shape
    p = np.pad(mag, 1, mode="constant")
    out = np.zeros_like(mag)
    for b, (dr, dc) in _DIRECTION_STEPS.items():
        fwd = p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        bwd = p[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        keep = (bins == b) & (mag >= fwd) & (mag > bwd)
        out[keep] = mag[keep]
    return out


def hysteresis(nms, low, high):
    strong = nms >= high
    candidate = nms >= low
    labels, n = ndimage.label(candidate, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros(nms.shape, dtype=bool)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[labels[strong]] = True
    has_strong[0] = False
    return has_strong[labels]


def canny(img, low=50.0, high=150.0):
    img = as_gray(img)
    if not 0 <= low < high:
        raise ParameterError(f"need 0 <= low < high, got low={low}, high={high}")
    smoothed = _smooth(img.astype(np.float64), 5, 1.4)
    gx, gy = sobel(smoothed)
    mag = np.sqrt(gx * gx + gy * gy)
    nms = non_max_suppression(mag, direction_bins(gx, gy))
    return np.where(hysteresis(nms, low, high), 255, 0).astype(np.uint8)


def preprocess(img, cfg=None):
    """Grayscale -> blur -> denoise, then optionally threshold or edges.

    Accepts RGB or grayscale input; returns the raster chosen by
    ``cfg.cnn_input``.
    """
    cfg = (cfg or PipelineConfig()).validate()
    img = np.asarray(img)
    gray = to_grayscale(img) if img.ndim == 3 else as_gray(img)
    blurred = gaussian_blur(gray, cfg.blur_kernel, cfg.blur_sigma)
    denoised = nlm_denoise(blurred, cfg.nlm_h, cfg.nlm_template, cfg.nlm_search, cfg.nlm_sigma)
    if cfg.cnn_input == "denoised":
        return denoised
    if cfg.cnn_input == "thresholded":
        return adaptive_threshold(denoised, cfg.at_block, cfg.at_c)
    return canny(denoised, cfg.canny_low, cfg.canny_high)


# -- PGM / PPM ---------------------------------------------------------------

_TOKEN = re.compile(rb"#[^\n]*\n?|\s+|(\S+)")


def read_pnm(path):
    """Read a binary P5 (gray) or P6 (RGB) file with maxval 255."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = _TOKEN.match(raw, pos)
        if m is None or m.end() == pos:
            raise FormatError(f"{path}: truncated PNM header")
        pos = m.end()
        if m.group(1) is not None:
            tokens.append(m.group(1))
    # exactly one whitespace byte separates the header from the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PNM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    depth = 1 if magic == b"P5" else 3
    pos += 1
    body = raw[pos:pos + width * height * depth]
    if len(body) != width * height * depth:
        raise FormatError(f"{path}: expected {width * height * depth} raster bytes, got {len(body)}")
    data = np.frombuffer(body, dtype=np.uint8)
    shape = (height, width) if depth == 1 else (height, width, 3)
    return data.reshape(shape).copy()


def write_pgm(path, img):
    img = as_gray(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_ppm(path, img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParameterError(f"expected an (H, W, 3) RGB raster, got shape {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
