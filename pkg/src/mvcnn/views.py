"""Gradient feature views and multi-channel view stacks.

A view stack is the RGB image followed by any of three single-channel views
computed on luminance: horizontal gradient (Gx), vertical gradient (Gy) and
gradient magnitude (Gm). Derivatives come from sampled Gaussian-derivative
kernels normalized so that a unit-slope ramp responds with exactly 1.

In ``paper-literal`` mode Gx/Gy are the squared derivative summed over a
(2d+1) x (2d+1) window (a local gradient energy). In ``smoothed-derivative``
mode they are the absolute derivative.
"""

from __future__ import annotations

import enum
import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError, StaleCacheError

PAPER_LITERAL = "paper-literal"
SMOOTHED = "smoothed-derivative"
MODES = (PAPER_LITERAL, SMOOTHED)

# numpy "reflect" padding (edge sample not repeated); scipy calls it "mirror"
_BORDER = "mirror"

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class ViewParams:
    sigma: float = 1.0
    d: int = 1
    mode: str = PAPER_LITERAL

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        if int(self.d) != self.d or self.d < 1:
            raise ParameterError(f"window radius d must be an integer >= 1, got {self.d}")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def radius(self) -> int:
        return math.ceil(3 * self.sigma)

    @property
    def kernel_width(self) -> int:
        return 2 * self.radius + 1


class ViewCombination(enum.Enum):
    """The four input combinations, in the order of the ablation table."""

    RGB = "rgb"
    RGB_GXGY = "rgb+gxgy"
    RGB_GXGYGM = "rgb+gxgygm"
    RGB_GM = "rgb+gm"

    @property
    def views(self) -> tuple[str, ...]:
        return {
            "rgb": (),
            "rgb+gxgy": ("gx", "gy"),
            "rgb+gxgygm": ("gx", "gy", "gm"),
            "rgb+gm": ("gm",),
        }[self.value]

    @property
    def channel_count(self) -> int:
        return 3 + len(self.views)

    @classmethod
    def parse(cls, name: "str | ViewCombination") -> "ViewCombination":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            valid = ", ".join(c.value for c in cls)
            raise ParameterError(f"unknown view combination {name!r}; expected one of {valid}") from None

    @classmethod
    def from_channels(cls, channels: int) -> "ViewCombination":
        for combo in cls:
            if combo.channel_count == channels:
                return combo
        raise DimensionError(f"no view combination has {channels} channels")


@dataclass
class ViewStack:
    """A (c, h, w) float32 stack with channels R, G, B, then Gx, Gy, Gm as selected."""

    data: np.ndarray
    combo: ViewCombination

    @property
    def tensor(self) -> np.ndarray:
        return self.data[None]


def to_luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"channel axis must have 3 entries (H x W x 3), got shape {rgb.shape}")
    r, g, b = LUMA_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


@functools.lru_cache(maxsize=32)
def _kernels(sigma: float, radius: int) -> tuple[np.ndarray, np.ndarray]:
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    y, x = np.meshgrid(coords, coords, indexing="ij")
    g = np.exp(-(x**2 + y**2) / (2 * sigma**2)) / (2 * np.pi * sigma**2)
    kx = -x / sigma**2 * g
    # convolving with a ramp I = x gives -sum(x * K); scale that to exactly 1
    kx /= -(x * kx).sum()
    kx.setflags(write=False)
    ky = kx.T.copy()
    ky.setflags(write=False)
    return kx, ky


def gaussian_derivative_kernels(params: ViewParams) -> tuple[np.ndarray, np.ndarray]:
    """Ramp-normalized Gaussian-derivative kernels ``(Kx, Ky)``, indexed [row, col].

    Intended for true convolution (``scipy.ndimage.convolve``). ``Ky`` is ``Kx.T``.
    """
    return _kernels(float(params.sigma), params.radius)


def _check_field(field: np.ndarray, params: ViewParams) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise DimensionError(f"expected a 2-D scalar field, got shape {field.shape}")
    support = max(params.kernel_width, 2 * params.d + 1)
    if min(field.shape) < support:
        raise DimensionError(
            f"image {field.shape[0]}x{field.shape[1]} smaller than the kernel support {support}"
        )
    return field


def _derivative_x(luma: np.ndarray, params: ViewParams) -> np.ndarray:
    """``luma`` convolved with Kx under mirror borders.

    Kx is odd in x, so the sum is taken over column differences paired by
    offset. A constant field then gives exact zeros instead of rounding noise.
    """
    kx, _ = gaussian_derivative_kernels(params)
    r = params.radius
    h, w = luma.shape
    padded = np.pad(luma, r, mode="reflect")  # numpy "reflect" is scipy "mirror"
    out = np.zeros_like(luma)
    for a in range(2 * r + 1):
        rows = padded[2 * r - a : 2 * r - a + h]
        for j in range(1, r + 1):
            out += kx[a, r + j] * (rows[:, r - j : r - j + w] - rows[:, r + j : r + j + w])
    return out


def grad_x(luma: np.ndarray, params: ViewParams = ViewParams()) -> np.ndarray:
    luma = _check_field(luma, params)
    dx = _derivative_x(luma, params)
    if params.mode == SMOOTHED:
        return np.abs(dx)
    window = np.ones((2 * params.d + 1,) * 2)
    return ndimage.correlate(dx * dx, window, mode=_BORDER)


def grad_y(luma: np.ndarray, params: ViewParams = ViewParams()) -> np.ndarray:
    # Ky is Kx transposed, so the vertical view is the horizontal view of the transpose
    luma = _check_field(luma, params)
    return np.ascontiguousarray(grad_x(luma.T, params).T)


def grad_magnitude(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    gx = np.asarray(gx)
    gy = np.asarray(gy)
    if gx.shape != gy.shape:
        raise DimensionError(f"shape mismatch: grad_x {gx.shape} vs grad_y {gy.shape}")
    return np.sqrt(gx * gx + gy * gy)


def normalize_channel(field: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant field maps to zeros."""
    field = np.asarray(field, dtype=np.float64)
    lo, hi = field.min(), field.max()
    if hi == lo:
        return np.zeros_like(field)
    return np.clip((field - lo) / (hi - lo), 0.0, 1.0)


def stack_views(
    rgb: np.ndarray, combo: "ViewCombination | str", params: ViewParams = ViewParams()
) -> ViewStack:
    combo = ViewCombination.parse(combo)
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"channel axis must have 3 entries (H x W x 3), got shape {rgb.shape}")
    channels = [rgb[..., i].astype(np.float32) for i in range(3)]
    if combo.views:
        luma = to_luminance(rgb.astype(np.float64))
        gx = grad_x(luma, params)
        gy = grad_y(luma, params)
        fields = {"gx": gx, "gy": gy}
        if "gm" in combo.views:
            fields["gm"] = grad_magnitude(gx, gy)
        channels += [normalize_channel(fields[v]).astype(np.float32) for v in combo.views]
    return ViewStack(np.stack(channels), combo)


# --- MVVS on-disk format -----------------------------------------------------

MVVS_MAGIC = b"MVVS"
MVVS_VERSION = 1
_MVVS_HEADER = struct.Struct("<4sHHII")


def write_mvvs(path: "str | Path", data: np.ndarray) -> None:
    """Write a (c, h, w) array as an MVVS file (little-endian float32, channel-major)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise DimensionError(f"MVVS payload must be (c, h, w), got shape {data.shape}")
    c, h, w = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MVVS_HEADER.pack(MVVS_MAGIC, MVVS_VERSION, c, h, w))
        fh.write(np.ascontiguousarray(data).tobytes())
    tmp.replace(path)


def read_mvvs_header(path: "str | Path") -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_MVVS_HEADER.size)
    if len(head) != _MVVS_HEADER.size:
        raise StaleCacheError(f"{path}: truncated MVVS header")
    magic, version, c, h, w = _MVVS_HEADER.unpack(head)
    if magic != MVVS_MAGIC or version != MVVS_VERSION:
        raise StaleCacheError(f"{path}: not an MVVS v{MVVS_VERSION} file")
    return c, h, w


def read_mvvs(path: "str | Path") -> np.ndarray:
    c, h, w = read_mvvs_header(path)
    raw = Path(path).read_bytes()[_MVVS_HEADER.size :]
    if len(raw) != 4 * c * h * w:
        raise StaleCacheError(f"{path}: payload has {len(raw)} bytes, header implies {4 * c * h * w}")
    return np.frombuffer(raw, dtype="<f4").reshape(c, h, w).astype(np.float32)
