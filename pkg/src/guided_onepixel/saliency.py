"""SmoothGrad sensitivity maps and their thresholding into a susceptibility set."""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .imaging import Image
from .model import input_gradient


@dataclass(frozen=True)
class SaliencyConfig:
    """``n`` noisy samples with noise std ``sigma`` (intensity units); ``tau`` thresholds the normalized map."""

    n: int = 20
    sigma: float = 0.15
    tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class SensitivityMap:
    values: np.ndarray
    normalized: bool = False
    degenerate: bool = False

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class SusceptibilitySet:
    """Distinct (x, y) pixel coordinates in row-major order."""

    coords: Tuple[Tuple[int, int], ...]
    height: int
    width: int
    _lookup: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_lookup", frozenset(self.coords))

    def __len__(self):
        return len(self.coords)

    def __iter__(self):
        return iter(self.coords)

    def __contains__(self, xy):
        return tuple(xy) in self._lookup

    def as_array(self):
        """Coordinates as an (n, 2) int array of (x, y) rows."""
        return np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)


def pixel_scores(gradient):
    """Collapse an HxWxC gradient to per-pixel scores: max |g| over channels."""
    return np.abs(gradient).max(axis=-1)


def noise_stream(image_shape, config):
    """Yield the ``config.n`` noise tensors smoothgrad adds, in draw order."""
    rng = np.random.default_rng(config.seed)
    for _ in range(config.n):
        yield rng.normal(0.0, config.sigma, size=image_shape)


def smoothgrad(model, image, class_index, config=SaliencyConfig()):
    """Mean of per-pixel gradient scores over ``n`` Gaussian-noised copies of ``image``.

    The noised copies are not clipped back to [0, 1]. Samples are reduced in draw
    order, so the result is bit-identical for a fixed seed.
    """
    x = image.data if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    total = np.zeros(x.shape[:2])
    for noise in noise_stream(x.shape, config):
        total += pixel_scores(input_gradient(model, x + noise, class_index))
    return SensitivityMap(total / config.n)


def normalize(smap):
    """Min-max scale to [0, 1]. A constant map becomes all zeros with ``degenerate`` set."""
    v = np.asarray(smap.values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return SensitivityMap(np.zeros_like(v), normalized=True, degenerate=True)
    out = (v - lo) / (hi - lo)
    return SensitivityMap(np.clip(out, 0.0, 1.0), normalized=True)


def threshold(smap, tau):
    """Pixels whose score is strictly greater than ``tau``, as (x, y) in row-major order."""
    ys, xs = np.nonzero(np.asarray(smap.values) > tau)
    coords = tuple((int(x), int(y)) for y, x in zip(ys, xs))
    return SusceptibilitySet(coords, smap.height, smap.width)


def susceptibility_set(model, image, class_index, config=SaliencyConfig()):
    """smoothgrad -> normalize -> threshold. Returns (normalized map, set)."""
    nmap = normalize(smoothgrad(model, image, class_index, config))
    return nmap, threshold(nmap, config.tau)


def format_map(smap):
    """Plain-text grid: 'height width' line, then one line of scores per row."""
    lines = [f"{smap.height} {smap.width}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in smap.values]
    return "\n".join(lines) + "\n"


def parse_map(text):
    rows = text.strip().splitlines()
    h, w = (int(t) for t in rows[0].split())
    values = np.array([[float(t) for t in r.split()] for r in rows[1:]], dtype=np.float64)
    if values.shape != (h, w):
        raise ValueError(f"grid header says {h}x{w}, body is {values.shape}")
    return SensitivityMap(values, normalized=True)


def map_to_pgm(smap):
    """Binary P5 bytes of the map scaled to 0-255."""
    v = np.clip(np.asarray(smap.values, dtype=np.float64), 0.0, 1.0)
    pixels = np.floor(v * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{smap.width} {smap.height}\n255\n".encode("ascii") + pixels.tobytes()


def format_set(sset):
    """One 'x y' pair per line, row-major."""
    return "".join(f"{x} {y}\n" for x, y in sset)
