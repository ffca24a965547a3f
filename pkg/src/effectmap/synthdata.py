"""Synthetic benchmark data: smoothed-noise images with planted effects.

Control images are smoothed Gaussian noise fields on a pixel grid.  Case
images add a constant offset on one of two fixed ground-truth regions.
The two region types share a central square and differ in which corners
carry the effect, so classifiers trained on a mixed case group face
spatially heterogeneous signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import BinaryEffectMap, Dataset, Sample

__all__ = [
    "ConfigurationError",
    "SynthConfig",
    "EffectMask",
    "effect_mask",
    "generate_control_image",
    "generate_case_image",
    "generate_dataset",
]

# Fixed effect geometry, in pixels.  The central square is shared by both
# effect types; each type adds two corner squares on one diagonal.
CENTRAL_SIDE = 20
CORNER_SIDE = 14
CORNER_OFFSET = 10
_MIN_SIDE = 40


class ConfigurationError(ValueError):
    """A configuration value outside the supported range."""


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic image benchmark.

    ``effect_size`` is expressed as a multiple of ``sigma_n``, so the
    planted offset in raw units is ``effect_size * sigma_n``.
    """

    width: int = 100
    height: int = 100
    sigma_n: float = 50.0
    smooth_sigma: float = 2.5
    effect_size: float = 1.0
    n_controls: int = 100
    n_cases: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("width and height must be positive")
        if self.sigma_n <= 0 or self.smooth_sigma <= 0:
            raise ConfigurationError("sigma_n and smooth_sigma must be positive")
        if self.effect_size < 0:
            raise ConfigurationError("effect_size must be >= 0")
        if self.n_controls < 1 or self.n_cases < 0:
            raise ConfigurationError("need n_controls >= 1 and n_cases >= 0")

    @property
    def d(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class EffectMask:
    """Binary ground-truth image for one effect type ("A" or "B")."""

    mask: np.ndarray
    effect_type: str

    def __post_init__(self) -> None:
        m = np.asarray(self.mask)
        if m.ndim != 2 or not m.any():
            raise ValueError("mask must be a nonempty 2-d binary image")
        if self.effect_type not in ("A", "B"):
            raise ValueError(f"effect_type must be 'A' or 'B', got {self.effect_type!r}")
        m = m.astype(np.uint8)
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    def flat(self) -> np.ndarray:
        """Row-major flattened mask, aligned with grid-graph node ids."""
        return self.mask.ravel()


def effect_mask(effect_type: str, width: int, height: int) -> EffectMask:
    """Ground-truth region for one effect type.

    Both types contain a central ``CENTRAL_SIDE`` square.  Type "A" adds
    corner squares at top-left and bottom-right, type "B" at top-right
    and bottom-left, each ``CORNER_SIDE`` wide and ``CORNER_OFFSET``
    pixels in from the image border.
    """
    if effect_type not in ("A", "B"):
        raise ValueError(f"effect_type must be 'A' or 'B', got {effect_type!r}")
    if width < _MIN_SIDE or height < _MIN_SIDE:
        raise ConfigurationError(
            f"image {width}x{height} too small for the effect geometry "
            f"(both sides must be >= {_MIN_SIDE})"
        )
    m = np.zeros((height, width), dtype=np.uint8)
    r0 = (height - CENTRAL_SIDE) // 2
    c0 = (width - CENTRAL_SIDE) // 2
    m[r0:r0 + CENTRAL_SIDE, c0:c0 + CENTRAL_SIDE] = 1
    top = CORNER_OFFSET
    left = CORNER_OFFSET
    bottom = height - CORNER_OFFSET - CORNER_SIDE
    right = width - CORNER_OFFSET - CORNER_SIDE
    corners = [(top, left), (bottom, right)] if effect_type == "A" else \
              [(top, right), (bottom, left)]
    for r, c in corners:
        m[r:r + CORNER_SIDE, c:c + CORNER_SIDE] = 1
    return EffectMask(m, effect_type)


def _smoothing_gain(smooth_sigma: float, truncate: float = 4.0) -> float:
    # l2 norm of the separable 2-d smoothing kernel (truncated, sum-
    # normalized, matching scipy's gaussian_filter discretization).
    # Smoothing white noise multiplies its marginal std by this factor.
    radius = int(truncate * smooth_sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / smooth_sigma) ** 2)
    k /= k.sum()
    return float(np.sum(k ** 2))


def generate_control_image(config: SynthConfig, seed) -> Sample:
    """One label-0 image: an iid Gaussian noise field, spatially smoothed.

    The smoothed field is rescaled so the marginal per-pixel standard
    deviation stays at ``sigma_n``; smoothing then only introduces the
    spatial correlation, without shrinking the noise scale that effect
    sizes are quoted against.
    """
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, config.sigma_n, size=(config.height, config.width))
    img = gaussian_filter(noise, config.smooth_sigma, mode="reflect", truncate=4.0)
    img /= _smoothing_gain(config.smooth_sigma)
    return Sample(img.ravel(), 0)


def generate_case_image(config: SynthConfig, effect_type: str, seed) -> Sample:
    """One label-1 image: a control image plus a constant planted effect.

    The offset ``effect_size * sigma_n`` is added on the mask pixels only,
    after smoothing, so region boundaries stay sharp.
    """
    base = generate_control_image(config, seed)
    mask = effect_mask(effect_type, config.width, config.height)
    values = base.measurements.copy()
    values[mask.flat().astype(bool)] += config.effect_size * config.sigma_n
    return Sample(values, 1)


def generate_dataset(config: SynthConfig):
    """Full benchmark set: controls first, then type-A cases, then type-B.

    Returns ``(dataset, truths)`` where ``truths`` is a tuple of per-sample
    ground-truth :class:`BinaryEffectMap` objects aligned with
    ``dataset.samples`` (all-zero for controls).  Each sample gets its own
    seed derived from ``(config.seed, sample_index)``, so generation is
    order-independent and safe to parallelize.
    """
    if config.n_cases % 2:
        raise ConfigurationError(
            "n_cases must be even: cases are split equally between effect types"
        )
    samples = []
    truths = []
    zero = np.zeros(config.d, dtype=np.uint8)
    index = 0
    for _ in range(config.n_controls):
        samples.append(generate_control_image(config, (config.seed, index)))
        truths.append(BinaryEffectMap(zero))
        index += 1
    half = config.n_cases // 2
    for effect_type in ("A", "B"):
        flat = effect_mask(effect_type, config.width, config.height).flat()
        for _ in range(half):
            samples.append(generate_case_image(config, effect_type, (config.seed, index)))
            truths.append(BinaryEffectMap(flat))
            index += 1
    return Dataset(tuple(samples)), tuple(truths)
