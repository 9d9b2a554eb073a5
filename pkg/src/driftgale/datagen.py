"""Seeded episodic streams with no shift, gradual drift or an abrupt change.

Three families:

``gaussian_mean_drift``
    x_j ~ N(mu0 + delta_j * 1, noise_scale^2 I) in ``dim`` dimensions.
``synthetic_image_brightness``
    A small procedural runway scene (gradient background, runway rectangle,
    bright centerline) whose global brightness is multiplied by
    max(0, 1 - delta_j), plus a per-episode lighting jitter and pixel noise.
``synthetic_image_warp``
    The same scene under a small rotation and translation, scaled by delta_j.

delta_j follows the :class:`ShiftSchedule`: zero before the change point,
then ``rate * (j - n0)`` (gradual) or ``rate`` (abrupt).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import Episode, Rng

FAMILIES = ("gaussian_mean_drift", "synthetic_image_brightness", "synthetic_image_warp")
SCHEDULES = ("none", "gradual_linear", "abrupt")
FAILURE_TOL = 1e-9


@dataclass(frozen=True)
class ShiftSchedule:
    kind: str = "none"
    change_point: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "none" and self.rate != 0:
            raise ValueError("schedule 'none' must have rate 0")

    def magnitude(self, j) -> np.ndarray:
        j = np.asarray(j, dtype=np.float64)
        if self.kind == "none":
            return np.zeros_like(j)
        after = j >= self.change_point
        if self.kind == "gradual_linear":
            return np.where(after, self.rate * (j - self.change_point), 0.0)
        return np.where(after, self.rate, 0.0)


@dataclass(frozen=True)
class GeneratorSpec:
    family: str = "gaussian_mean_drift"
    dim: int = 8
    image_shape: tuple[int, int] = (16, 16)
    noise_scale: float = 1.0
    schedule: ShiftSchedule = field(default_factory=ShiftSchedule)
    seed: int = 0
    mu0: float = 0.0
    lighting_jitter: float = 0.0
    lateral_jitter: float = 0.0
    texture_modes: int = 0
    texture_scale: float = 0.0
    warp_degrees: float = 8.0
    warp_shift: float = 1.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown generator family {self.family!r}")
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ShiftSchedule(**self.schedule))
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if min(self.noise_scale, self.lighting_jitter, self.lateral_jitter,
               self.texture_scale, self.texture_modes) < 0:
            raise ValueError("noise and jitter scales must be nonnegative")
        if self.family == "gaussian_mean_drift" and self.dim < 1:
            raise ValueError("dim must be >= 1")

    @property
    def is_image(self) -> bool:
        return self.family != "gaussian_mean_drift"

    @property
    def feature_dim(self) -> int:
        return math.prod(self.image_shape) if self.is_image else self.dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = ShiftSchedule(**d["schedule"])
        return cls(**d)


def scene_layers(shape=(16, 16)) -> dict:
    """Background, runway and centerline masks/intensities for the procedural scene."""
    h, w = shape
    rows = np.arange(h)[:, None] / max(h - 1, 1)
    cols = np.arange(w)[None, :] / max(w - 1, 1)
    background = 0.25 + 0.3 * rows + 0.0 * cols
    runway = (rows >= 0.3) & (np.abs(cols - 0.5) <= 0.12 + 0.25 * rows)
    centerline = runway & (np.abs(cols - 0.5) <= 0.5 / max(w - 1, 1) + 1e-9)
    return {"background": background, "runway": runway & ~centerline,
            "centerline": centerline}


def base_scene(shape=(16, 16)) -> np.ndarray:
    layers = scene_layers(shape)
    img = layers["background"].copy()
    img[layers["runway"]] = 0.15
    img[layers["centerline"]] = 0.95
    return img


def texture_basis(shape=(16, 16), modes: int = 0) -> np.ndarray:
    """``modes`` smooth cosine patterns, lowest spatial frequency first, max |entry| 1."""
    h, w = shape
    freqs = sorted(((u, v) for u in range(h) for v in range(w) if u or v),
                   key=lambda uv: (uv[0] + uv[1], uv[0]))
    if modes > len(freqs):
        raise ValueError(f"at most {len(freqs)} texture modes for shape {shape}")
    r = (np.arange(h)[:, None] + 0.5) / h
    c = (np.arange(w)[None, :] + 0.5) / w
    out = np.empty((modes, h * w))
    for m, (u, v) in enumerate(freqs[:modes]):
        out[m] = (np.cos(np.pi * u * r) * np.cos(np.pi * v * c)).reshape(-1)
    return out


def _warp(img: np.ndarray, degrees: float, shift: float) -> np.ndarray:
    if degrees == 0 and shift == 0:
        return img.copy()
    th = math.radians(degrees)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    center = (np.array(img.shape) - 1) / 2.0
    # output coord o maps to input rot @ (o - c) + c - (0, shift)
    offset = center - rot @ center - np.array([0.0, shift])
    return ndimage.affine_transform(img, rot, offset=offset, order=1, mode="nearest")


def render_clean(spec: GeneratorSpec, magnitude: float, lateral: float = 0.0) -> np.ndarray:
    """Noise-free, jitter-free feature vector at shift magnitude ``magnitude``.

    ``lateral`` moves the camera sideways by that many pixels.
    """
    if spec.family == "gaussian_mean_drift":
        return np.full(spec.dim, spec.mu0 + magnitude)
    scene = base_scene(spec.image_shape)
    if spec.family == "synthetic_image_brightness":
        return (max(0.0, 1.0 - magnitude) * _warp(scene, 0.0, lateral)).reshape(-1)
    return _warp(scene, spec.warp_degrees * magnitude,
                 spec.warp_shift * magnitude + lateral).reshape(-1)


def generate(spec: GeneratorSpec, count: int, start: int = 0) -> list[Episode]:
    """Episodes ``start .. start + count - 1``; deterministic in ``spec.seed``.

    Episode j's randomness comes from its own child generator, so any window
    of the stream is reproducible without generating the prefix.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    root = Rng(spec.seed).split("datagen")
    js = np.arange(start, start + count)
    mags = spec.schedule.magnitude(js)
    shape = spec.image_shape if spec.is_image else None
    out = []
    cache: dict[float, np.ndarray] = {}
    basis = texture_basis(spec.image_shape, spec.texture_modes) if spec.is_image else None
    for j, mag in zip(js.tolist(), mags.tolist()):
        gen = root.split(f"episode-{j}").generator
        if spec.family == "gaussian_mean_drift":
            x = spec.mu0 + mag + spec.noise_scale * gen.standard_normal(spec.dim)
        else:
            lateral = spec.lateral_jitter * gen.standard_normal()
            if lateral:
                clean = render_clean(spec, mag, lateral)
            else:
                clean = cache.get(mag)
                if clean is None:
                    clean = cache[mag] = render_clean(spec, mag)
            if spec.texture_modes:
                coef = spec.texture_scale * gen.standard_normal(spec.texture_modes)
                clean = clean + coef @ basis
            light = 1.0 + spec.lighting_jitter * gen.standard_normal()
            x = light * clean + spec.noise_scale * gen.standard_normal(clean.size)
        out.append(Episode(j, x, shape))
    return out


def generate_array(spec: GeneratorSpec, count: int, start: int = 0) -> np.ndarray:
    return np.stack([ep.features for ep in generate(spec, count, start)])


def failure_proxy(episode, family: str, spec: Optional[GeneratorSpec] = None) -> float:
    """Task-health score for an episode; lower means a more degraded downstream task.

    * brightness / warp: centerline-vs-runway contrast measured at the
      nominal centerline location, relative to the unshifted scene (1.0 for
      the nominal scene, 0 when dark).
    * gaussian: 1 / (1 + |mean(x) - mu0|), a decreasing map of the distance
      of the episode's mean estimate from the nominal mean.
    """
    is_ep = isinstance(episode, Episode)
    x = episode.features if is_ep else np.asarray(episode, dtype=np.float64)
    if family == "gaussian_mean_drift":
        mu0 = 0.0 if spec is None else spec.mu0
        return 1.0 / (1.0 + abs(float(np.mean(x)) - mu0))
    if family not in FAMILIES:
        raise ValueError(f"unsupported family {family!r}")
    shape = (episode.shape if is_ep else None) or (spec.image_shape if spec else (16, 16))
    img = np.asarray(x, dtype=np.float64).reshape(shape)
    layers = scene_layers(shape)
    base = base_scene(shape)
    ref = base[layers["centerline"]].mean() - base[layers["runway"]].mean()
    c = img[layers["centerline"]].mean() - img[layers["runway"]].mean()
    return max(0.0, float(c / ref))


def failure_index(spec: GeneratorSpec, floor: float, horizon: int) -> Optional[int]:
    """First episode index j >= n0 whose noise-free proxy is at or below ``floor``."""
    n0 = spec.schedule.change_point
    for j in range(n0, n0 + horizon):
        mag = float(spec.schedule.magnitude(j))
        proxy = failure_proxy(render_clean(spec, mag), spec.family, spec)
        if proxy <= floor + FAILURE_TOL:
            return j
    return None
