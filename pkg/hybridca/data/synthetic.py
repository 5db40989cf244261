""" Synthetic stand-ins for the proxy (multi-label) and target (severity) image sets.

Every image holds 0-3 elliptical "opacity blobs" on a noisy background. Proxy labels
are threshold predicates over blob attributes; target scores are range-scaled blob
coverage and mean blob intensity. Geometry defaults to 1x32x32; sizes, positions
and area thresholds scale with the shorter image side.

Each sample draws from its own stream seeded by ``(seed, stream, index)``, so a
dataset is a pure function of its parameters.
"""
from dataclasses import dataclass
import math
from typing import Optional

import numpy as np
from loguru import logger as log

from hybridca.core.entity_model import (
    ATTRIBUTES,
    CLASS_NAMES,
    DEFAULT_SCORE_RANGES,
    Dataset,
    Sample,
)
from hybridca.core.errors import ParameterError

DEFAULT_GEOMETRY: tuple[int, int, int] = (1, 32, 32)
REFERENCE_SIDE = 32
MAX_BLOBS = 3
BACKGROUND_SD = 0.05
FULL_COVERAGE = 0.25
""" Blob coverage fraction that maps to the top of the geographic_extend range """

_STREAM_PATIENTS = 0
_STREAM_IMAGE = 1
_STREAM_LABEL_NOISE = 2


@dataclass(frozen=True)
class Blob:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    intensity: float

    @property
    def area(self) -> float:
        return math.pi * self.rx * self.ry

    def mask(self, h: int, w: int) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w] + 0.5
        dy, dx = yy - self.cy, xx - self.cx
        cos, sin = math.cos(self.angle), math.sin(self.angle)
        u = dx * cos + dy * sin
        v = -dx * sin + dy * cos
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0


def _scale(geometry: tuple[int, int, int]) -> float:
    return min(geometry[1], geometry[2]) / REFERENCE_SIDE


def _check_request(n_samples: int, geometry: tuple[int, int, int]):
    if n_samples < 1:
        raise ParameterError(f"n_samples must be at least 1, got {n_samples}")
    if len(geometry) != 3 or min(geometry) < 1:
        raise ParameterError(f"geometry must be (c, h, w) with positive extents, got {geometry}")


def draw_blobs(rng: np.random.Generator, geometry: tuple[int, int, int]) -> list[Blob]:
    _, h, w = geometry
    s = _scale(geometry)
    count = int(rng.integers(0, MAX_BLOBS + 1))
    blobs = list()
    for _ in range(count):
        blobs.append(
            Blob(
                cy=rng.uniform(0.125 * h, 0.875 * h),
                cx=rng.uniform(0.125 * w, 0.875 * w),
                ry=rng.uniform(2.0, 7.0) * s,
                rx=rng.uniform(2.0, 7.0) * s,
                angle=rng.uniform(0.0, math.pi),
                intensity=rng.uniform(0.3, 1.0),
            )
        )
    return blobs


def render(blobs: list[Blob], geometry: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    c, h, w = geometry
    plane = np.zeros((h, w))
    for blob in blobs:
        plane += blob.intensity * blob.mask(h, w)
    image = np.broadcast_to(plane, (c, h, w)) + rng.normal(0.0, BACKGROUND_SD, size=(c, h, w))
    return image


def proxy_labels(blobs: list[Blob], geometry: tuple[int, int, int]) -> np.ndarray:
    """The 15 indicator labels; an image without blobs is the all-zero normal case."""
    _, h, w = geometry
    s = _scale(geometry)
    labels = np.zeros(len(CLASS_NAMES))
    if not blobs:
        return labels
    top = [b.cy < h / 2 for b in blobs]
    left = [b.cx < w / 2 for b in blobs]
    total_area = sum(b.area for b in blobs)
    max_intensity = max(b.intensity for b in blobs)
    predicates = [
        len(blobs) >= 1,
        len(blobs) >= 2,
        len(blobs) == 3,
        any(t and l for t, l in zip(top, left)),
        any(t and not l for t, l in zip(top, left)),
        any(not t and l for t, l in zip(top, left)),
        any(not t and not l for t, l in zip(top, left)),
        max_intensity > 0.7,
        max_intensity > 0.9,
        total_area > 60.0 * s**2,
        total_area > 150.0 * s**2,
        max(max(b.rx, b.ry) for b in blobs) > 5.5 * s,
        any(max(b.rx, b.ry) > 2.0 * min(b.rx, b.ry) for b in blobs),
        any(math.hypot(b.cy - h / 2, b.cx - w / 2) < 6.0 * s for b in blobs),
        any(left) and not all(left),
    ]
    labels[:] = predicates
    return labels


def severity_scores(
    blobs: list[Blob],
    geometry: tuple[int, int, int],
    score_ranges: dict[str, tuple[float, float]],
) -> np.ndarray:
    """[geographic_extend, opacity] in score units, both at the range minimum without blobs."""
    _, h, w = geometry
    if blobs:
        union = np.zeros((h, w), dtype=bool)
        for blob in blobs:
            union |= blob.mask(h, w)
        extent = min(1.0, union.mean() / FULL_COVERAGE)
        opacity = float(np.mean([b.intensity for b in blobs]))
    else:
        extent, opacity = 0.0, 0.0
    fractions = {"geographic_extend": extent, "opacity": opacity}
    return np.array(
        [score_ranges[a][0] + (score_ranges[a][1] - score_ranges[a][0]) * fractions[a] for a in ATTRIBUTES]
    )


def synth_proxy(
    seed: int, n_samples: int, geometry: tuple[int, int, int] = DEFAULT_GEOMETRY
) -> Dataset:
    geometry = tuple(geometry)
    _check_request(n_samples, geometry)
    group_rng = np.random.default_rng([seed, _STREAM_PATIENTS])
    patients: list[str] = list()
    while len(patients) < n_samples:
        patient = f"proxy-{seed}-p{len(set(patients)):05d}"
        patients.extend([patient] * int(group_rng.integers(1, 4)))

    samples = list()
    for i in range(n_samples):
        rng = np.random.default_rng([seed, _STREAM_IMAGE, i])
        blobs = draw_blobs(rng, geometry)
        samples.append(
            Sample(
                sample_id=f"proxy-{seed}-{i:05d}",
                patient_id=patients[i],
                image=render(blobs, geometry, rng),
                labels=proxy_labels(blobs, geometry),
            )
        )
    log.info(f"Generated {n_samples} proxy samples over {len(set(patients[:n_samples]))} patients (seed {seed})")
    return Dataset(kind="proxy", samples=samples)


def synth_target(
    seed: int,
    n_samples: int = 94,
    geometry: tuple[int, int, int] = DEFAULT_GEOMETRY,
    noise_sd: float = 0.0,
    score_ranges: Optional[dict[str, tuple[float, float]]] = None,
) -> Dataset:
    """Severity cohort with one patient per sample.

    ``noise_sd`` is a fraction of each attribute's range; noisy scores are clipped
    back into the range.
    """
    geometry = tuple(geometry)
    _check_request(n_samples, geometry)
    if noise_sd < 0:
        raise ParameterError(f"noise_sd must be non-negative, got {noise_sd}")
    score_ranges = dict(score_ranges or DEFAULT_SCORE_RANGES)
    lo = np.array([score_ranges[a][0] for a in ATTRIBUTES])
    hi = np.array([score_ranges[a][1] for a in ATTRIBUTES])

    samples = list()
    for i in range(n_samples):
        rng = np.random.default_rng([seed, _STREAM_IMAGE, i])
        blobs = draw_blobs(rng, geometry)
        scores = severity_scores(blobs, geometry, score_ranges)
        if noise_sd > 0:
            noise_rng = np.random.default_rng([seed, _STREAM_LABEL_NOISE, i])
            scores = np.clip(scores + noise_rng.normal(0.0, noise_sd * (hi - lo)), lo, hi)
        samples.append(
            Sample(
                sample_id=f"target-{seed}-{i:05d}",
                patient_id=f"target-{seed}-p{i:05d}",
                image=render(blobs, geometry, rng),
                labels=scores,
            )
        )
    log.info(f"Generated {n_samples} target samples (seed {seed}, noise_sd {noise_sd})")
    return Dataset(kind="target", samples=samples, score_ranges=score_ranges)


def generator_meta(
    kind: str,
    seed: int,
    n_samples: int,
    geometry: tuple[int, int, int],
    noise_sd: float = 0.0,
    score_ranges: Optional[dict[str, tuple[float, float]]] = None,
) -> dict:
    """Parameters echoed into ``dataset_meta.json``; target score ranges default to the generator defaults."""
    meta = {
        "kind": kind,
        "seed": seed,
        "n_samples": n_samples,
        "geometry": list(geometry),
        "max_blobs": MAX_BLOBS,
        "background_sd": BACKGROUND_SD,
    }
    if kind == "proxy":
        meta["class_names"] = list(CLASS_NAMES)
    else:
        meta["noise_sd"] = noise_sd
        meta["full_coverage"] = FULL_COVERAGE
        ranges = score_ranges or DEFAULT_SCORE_RANGES
        meta["score_ranges"] = {a: [float(v) for v in ranges[a]] for a in ATTRIBUTES}
    return meta
