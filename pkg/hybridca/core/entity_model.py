from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional

import numpy as np
from loguru import logger as log

from hybridca.core.errors import DataError

DatasetKind = Literal["proxy", "target"]

ATTRIBUTES: tuple[str, str] = ("geographic_extend", "opacity")
""" Severity attributes of target samples, in label order """

CLASS_NAMES: tuple[str, ...] = (
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural Thickening",
    "Hernia",
    "COVID-19",
)
""" Proxy label positions; index 14 is the COVID-19 slot """

LABEL_ARITY: dict[str, int] = {"proxy": 15, "target": 2}

DEFAULT_SCORE_RANGES: dict[str, tuple[float, float]] = {
    "geographic_extend": (0.0, 8.0),
    "opacity": (0.0, 6.0),
}


#########################################################################
# SAMPLE
#########################################################################
@dataclass(frozen=True)
class Sample:
    sample_id: str
    patient_id: str
    image: np.ndarray = field(repr=False)
    """ [c, h, w] 64-bit values """
    labels: np.ndarray = field(repr=False)
    """ 15 binary entries (proxy) or 2 severity scores (target) """


#########################################################################
# DATASET
#########################################################################
@dataclass
class Dataset:
    kind: DatasetKind
    samples: list[Sample] = field(default_factory=list, repr=False)
    score_ranges: Optional[dict[str, tuple[float, float]]] = None
    """ Per-attribute [lo, hi], target datasets only """

    def __post_init__(self):
        if self.kind not in LABEL_ARITY:
            raise DataError(f"Unknown dataset kind '{self.kind}'")
        if self.kind == "target":
            if self.score_ranges is None:
                self.score_ranges = dict(DEFAULT_SCORE_RANGES)
            if set(self.score_ranges) != set(ATTRIBUTES):
                raise DataError(
                    f"Target score ranges must cover {ATTRIBUTES}, got {sorted(self.score_ranges)}"
                )
            for attribute, (lo, hi) in self.score_ranges.items():
                if not lo < hi:
                    raise DataError(f"Empty score range [{lo}, {hi}] for '{attribute}'")
        elif self.score_ranges is not None:
            raise DataError("Score ranges apply to target datasets only")
        self.validate()

    def validate(self):
        """Check identity, geometry and label contracts; rows in messages are 1-based."""
        seen: set[str] = set()
        geometry = None
        arity = LABEL_ARITY[self.kind]
        for row, sample in enumerate(self.samples, start=1):
            if sample.sample_id in seen:
                raise DataError(f"duplicate sample_id '{sample.sample_id}'", row=row)
            seen.add(sample.sample_id)
            if sample.image.ndim != 3:
                raise DataError(f"image must be [c, h, w], got {sample.image.shape}", row=row)
            if geometry is None:
                geometry = sample.image.shape
            elif sample.image.shape != geometry:
                raise DataError(
                    f"image geometry {sample.image.shape} differs from {geometry}", row=row
                )
            if sample.labels.shape != (arity,):
                raise DataError(
                    f"{self.kind} samples need {arity} labels, got {sample.labels.shape}", row=row
                )
            if self.kind == "proxy" and not np.isin(sample.labels, (0.0, 1.0)).all():
                raise DataError("proxy labels must be binary", row=row)
            if self.kind == "target":
                for value, attribute in zip(sample.labels, ATTRIBUTES):
                    lo, hi = self.score_ranges[attribute]
                    if not lo <= value <= hi:
                        raise DataError(
                            f"{attribute} score {value} outside [{lo}, {hi}]", row=row
                        )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def geometry(self) -> tuple[int, int, int]:
        if not self.samples:
            raise DataError("no samples")
        return self.samples[0].image.shape

    @property
    def sample_ids(self) -> list[str]:
        return [sample.sample_id for sample in self.samples]

    @property
    def patient_ids(self) -> list[str]:
        return [sample.patient_id for sample in self.samples]

    def images(self) -> np.ndarray:
        """[N, c, h, w]"""
        return np.stack([sample.image for sample in self.samples])

    def labels(self) -> np.ndarray:
        return np.stack([sample.labels for sample in self.samples])

    def subset(self, sample_ids: Iterable[str]) -> "Dataset":
        wanted = set(sample_ids)
        log.trace(f"Taking {len(wanted)} of {len(self)} {self.kind} samples")
        return Dataset(
            kind=self.kind,
            samples=[s for s in self.samples if s.sample_id in wanted],
            score_ranges=self.score_ranges,
        )

    ################################
    # Severity target scaling
    ################################

    def _ranges(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind != "target":
            raise DataError("Score normalisation applies to target datasets only")
        lo = np.array([self.score_ranges[a][0] for a in ATTRIBUTES])
        hi = np.array([self.score_ranges[a][1] for a in ATTRIBUTES])
        return lo, hi

    def normalized_labels(self) -> np.ndarray:
        """Scores mapped to [0, 1] by (y - lo) / (hi - lo)."""
        lo, hi = self._ranges()
        return (self.labels() - lo) / (hi - lo)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        lo, hi = self._ranges()
        return lo + np.asarray(values) * (hi - lo)
