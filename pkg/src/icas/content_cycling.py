"""Round-robin assignment of per-subject content embeddings to attention sites."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContentEmbeddingList",
    "CyclicSchedule",
    "build_schedule",
    "embedding_for_site",
    "extract_content_embeddings",
]


@dataclass(frozen=True)
class ContentEmbeddingList:
    items: tuple[np.ndarray, ...]
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.items:
            raise ValueError("content embedding list must not be empty")
        widths = {int(np.asarray(e).shape[-1]) for e in self.items}
        if len(widths) != 1:
            raise ValueError(f"content embeddings disagree on width: {sorted(widths)}")
        if self.tags and len(self.tags) != len(self.items):
            raise ValueError("one tag per embedding is required")

    @classmethod
    def of(cls, items: Sequence[np.ndarray], tags: Sequence[str] = ()) -> "ContentEmbeddingList":
        return cls(tuple(np.asarray(e, dtype=np.float64) for e in items), tuple(tags))

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.items[i]

    @property
    def width(self) -> int:
        return int(self.items[0].shape[-1])


@dataclass(frozen=True)
class CyclicSchedule:
    num_sites: int
    num_embeddings: int
    assignment: tuple[int, ...] = field(default=())

    def as_dict(self) -> dict:
        return {"num_sites": self.num_sites, "num_embeddings": self.num_embeddings, "assignment": list(self.assignment)}


def build_schedule(k: int, num_sites: int) -> CyclicSchedule:
    """Site ``i`` receives embedding ``i mod k``.

    More embeddings than sites is rejected: the surplus subjects would never
    be seen by the backbone.
    """
    if k < 1 or num_sites < 1:
        raise ValueError(f"schedule needs k >= 1 and num_sites >= 1, got k={k}, num_sites={num_sites}")
    if k > num_sites:
        raise ValueError(f"{k} content embeddings cannot be spread over {num_sites} sites")
    return CyclicSchedule(num_sites, k, tuple(i % k for i in range(num_sites)))


def embedding_for_site(schedule: CyclicSchedule, embeddings: ContentEmbeddingList, site: int) -> np.ndarray:
    if not 0 <= site < schedule.num_sites:
        raise IndexError(f"site {site} outside [0, {schedule.num_sites})")
    if len(embeddings) != schedule.num_embeddings:
        raise ValueError(
            f"schedule built for {schedule.num_embeddings} embeddings, list holds {len(embeddings)}"
        )
    return embeddings[schedule.assignment[site]]


def extract_content_embeddings(
    image,
    subject_masks: Sequence[np.ndarray],
    encoder: Callable[..., np.ndarray],
    mode: str = "segmentation",
    rng: np.random.Generator | None = None,
) -> ContentEmbeddingList:
    """Encode one embedding per subject mask, or one per augmented view.

    ``encoder(image, mask)`` is the frozen content encoder.  Augmentation mode
    encodes the original, its horizontal flip and a color-jittered copy
    (``rng`` seeds the jitter), each over the union of the masks.
    """
    from . import synthdata

    masks = [np.asarray(m, dtype=bool) for m in subject_masks]
    if not masks:
        raise ValueError("at least one subject mask is required")
    if mode == "segmentation":
        return ContentEmbeddingList.of([encoder(image, m) for m in masks], [f"subject:{i}" for i in range(len(masks))])
    if mode == "augmentation":
        union = np.logical_or.reduce(masks)
        flipped = synthdata.flip_horizontal(image)
        jittered = synthdata.color_jitter(image, rng if rng is not None else np.random.default_rng(0))
        views = [(image, union), (flipped, union[:, ::-1]), (jittered, union)]
        return ContentEmbeddingList.of([encoder(v, m) for v, m in views], ["aug:orig", "aug:flip", "aug:jitter"])
    raise ValueError(f"unknown extraction mode {mode!r}")
