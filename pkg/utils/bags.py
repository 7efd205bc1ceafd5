from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from utils.errors import BagStructureError


@dataclass(frozen=True)
class BagStructure:
    """Ownership of fragment rows in an encoded batch.

    `m_v[i]` is the batch item owning image-fragment row i and `m_s[j]` the
    item owning sentence-fragment row j. Rows of one item are contiguous and
    items appear in batch order, so both maps are non-decreasing.
    """

    m_v: np.ndarray
    m_s: np.ndarray
    num_items: int

    def __post_init__(self) -> None:
        m_v = np.asarray(self.m_v, dtype=np.int64)
        m_s = np.asarray(self.m_s, dtype=np.int64)
        for name, rows in (("m_v", m_v), ("m_s", m_s)):
            if rows.ndim != 1:
                raise BagStructureError(f"{name} must be one-dimensional")
            if rows.size and (rows.min() < 0 or rows.max() >= self.num_items):
                raise BagStructureError(f"{name} references an item outside 0..{self.num_items - 1}")
            if np.any(np.diff(rows) < 0):
                raise BagStructureError(f"{name} rows are not grouped by item")
        m_v.flags.writeable = False
        m_s.flags.writeable = False
        object.__setattr__(self, "m_v", m_v)
        object.__setattr__(self, "m_s", m_s)

    @property
    def n_v(self) -> int:
        return int(self.m_v.size)

    @property
    def n_s(self) -> int:
        return int(self.m_s.size)

    @cached_property
    def image_counts(self) -> np.ndarray:
        return np.bincount(self.m_v, minlength=self.num_items)

    @cached_property
    def sentence_counts(self) -> np.ndarray:
        return np.bincount(self.m_s, minlength=self.num_items)

    @cached_property
    def same_item(self) -> np.ndarray:
        """n_v x n_s mask, True where both fragments belong to the same item."""
        return self.m_v[:, None] == self.m_s[None, :]

    def positive_bag(self, j: int) -> np.ndarray:
        """p_j: image-fragment rows sharing the item of sentence-fragment row j."""
        return np.flatnonzero(self.m_v == self.m_s[j])

    @property
    def p(self) -> list[np.ndarray]:
        return [self.positive_bag(j) for j in range(self.n_s)]

    def image_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.m_v == k)

    def sentence_rows(self, l: int) -> np.ndarray:  # noqa: E741
        return np.flatnonzero(self.m_s == l)

    def require_non_empty(self) -> None:
        """Every item must own at least one image and one sentence fragment."""
        if np.any(self.image_counts == 0):
            k = int(np.flatnonzero(self.image_counts == 0)[0])
            raise BagStructureError(f"item {k} has no image fragments")
        if np.any(self.sentence_counts == 0):
            k = int(np.flatnonzero(self.sentence_counts == 0)[0])
            raise BagStructureError(f"item {k} has no sentence fragments")

    @cached_property
    def image_starts(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.image_counts)[:-1]))

    @cached_property
    def sentence_starts(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.sentence_counts)[:-1]))
