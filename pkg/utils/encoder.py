"""Fragment types and the two fragment encoders.

Sentence fragments (dependency triplets) go through a per-relation affine map
followed by a ReLU; image fragments go through a single linear projection with
no bias and no nonlinearity. Both land in the same h-dimensional space.
"""

from __future__ import annotations

import os
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

from models import InitScheme
from utils.bags import BagStructure
from utils.errors import (
    BagStructureError,
    InputFormatError,
    MissingWordError,
    ShapeError,
    VocabError,
)


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class WordTable:
    """Fixed word -> vector lookup (never trained)."""

    dim_word: int
    entries: Mapping[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.dim_word <= 0:
            raise ShapeError(f"dim_word must be positive, got {self.dim_word}")
        frozen: dict[str, np.ndarray] = {}
        for word, vector in self.entries.items():
            vec = _frozen(vector)
            if vec.shape != (self.dim_word,):
                raise ShapeError(
                    f"vector for {word!r} has shape {vec.shape}, expected ({self.dim_word},)"
                )
            frozen[word] = vec
        object.__setattr__(self, "entries", MappingProxyType(frozen))

    def vector(self, word: str) -> np.ndarray:
        try:
            return self.entries[word]
        except KeyError:
            raise MissingWordError(word) from None

    def __contains__(self, word: object) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def merged(self, other: WordTable) -> WordTable:
        """Union of two tables of equal width; entries of `self` win."""
        if other.dim_word != self.dim_word:
            raise ShapeError(f"cannot merge word tables of width {self.dim_word} and {other.dim_word}")
        return WordTable(self.dim_word, {**other.entries, **self.entries})


def load_word_vectors(path: str | os.PathLike) -> WordTable:
    """Read a `word v1 v2 ... vd` text file. Duplicate words keep their first vector."""
    entries: dict[str, np.ndarray] = {}
    dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise InputFormatError(str(path), lineno, "expected a word followed by its vector")
            word, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise InputFormatError(
                    str(path), lineno, f"vector has {len(values)} values, expected {dim}"
                )
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise InputFormatError(str(path), lineno, str(exc)) from exc
            if not np.all(np.isfinite(vec)):
                raise InputFormatError(str(path), lineno, "non-finite vector entry")
            entries.setdefault(word, vec)
    if dim is None:
        raise InputFormatError(str(path), 0, "word vector file is empty")
    return WordTable(dim, entries)


def write_word_vectors(table: WordTable, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for word, vec in table.entries.items():
            fh.write(word + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def random_word_table(words: Iterable[str], dim: int, seed: int) -> WordTable:
    """Unit-norm gaussian vectors, one per distinct word, in first-seen order."""
    rng = np.random.default_rng(seed)
    entries: dict[str, np.ndarray] = {}
    for word in words:
        if word in entries:
            continue
        vec = rng.standard_normal(dim)
        entries[word] = vec / np.linalg.norm(vec)
    return WordTable(dim, entries)


@dataclass(frozen=True)
class RelationVocab:
    relations: tuple[str, ...]

    def __post_init__(self) -> None:
        names = tuple(self.relations)
        if len(set(names)) != len(names):
            raise VocabError(f"duplicate relation names in {names}")
        object.__setattr__(self, "relations", names)

    def index(self, name: str) -> int:
        try:
            return self.relations.index(name)
        except ValueError:
            raise VocabError(f"unknown relation {name!r}") from None

    def name(self, index: int) -> str:
        if not 0 <= index < len(self.relations):
            raise VocabError(f"relation index {index} outside 0..{len(self.relations) - 1}")
        return self.relations[index]

    def __contains__(self, name: object) -> bool:
        return name in self.relations

    def __len__(self) -> int:
        return len(self.relations)


@dataclass(frozen=True)
class Dims:
    dim_word: int
    embedding_dim: int
    dim_image: int

    def __post_init__(self) -> None:
        for name in ("dim_word", "embedding_dim", "dim_image"):
            if getattr(self, name) <= 0:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class ModelParams:
    """Trainable tensors: per-relation W_R (h x 2d) and b_R (h), plus W_m (h x D_img).

    Arrays are copied on construction and made read-only; updates always build
    a new instance. The same type carries gradients and momentum buffers.
    """

    relations: RelationVocab
    dims: Dims
    W_R: tuple[np.ndarray, ...]
    b_R: tuple[np.ndarray, ...]
    W_m: np.ndarray

    def __post_init__(self) -> None:
        h, d, dim_image = self.dims.embedding_dim, self.dims.dim_word, self.dims.dim_image
        if len(self.W_R) != len(self.relations) or len(self.b_R) != len(self.relations):
            raise VocabError(
                f"expected {len(self.relations)} relation blocks, "
                f"got {len(self.W_R)} weights and {len(self.b_R)} biases"
            )
        W_R = tuple(_frozen(w) for w in self.W_R)
        b_R = tuple(_frozen(b) for b in self.b_R)
        W_m = _frozen(self.W_m)
        for name, w in zip(self.relations.relations, W_R, strict=True):
            if w.shape != (h, 2 * d):
                raise ShapeError(f"W_R[{name}] has shape {w.shape}, expected {(h, 2 * d)}")
        for name, b in zip(self.relations.relations, b_R, strict=True):
            if b.shape != (h,):
                raise ShapeError(f"b_R[{name}] has shape {b.shape}, expected {(h,)}")
        if W_m.shape != (h, dim_image):
            raise ShapeError(f"W_m has shape {W_m.shape}, expected {(h, dim_image)}")
        object.__setattr__(self, "W_R", W_R)
        object.__setattr__(self, "b_R", b_R)
        object.__setattr__(self, "W_m", W_m)

    def tensors(self) -> dict[str, np.ndarray]:
        """Ordered named view: W_R[r], b_R[r] per relation, then W_m."""
        out: dict[str, np.ndarray] = {}
        for name, w, b in zip(self.relations.relations, self.W_R, self.b_R, strict=True):
            out[f"W_R[{name}]"] = w
            out[f"b_R[{name}]"] = b
        out["W_m"] = self.W_m
        return out

    def weight_names(self) -> list[str]:
        """Names of the regularized tensors (biases excluded)."""
        return [name for name in self.tensors() if not name.startswith("b_R")]

    @classmethod
    def from_tensors(
        cls, relations: RelationVocab, dims: Dims, tensors: Mapping[str, np.ndarray]
    ) -> ModelParams:
        try:
            return cls(
                relations=relations,
                dims=dims,
                W_R=tuple(tensors[f"W_R[{r}]"] for r in relations.relations),
                b_R=tuple(tensors[f"b_R[{r}]"] for r in relations.relations),
                W_m=tensors["W_m"],
            )
        except KeyError as exc:
            raise ShapeError(f"missing tensor {exc.args[0]}") from None

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> ModelParams:
        return ModelParams.from_tensors(
            self.relations, self.dims, {k: fn(v) for k, v in self.tensors().items()}
        )

    def combine(
        self, other: ModelParams, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    ) -> ModelParams:
        mine, theirs = self.tensors(), other.tensors()
        if mine.keys() != theirs.keys():
            raise ShapeError("parameter sets have different tensors")
        return ModelParams.from_tensors(
            self.relations, self.dims, {k: fn(mine[k], theirs[k]) for k in mine}
        )

    def zeros_like(self) -> ModelParams:
        return self.map(np.zeros_like)

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(t))) for t in self.tensors().values())

    def squared_weight_norm(self) -> float:
        return float(sum(np.sum(w * w) for w in (*self.W_R, self.W_m)))


def init_params(
    relations: RelationVocab,
    dims: Dims,
    rng: np.random.Generator,
    scheme: InitScheme = InitScheme.scaled_uniform,
) -> ModelParams:
    h, d, dim_image = dims.embedding_dim, dims.dim_word, dims.dim_image

    def draw(rows: int, cols: int) -> np.ndarray:
        if scheme == InitScheme.zeros:
            return np.zeros((rows, cols))
        s = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-s, s, size=(rows, cols))

    W_R = tuple(draw(h, 2 * d) for _ in relations.relations)
    b_R = tuple(np.zeros(h) for _ in relations.relations)
    return ModelParams(relations, dims, W_R, b_R, draw(h, dim_image))


@dataclass(frozen=True)
class SentenceFragment:
    """A (relation, word1, word2) triplet.

    `vector` is set only for averaged-word-vector fragments, which skip the
    relation map and enter the shared space as they are.
    """

    relation: int
    word1: str
    word2: str
    vector: np.ndarray | None = field(default=None, compare=False)


@dataclass(frozen=True)
class ImageFragment:
    features: np.ndarray = field(compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", _frozen(self.features))


@dataclass(frozen=True)
class CorpusItem:
    image_id: str
    image_fragments: tuple[ImageFragment, ...]
    sentences: tuple[tuple[SentenceFragment, ...], ...]


@dataclass(frozen=True)
class Corpus:
    items: tuple[CorpusItem, ...]
    dim_image: int
    relations: RelationVocab

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        for k, item in enumerate(self.items):
            if not item.image_fragments:
                raise BagStructureError(f"item {k} ({item.image_id}) has no image fragments")
            if not item.sentences:
                raise BagStructureError(f"item {k} ({item.image_id}) has no sentences")
            for s, sentence in enumerate(item.sentences):
                if not sentence:
                    raise BagStructureError(f"item {k} sentence {s} has no fragments")
            for frag in item.image_fragments:
                if frag.features.shape != (self.dim_image,):
                    raise ShapeError(
                        f"item {k} ({item.image_id}) has an image fragment of shape "
                        f"{frag.features.shape}, expected ({self.dim_image},)"
                    )

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[CorpusItem]:
        return iter(self.items)

    @property
    def num_sentences(self) -> int:
        return sum(len(item.sentences) for item in self.items)

    def with_items(self, items: Iterable[CorpusItem]) -> Corpus:
        return Corpus(tuple(items), self.dim_image, self.relations)


def encode_sentence_fragment(
    params: ModelParams, table: WordTable, frag: SentenceFragment
) -> np.ndarray:
    if frag.vector is not None:
        vec = np.asarray(frag.vector, dtype=np.float64)
        if vec.shape != (params.dims.embedding_dim,):
            raise ShapeError(
                f"precomputed fragment has shape {vec.shape}, "
                f"expected ({params.dims.embedding_dim},)"
            )
        return vec.copy()
    if not 0 <= frag.relation < len(params.W_R):
        raise VocabError(f"relation index {frag.relation} outside 0..{len(params.W_R) - 1}")
    if table.dim_word != params.dims.dim_word:
        raise ShapeError(f"word table width {table.dim_word} != model d {params.dims.dim_word}")
    e = np.concatenate((table.vector(frag.word1), table.vector(frag.word2)))
    return np.maximum(params.W_R[frag.relation] @ e + params.b_R[frag.relation], 0.0)


def encode_image_fragment(params: ModelParams, frag: ImageFragment) -> np.ndarray:
    if frag.features.shape != (params.dims.dim_image,):
        raise ShapeError(
            f"image fragment has shape {frag.features.shape}, expected ({params.dims.dim_image},)"
        )
    return params.W_m @ frag.features


@dataclass(frozen=True)
class EncodedBatch:
    """Encoder outputs plus the intermediates the gradient pass needs.

    `relation_rows[j]` is -1 for precomputed sentence fragments; their rows in
    `inputs` are zero and their `Z` row equals their `S` row.
    """

    V: np.ndarray
    S: np.ndarray
    bags: BagStructure
    X: np.ndarray
    inputs: np.ndarray
    Z: np.ndarray
    relation_rows: np.ndarray


def encode_batch(
    params: ModelParams, table: WordTable, items: Sequence[CorpusItem]
) -> EncodedBatch:
    """Encode every fragment of `items`, keeping item order and in-item order."""
    if not items:
        raise BagStructureError("cannot encode an empty batch")
    h, d, dim_image = params.dims.embedding_dim, params.dims.dim_word, params.dims.dim_image

    m_v: list[int] = []
    m_s: list[int] = []
    features: list[np.ndarray] = []
    fragments: list[SentenceFragment] = []
    for k, item in enumerate(items):
        for frag in item.image_fragments:
            if frag.features.shape != (dim_image,):
                raise ShapeError(
                    f"image fragment of {item.image_id} has shape {frag.features.shape}, "
                    f"expected ({dim_image},)"
                )
            features.append(frag.features)
            m_v.append(k)
        for sentence in item.sentences:
            for frag in sentence:
                fragments.append(frag)
                m_s.append(k)

    X = np.stack(features) if features else np.zeros((0, dim_image))
    n_s = len(fragments)
    inputs = np.zeros((n_s, 2 * d))
    Z = np.zeros((n_s, h))
    relation_rows = np.full(n_s, -1, dtype=np.int64)
    if any(frag.vector is None for frag in fragments) and table.dim_word != d:
        raise ShapeError(f"word table width {table.dim_word} != model d {d}")
    for j, frag in enumerate(fragments):
        if frag.vector is not None:
            Z[j] = encode_sentence_fragment(params, table, frag)
            continue
        if not 0 <= frag.relation < len(params.W_R):
            raise VocabError(f"relation index {frag.relation} outside 0..{len(params.W_R) - 1}")
        inputs[j, :d] = table.vector(frag.word1)
        inputs[j, d:] = table.vector(frag.word2)
        relation_rows[j] = frag.relation
    for r in np.unique(relation_rows[relation_rows >= 0]):
        rows = np.flatnonzero(relation_rows == r)
        Z[rows] = inputs[rows] @ params.W_R[r].T + params.b_R[r]
    S = np.where(relation_rows[:, None] >= 0, np.maximum(Z, 0.0), Z)
    V = X @ params.W_m.T
    bags = BagStructure(np.array(m_v, dtype=np.int64), np.array(m_s, dtype=np.int64), len(items))
    return EncodedBatch(V=V, S=S, bags=bags, X=X, inputs=inputs, Z=Z, relation_rows=relation_rows)
