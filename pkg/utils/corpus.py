"""Corpus files, preprocessing and the synthetic planted-alignment generator."""

from __future__ import annotations

import csv
import os
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from models import (
    AlignmentRow,
    CorpusDims,
    CorpusHeader,
    FragmentMode,
    RawRecord,
    RawSentence,
    SplitSpec,
    SyntheticSpec,
)
from utils.encoder import (
    Corpus,
    CorpusItem,
    ImageFragment,
    RelationVocab,
    SentenceFragment,
    WordTable,
    random_word_table,
)
from utils.errors import ConfigError, EmptyCorpusError, InputFormatError
from utils.helper import write_csv
from utils.logging_helper import get_logger

logger = get_logger("data")

BOW_RELATION = "__BOW__"
BIGRAM_RELATION = "__BIGRAM__"
SYNTHETIC_RELATIONS = ("amod", "nsubj", "dobj")
TOKEN_MODES = frozenset({FragmentMode.bow, FragmentMode.bigram, FragmentMode.devise})


# --- files -----------------------------------------------------------------


def read_corpus(path: str | os.PathLike) -> tuple[int, list[RawRecord]]:
    """Read a JSON-lines corpus: a `{"dims": {"D_img": ...}}` header, then one record per line.

    Returns the image feature width and the records in file order.
    """
    records: list[RawRecord] = []
    dim_image: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                if dim_image is None:
                    dim_image = CorpusHeader.model_validate_json(line).dims.dim_image
                    continue
                record = RawRecord.model_validate_json(line)
            except ValidationError as exc:
                raise InputFormatError(str(path), lineno, exc.errors()[0]["msg"]) from exc
            for fragment in record.image_fragments:
                if len(fragment) != dim_image:
                    raise InputFormatError(
                        str(path),
                        lineno,
                        f"image fragment of {record.image_id} has {len(fragment)} values, "
                        f"expected D_img={dim_image}",
                    )
            if not record.image_fragments:
                raise InputFormatError(str(path), lineno, f"{record.image_id} has no image fragments")
            records.append(record)
    if dim_image is None:
        raise InputFormatError(str(path), 0, "missing dims header")
    if not records:
        raise InputFormatError(str(path), 0, "corpus has no records")
    return dim_image, records


def write_corpus(path: str | os.PathLike, dim_image: int, records: Sequence[RawRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    header = CorpusHeader(dims=CorpusDims(dim_image=dim_image))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header.model_dump_json(by_alias=True) + "\n")
        for record in records:
            fh.write(record.model_dump_json() + "\n")


def write_alignments(path: str | os.PathLike, rows: Sequence[AlignmentRow]) -> Path:
    return write_csv(
        path,
        ["item", "triplet_index", "fragment_index"],
        ([row.item, row.triplet_index, row.fragment_index] for row in rows),
    )


def read_alignments(path: str | os.PathLike) -> list[AlignmentRow]:
    rows: list[AlignmentRow] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["item", "triplet_index", "fragment_index"]:
            raise InputFormatError(str(path), 1, f"unexpected header {reader.fieldnames}")
        for lineno, raw in enumerate(reader, start=2):
            try:
                rows.append(AlignmentRow.model_validate(raw))
            except ValidationError as exc:
                raise InputFormatError(str(path), lineno, exc.errors()[0]["msg"]) from exc
    return rows


# --- preprocessing -----------------------------------------------------------


def _keep_sentences(
    records: Sequence[RawRecord], sentences: list[list[RawSentence]], stage: str
) -> list[RawRecord]:
    """Rebuild records from filtered sentences, dropping records left without any."""
    kept: list[RawRecord] = []
    dropped_records = 0
    for record, survivors in zip(records, sentences, strict=True):
        if survivors:
            kept.append(record.model_copy(update={"sentences": survivors}))
        else:
            dropped_records += 1
            logger.info("%s: dropped record %s (no sentences left)", stage, record.image_id)
    if dropped_records:
        logger.info("%s: dropped %d of %d records", stage, dropped_records, len(records))
    if not kept:
        raise EmptyCorpusError(f"{stage} removed every sentence")
    return kept


def _sentence_source(sentence: RawSentence, mode: FragmentMode) -> list:
    return sentence.tokens if mode in TOKEN_MODES else sentence.triplets


def prune_relations(
    records: Sequence[RawRecord], min_frac: float
) -> tuple[RelationVocab, list[RawRecord]]:
    """Drop relation types covering less than `min_frac` of all triplets.

    Surviving relation names, sorted, form the vocabulary. Sentences left
    without triplets are dropped.
    """
    if not 0 <= min_frac < 1:
        raise ConfigError(f"min_frac must be in [0, 1), got {min_frac}")
    counts = Counter(rel for r in records for s in r.sentences for rel, _, _ in s.triplets)
    total = sum(counts.values())
    keep = {rel for rel, c in counts.items() if c >= min_frac * total}
    removed = sorted(set(counts) - keep)
    if removed:
        logger.info(
            "pruned %d of %d relation types below %.2f%%: %s",
            len(removed),
            len(counts),
            100 * min_frac,
            ", ".join(removed),
        )

    sentences: list[list[RawSentence]] = []
    dropped = 0
    for record in records:
        survivors = []
        for sentence in record.sentences:
            triplets = [t for t in sentence.triplets if t[0] in keep]
            if triplets:
                survivors.append(sentence.model_copy(update={"triplets": triplets}))
            else:
                dropped += 1
        sentences.append(survivors)
    if dropped:
        logger.info("relation pruning dropped %d sentences", dropped)
    return RelationVocab(tuple(sorted(keep))), _keep_sentences(records, sentences, "relation pruning")


def restrict_relations(records: Sequence[RawRecord], vocab: RelationVocab) -> list[RawRecord]:
    """Keep only triplets whose relation is in `vocab` (a vocabulary fitted elsewhere)."""
    sentences: list[list[RawSentence]] = []
    dropped = 0
    for record in records:
        survivors = []
        for sentence in record.sentences:
            triplets = [t for t in sentence.triplets if t[0] in vocab]
            if triplets:
                survivors.append(sentence.model_copy(update={"triplets": triplets}))
            else:
                dropped += 1
        sentences.append(survivors)
    if dropped:
        logger.info("relation restriction dropped %d sentences", dropped)
    return _keep_sentences(records, sentences, "relation restriction")


def filter_dictionary(
    records: Sequence[RawRecord],
    table: WordTable,
    mode: FragmentMode = FragmentMode.triplets,
) -> list[RawRecord]:
    """Remove triplets and tokens containing words missing from `table`.

    A sentence is dropped when nothing usable by `mode` survives.
    """
    sentences: list[list[RawSentence]] = []
    dropped = 0
    for record in records:
        survivors = []
        for sentence in record.sentences:
            filtered = RawSentence(
                tokens=[t for t in sentence.tokens if t in table],
                triplets=[t for t in sentence.triplets if t[1] in table and t[2] in table],
            )
            if _sentence_source(filtered, mode) or not _sentence_source(sentence, mode):
                survivors.append(filtered)
            else:
                dropped += 1
        sentences.append(survivors)
    if dropped:
        logger.info("dictionary filtering dropped %d sentences", dropped)
    return _keep_sentences(records, sentences, "dictionary filtering")


def _token_fragments(
    tokens: list[str], mode: FragmentMode, table: WordTable | None, image_id: str
) -> tuple[SentenceFragment, ...]:
    if not tokens:
        raise InputFormatError(image_id, 0, f"{mode} fragments need tokens, sentence has none")
    if mode == FragmentMode.bow:
        return tuple(SentenceFragment(0, t, t) for t in tokens)
    if mode == FragmentMode.bigram:
        return tuple(SentenceFragment(0, a, b) for a, b in zip(tokens, tokens[1:], strict=False))
    if table is None:
        raise ConfigError("devise fragments need a word table")
    vectors = np.stack([table.vector(t) for t in tokens])
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0)
    return (SentenceFragment(-1, tokens[0], tokens[-1], vector=unit.mean(axis=0)),)


def build_fragments(
    records: Sequence[RawRecord],
    mode: FragmentMode,
    dim_image: int,
    *,
    vocab: RelationVocab | None = None,
    table: WordTable | None = None,
) -> Corpus:
    """Turn preprocessed records into encoder-ready fragments.

    `vocab` is required for triplet-based modes; devise needs `table` to
    average the token vectors.
    """
    if mode in (FragmentMode.triplets, FragmentMode.fullframe_only):
        if vocab is None:
            raise ConfigError(f"{mode} fragments need a relation vocabulary")
        relations = vocab
    elif mode == FragmentMode.bow:
        relations = RelationVocab((BOW_RELATION,))
    elif mode == FragmentMode.bigram:
        relations = RelationVocab((BIGRAM_RELATION,))
    else:
        relations = RelationVocab(())

    items: list[CorpusItem] = []
    dropped = 0
    for record in records:
        features = np.asarray(record.image_fragments, dtype=np.float64)
        if mode == FragmentMode.fullframe_only:
            features = features[-1:]
        elif mode == FragmentMode.devise:
            features = features.mean(axis=0, keepdims=True)

        sentences: list[tuple[SentenceFragment, ...]] = []
        for sentence in record.sentences:
            if mode in TOKEN_MODES:
                fragments = _token_fragments(sentence.tokens, mode, table, record.image_id)
            else:
                fragments = tuple(
                    SentenceFragment(relations.index(rel), w1, w2)
                    for rel, w1, w2 in sentence.triplets
                )
            if fragments:
                sentences.append(fragments)
            else:
                dropped += 1
        if not sentences:
            logger.info("fragment building dropped record %s (no fragments)", record.image_id)
            continue
        items.append(
            CorpusItem(
                image_id=record.image_id,
                image_fragments=tuple(ImageFragment(f) for f in features),
                sentences=tuple(sentences),
            )
        )
    if dropped:
        logger.info("fragment building dropped %d sentences without fragments", dropped)
    if not items:
        raise EmptyCorpusError(f"no record yields {mode} fragments")
    return Corpus(tuple(items), dim_image, relations)


def split_records(
    records: Sequence[RawRecord], split: SplitSpec
) -> tuple[list[RawRecord], list[RawRecord], list[RawRecord]]:
    """Seeded train/val/test split; each part keeps corpus order.

    `split.train=None` puts every record not claimed by val/test into train.
    """
    n = len(records)
    train = n - split.val - split.test if split.train is None else split.train
    if train < 0 or train + split.val + split.test > n:
        raise ConfigError(
            f"split train={train} val={split.val} test={split.test} exceeds {n} records"
        )
    order = np.random.default_rng(split.seed).permutation(n)
    bounds = np.cumsum([train, split.val, split.test])
    train_idx, val_idx, test_idx = np.split(order, bounds)[:3]
    return (
        [records[i] for i in np.sort(train_idx)],
        [records[i] for i in np.sort(val_idx)],
        [records[i] for i in np.sort(test_idx)],
    )


# --- synthetic corpus --------------------------------------------------------


@dataclass(frozen=True)
class SyntheticCorpus:
    dim_image: int
    records: list[RawRecord]
    table: WordTable
    alignments: list[AlignmentRow]


def concept_words(concept: int) -> tuple[str, str]:
    return f"concept{concept}_mod", f"concept{concept}_head"


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Planted-alignment corpus.

    Each concept has a unit prototype in image-feature space and a fixed word
    pair. An item shows `fragments_per_image` distinct concepts (prototype plus
    gaussian noise) and its sentence names `triplets_per_sentence` of them. With
    `fullframe` set, the mean of the object fragments is appended last as the
    whole-image fragment.
    """
    if spec.fragments_per_image > spec.num_concepts:
        raise ConfigError(
            f"fragments_per_image ({spec.fragments_per_image}) must be <= "
            f"num_concepts ({spec.num_concepts})"
        )
    if spec.triplets_per_sentence > spec.fragments_per_image:
        raise ConfigError(
            f"triplets_per_sentence ({spec.triplets_per_sentence}) must be <= "
            f"fragments_per_image ({spec.fragments_per_image})"
        )

    rng = np.random.default_rng(spec.seed)
    prototypes = rng.standard_normal((spec.num_concepts, spec.dim_image))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    words = [w for c in range(spec.num_concepts) for w in concept_words(c)]
    table = random_word_table(words, spec.dim_word, int(rng.integers(2**63)))

    records: list[RawRecord] = []
    alignments: list[AlignmentRow] = []
    for item in range(spec.num_items):
        concepts = rng.choice(spec.num_concepts, size=spec.fragments_per_image, replace=False)
        noise = rng.standard_normal((spec.fragments_per_image, spec.dim_image))
        features = prototypes[concepts] + spec.noise_sigma * noise
        if spec.fullframe:
            features = np.vstack((features, features.mean(axis=0)))
        positions = rng.choice(spec.fragments_per_image, size=spec.triplets_per_sentence, replace=False)

        triplets: list[tuple[str, str, str]] = []
        tokens: list[str] = []
        for t, pos in enumerate(positions):
            concept = int(concepts[pos])
            mod, head = concept_words(concept)
            triplets.append((SYNTHETIC_RELATIONS[concept % len(SYNTHETIC_RELATIONS)], mod, head))
            tokens.extend((mod, head))
            alignments.append(AlignmentRow(item=item, triplet_index=t, fragment_index=int(pos)))
        records.append(
            RawRecord(
                image_id=f"synth-{item:05d}",
                image_fragments=features.tolist(),
                sentences=[RawSentence(tokens=tokens, triplets=triplets)],
            )
        )
    logger.info(
        "generated %d synthetic items over %d concepts (seed %d)",
        spec.num_items,
        spec.num_concepts,
        spec.seed,
    )
    return SyntheticCorpus(spec.dim_image, records, table, alignments)
