"""Bidirectional retrieval evaluation: dense scores, ranks, Recall@K and report rendering."""

from __future__ import annotations

import os
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from models import AlignmentRow, Direction, RetrievalReport
from utils.encoder import Corpus, CorpusItem, ModelParams, WordTable, encode_batch
from utils.errors import EmptyCorpusError, ShapeError
from utils.helper import write_csv
from utils.logging_helper import get_logger

logger = get_logger("eval")

DIRECTION_TITLES = {
    Direction.image_annotation: "Image Annotation",
    Direction.image_search: "Image Search",
}


@dataclass(frozen=True)
class ScoreTable:
    """Image x sentence scores; `owners[l]` is the image that sentence l describes."""

    scores: np.ndarray
    owners: np.ndarray


def _chunks(n: int, parts: int) -> list[range]:
    bounds = np.linspace(0, n, min(parts, n) + 1).astype(int)
    return [range(a, b) for a, b in zip(bounds[:-1], bounds[1:], strict=True) if b > a]


def dense_scores(
    params: ModelParams,
    table: WordTable,
    corpus: Corpus,
    n: float,
    threads: int = 1,
) -> ScoreTable:
    """Smoothed image-sentence score for every (image, sentence) pair of `corpus`.

    Images are split into contiguous blocks, one per worker thread; blocks are
    reassembled in input order.
    """
    if len(corpus) == 0:
        raise EmptyCorpusError("cannot score an empty split")
    batch = encode_batch(params, table, corpus.items)
    lengths = np.array([len(s) for item in corpus.items for s in item.sentences])
    owners = np.array([k for k, item in enumerate(corpus.items) for _ in item.sentences])
    sentence_starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    image_starts = batch.bags.image_starts
    image_counts = batch.bags.image_counts

    def score_block(images: range) -> np.ndarray:
        lo = image_starts[images.start]
        hi = lo + image_counts[images.start : images.stop].sum()
        K = np.maximum(0.0, batch.V[lo:hi] @ batch.S.T)
        per_sentence = np.add.reduceat(K, sentence_starts, axis=1)
        per_pair = np.add.reduceat(per_sentence, image_starts[images.start : images.stop] - lo, axis=0)
        return per_pair / np.outer(image_counts[images.start : images.stop], lengths + n)

    blocks = _chunks(len(corpus), max(1, threads))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(score_block, blocks))
    else:
        parts = [score_block(b) for b in blocks]
    return ScoreTable(scores=np.vstack(parts), owners=owners)


def rank_queries(S: np.ndarray, owners: np.ndarray, direction: Direction) -> np.ndarray:
    """1-based rank of the best ground-truth candidate for every query.

    Ties are pessimistic: a ground truth ranks behind every other candidate
    scoring at least as high.
    """
    S = np.asarray(S, dtype=np.float64)
    owners = np.asarray(owners, dtype=np.int64)
    if S.ndim != 2 or S.shape[1] != owners.size:
        raise ShapeError(f"score matrix {S.shape} does not match {owners.size} sentence owners")
    n_images = S.shape[0]
    if owners.size and (owners.min() < 0 or owners.max() >= n_images):
        raise ShapeError(f"sentence owners reference images outside 0..{n_images - 1}")
    truth = owners[None, :] == np.arange(n_images)[:, None]

    if direction == Direction.image_annotation:
        if not np.all(truth.any(axis=1)):
            k = int(np.flatnonzero(~truth.any(axis=1))[0])
            raise ShapeError(f"image {k} has no ground-truth sentence")
        best = np.max(np.where(truth, S, -np.inf), axis=1)
        return 1 + np.sum(~truth & (S >= best[:, None]), axis=1)

    truth_scores = S[owners, np.arange(owners.size)]
    return 1 + np.sum(~truth & (S >= truth_scores[None, :]), axis=0)


def summarize(ranks: Sequence[int] | np.ndarray, ks: Sequence[int], direction: Direction) -> RetrievalReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("cannot summarize an empty rank list")
    return RetrievalReport(
        direction=direction,
        recall_at={int(k): float(np.mean(ranks <= k)) for k in sorted(ks)},
        median_rank=float(np.median(ranks)),
        mean_rank=float(np.mean(ranks)),
        ranks=ranks.tolist(),
    )


def evaluate_scores(table: ScoreTable, ks: Sequence[int]) -> list[RetrievalReport]:
    return [
        summarize(rank_queries(table.scores, table.owners, direction), ks, direction)
        for direction in Direction
    ]


def average_reports(runs: Sequence[Sequence[RetrievalReport]]) -> list[RetrievalReport]:
    """Average R@K, median and mean rank over repeated runs, per direction.

    The ranks of all runs are pooled in run order.
    """
    averaged: list[RetrievalReport] = []
    for direction in Direction:
        picked = [next(r for r in run if r.direction == direction) for run in runs]
        if not picked:
            raise ValueError("cannot average zero runs")
        averaged.append(
            RetrievalReport(
                direction=direction,
                recall_at={
                    k: float(np.mean([r.recall_at[k] for r in picked])) for k in picked[0].recall_at
                },
                median_rank=float(np.mean([r.median_rank for r in picked])),
                mean_rank=float(np.mean([r.mean_rank for r in picked])),
                ranks=[rank for r in picked for rank in r.ranks],
            )
        )
    return averaged


def hodosh_subset(corpus: Corpus) -> Corpus:
    """Keep only the first sentence of every item."""
    return corpus.with_items(
        CorpusItem(item.image_id, item.image_fragments, item.sentences[:1]) for item in corpus.items
    )


def random_ranking(
    n_images: int, owners: np.ndarray, ks: Sequence[int], rng: np.random.Generator
) -> list[RetrievalReport]:
    """Reports for uniformly random scores over the same queries."""
    scores = rng.random((n_images, np.asarray(owners).size))
    return evaluate_scores(ScoreTable(scores, np.asarray(owners)), ks)


def alignment_accuracy(
    params: ModelParams,
    table: WordTable,
    corpus: Corpus,
    alignments: Sequence[AlignmentRow],
    item_ids: Sequence[str],
) -> float:
    """Fraction of planted triplets whose best-scoring fragment in their own image is the planted one.

    `item_ids[i]` is the image id of alignment item i; alignments of images
    missing from `corpus` are ignored. Triplets are those of each item's first
    sentence.
    """
    by_id = {item.image_id: item for item in corpus.items}
    hits = total = 0
    for row in alignments:
        item = by_id.get(item_ids[row.item]) if 0 <= row.item < len(item_ids) else None
        if item is None:
            continue
        sentence = item.sentences[0]
        if not (0 <= row.triplet_index < len(sentence)) or not (
            0 <= row.fragment_index < len(item.image_fragments)
        ):
            raise ShapeError(
                f"alignment {row.item},{row.triplet_index},{row.fragment_index} "
                f"does not fit item {item.image_id}"
            )
        single = CorpusItem(item.image_id, item.image_fragments, (sentence,))
        batch = encode_batch(params, table, [single])
        scores = batch.V @ batch.S[row.triplet_index]
        hits += int(np.argmax(scores)) == row.fragment_index
        total += 1
    if total == 0:
        raise EmptyCorpusError("no ground-truth alignment refers to an evaluated item")
    return hits / total


def _report_cells(reports: Sequence[RetrievalReport], ks: Sequence[int]) -> list[str]:
    cells: list[str] = []
    for direction in Direction:
        report = next(r for r in reports if r.direction == direction)
        cells += [f"{100 * report.recall_at[k]:.1f}" for k in ks]
        cells += [f"{report.median_rank:g}", f"{report.mean_rank:.1f}"]
    return cells


def format_report_table(
    rows: Sequence[tuple[str, Sequence[RetrievalReport]]],
    n_images: int,
    n_sentences: int,
    ks: Sequence[int],
) -> str:
    """Aligned text table: one row per model, R@K (percent), Med r and Mean r per direction."""
    metric_names = [f"R@{k}" for k in ks] + ["Med r", "Mean r"]
    header = ["Model"] + metric_names * len(Direction)
    body = [[name, *_report_cells(reports, ks)] for name, reports in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]

    group_width = sum(widths[1 : 1 + len(metric_names)]) + 2 * (len(metric_names) - 1)
    banner = " " * widths[0] + "  " + "  ".join(
        DIRECTION_TITLES[d].ljust(group_width) for d in Direction
    )

    def line(cells: list[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:], strict=True)]
        return "  ".join([first, *rest]).rstrip()

    lines = [f"images={n_images} sentences={n_sentences}", banner.rstrip(), line(header)]
    lines.append("-" * len(lines[-1]))
    lines += [line(r) for r in body]
    return "\n".join(lines) + "\n"


def write_report_csv(
    path: str | os.PathLike,
    rows: Sequence[tuple[str, Sequence[RetrievalReport]]],
    ks: Sequence[int],
) -> Path:
    header = ["model", "direction", *[f"R@{k}" for k in ks], "median_rank", "mean_rank", "queries"]
    return write_csv(
        path,
        header,
        (
            [
                name,
                report.direction.value,
                *[repr(report.recall_at[k]) for k in ks],
                repr(report.median_rank),
                repr(report.mean_rank),
                len(report.ranks),
            ]
            for name, reports in rows
            for report in reports
        ),
    )
