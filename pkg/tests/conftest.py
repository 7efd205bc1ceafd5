import logging
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from models import RunConfig, SplitSpec, SyntheticSpec, TrainConfig
from task import run_generate
from utils.bags import BagStructure
from utils.encoder import (
    CorpusItem,
    Dims,
    ImageFragment,
    ModelParams,
    RelationVocab,
    SentenceFragment,
    WordTable,
)

logger = logging.getLogger(__name__)

# small enough for second-scale CLI runs, large enough to split
SMALL_SYNTHETIC = SyntheticSpec(
    num_items=24,
    num_concepts=12,
    fragments_per_image=3,
    triplets_per_sentence=2,
    noise_sigma=0.1,
    dim_image=6,
    dim_word=8,
    seed=3,
)


@pytest.fixture(autouse=True)
def log_to_tmp(monkeypatch, tmp_path) -> None:
    """Keep CLI log files out of the working directory."""
    monkeypatch.setenv("FRAGALIGN_LOG_FILE", str(tmp_path / "fragalign.log"))
    monkeypatch.delenv("FRAGALIGN_OUTPUT_DIR", raising=False)


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def word_table() -> WordTable:
    """Four 2-d words used by hand-computed encoder examples."""
    return WordTable(
        2,
        {
            "a": np.array([1.0, -2.0]),
            "b": np.array([3.0, 0.0]),
            "c": np.array([0.0, 1.0]),
            "d": np.array([1.0, 1.0]),
        },
    )


@pytest.fixture
def make_params() -> Callable[..., ModelParams]:
    """Return a helper building ModelParams from explicit tensors."""

    def _make_params(
        W_R: Sequence[Sequence[Sequence[float]]],
        b_R: Sequence[Sequence[float]],
        W_m: Sequence[Sequence[float]],
        dim_word: int | None = None,
    ) -> ModelParams:
        W_m = np.asarray(W_m, dtype=np.float64)
        W_R = [np.asarray(w, dtype=np.float64) for w in W_R]
        d = dim_word if dim_word is not None else W_R[0].shape[1] // 2
        relations = RelationVocab(tuple(f"r{i}" for i in range(len(W_R))))
        dims = Dims(dim_word=d, embedding_dim=W_m.shape[0], dim_image=W_m.shape[1])
        return ModelParams(relations, dims, tuple(W_R), tuple(np.asarray(b) for b in b_R), W_m)

    return _make_params


@pytest.fixture
def make_item() -> Callable[..., CorpusItem]:
    """Return a helper building a CorpusItem from feature rows and (relation, w1, w2) sentences."""

    def _make_item(
        image_fragments: Sequence[Sequence[float]],
        *sentences: Sequence[tuple[int, str, str]],
        image_id: str = "item",
    ) -> CorpusItem:
        return CorpusItem(
            image_id=image_id,
            image_fragments=tuple(ImageFragment(np.asarray(f, dtype=np.float64)) for f in image_fragments),
            sentences=tuple(tuple(SentenceFragment(*t) for t in s) for s in sentences),
        )

    return _make_item


@pytest.fixture
def make_bags() -> Callable[[Sequence[int], Sequence[int]], BagStructure]:
    """Return a helper building bags from per-item image and sentence fragment counts."""

    def _make_bags(image_counts: Sequence[int], sentence_counts: Sequence[int]) -> BagStructure:
        m_v = np.repeat(np.arange(len(image_counts)), image_counts)
        m_s = np.repeat(np.arange(len(sentence_counts)), sentence_counts)
        return BagStructure(m_v, m_s, len(image_counts))

    return _make_bags


@pytest.fixture
def synthetic_dir(tmp_path) -> Path:
    """A small generated corpus (corpus.jsonl, word_vectors.txt, alignments.csv)."""
    out = tmp_path / "data"
    result = run_generate(SMALL_SYNTHETIC, out)
    logger.info("small synthetic corpus: %d items in %s", result.n_items, out)
    return out


@pytest.fixture
def small_run_config(synthetic_dir, tmp_path) -> Callable[..., RunConfig]:
    """Return a helper building a quick RunConfig over the small synthetic corpus."""

    def _small_run_config(output: str = "run", **overrides) -> RunConfig:
        config = RunConfig(
            train=TrainConfig(batch_size=8, epochs=3, mil_start_epoch=1, anneal_last_epochs=1, seed=5),
            embedding_dim=8,
            split=SplitSpec(val=4, test=8, seed=1),
        )
        return config.with_overrides(
            {
                "paths.corpus": str(synthetic_dir / "corpus.jsonl"),
                "paths.word_vectors": str(synthetic_dir / "word_vectors.txt"),
                "paths.output_dir": str(tmp_path / output),
                **overrides,
            }
        )

    return _small_run_config
