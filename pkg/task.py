from __future__ import annotations

import os
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from models import (
    AblationResult,
    AblationRow,
    EpochTrace,
    EvalConfig,
    EvalResult,
    EvalSettings,
    FragmentMode,
    GenerateResult,
    GradCheckReport,
    ObjectiveConfig,
    ObjectiveMode,
    RawRecord,
    RetrievalReport,
    RunConfig,
    SplitSpec,
    SyntheticSpec,
    TrainResult,
)
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.corpus import (
    build_fragments,
    filter_dictionary,
    generate_synthetic,
    prune_relations,
    read_alignments,
    read_corpus,
    restrict_relations,
    split_records,
    write_alignments,
    write_corpus,
)
from utils.encoder import (
    Corpus,
    CorpusItem,
    Dims,
    ImageFragment,
    ModelParams,
    RelationVocab,
    SentenceFragment,
    WordTable,
    init_params,
    load_word_vectors,
    random_word_table,
    write_word_vectors,
)
from utils.errors import ConfigError, EmptyCorpusError, ShapeError, StageError
from utils.evaluation import (
    alignment_accuracy,
    average_reports,
    dense_scores,
    evaluate_scores,
    format_report_table,
    hodosh_subset,
    random_ranking,
    write_report_csv,
)
from utils.helper import sanitize_dirname, write_csv
from utils.logging_helper import get_logger
from utils.optimizer import EpochCallback, grad_check, train

OUTPUT_DIR = os.getenv("FRAGALIGN_OUTPUT_DIR")
THREADS = int(os.getenv("FRAGALIGN_THREADS", "1"))
LOG_FILE = os.getenv("FRAGALIGN_LOG_FILE", "fragalign.log")

CORPUS_FILE = "corpus.jsonl"
WORD_VECTORS_FILE = "word_vectors.txt"
ALIGNMENTS_FILE = "alignments.csv"
CHECKPOINT_FILE = "model.ckpt"
TRACE_FILE = "loss_trace.csv"
CONFIG_FILE = "run_config.yaml"
SPEC_FILE = "synthetic_spec.yaml"
EVAL_CONFIG_FILE = "eval_config.yaml"
REPORT_FILE = "report.txt"
REPORT_CSV_FILE = "report.csv"
ABLATION_FILE = "ablation.txt"
ABLATION_CSV_FILE = "ablation.csv"

RANDOM_RANKING = "Random Ranking"
RELATION_MODES = frozenset({FragmentMode.triplets, FragmentMode.fullframe_only})

OBJECTIVE_LABELS = {
    ObjectiveMode.fragment_only: "Fragment Alignment Objective",
    ObjectiveMode.global_only: "Global Ranking Objective",
    ObjectiveMode.combined_dense: "Fragment + Global",
    ObjectiveMode.combined_mil: "Fragment + Global + MIL",
}
FRAGMENT_LABELS = {
    FragmentMode.fullframe_only: "Images: Fullframe Only",
    FragmentMode.bow: "Sentences: BOW",
    FragmentMode.bigram: "Sentences: Bigrams",
    FragmentMode.devise: "DeViSE",
}

ABLATION_VARIANTS: tuple[tuple[str, dict[str, str]], ...] = (
    ("Fragment Alignment Objective", {"objective.mode": "fragment_only"}),
    ("Global Ranking Objective", {"objective.mode": "global_only"}),
    ("Fragment + Global", {"objective.mode": "combined_dense"}),
    ("Fragment + Global + MIL", {"objective.mode": "combined_mil"}),
    ("Images: Fullframe Only", {"objective.mode": "combined_mil", "fragment_mode": "fullframe_only"}),
    ("Sentences: BOW", {"objective.mode": "combined_mil", "fragment_mode": "bow"}),
    ("Sentences: Bigrams", {"objective.mode": "combined_mil", "fragment_mode": "bigram"}),
    ("DeViSE", {"objective.mode": "global_only", "fragment_mode": "devise"}),
)

logger = get_logger("task")


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Tag any failure inside the block with the pipeline stage it happened in."""
    try:
        yield
    except StageError:
        raise
    except (ValueError, KeyError, RuntimeError, OSError) as exc:
        logger.exception("%s stage failed: %s", name, exc)
        raise StageError(name, exc) from exc


def model_label(config: RunConfig) -> str:
    return FRAGMENT_LABELS.get(config.fragment_mode) or OBJECTIVE_LABELS[config.objective.mode]


def resolve_output_dir(output_dir: str | None) -> Path:
    chosen = output_dir or OUTPUT_DIR
    if not chosen:
        raise ConfigError("no output directory given (flag, config file or FRAGALIGN_OUTPUT_DIR)")
    return Path(chosen)


# --- generate ----------------------------------------------------------------


def run_generate(spec: SyntheticSpec, output_dir: str | os.PathLike) -> GenerateResult:
    out = Path(output_dir)
    with stage("generate"):
        synthetic = generate_synthetic(spec)
        corpus_path = out / CORPUS_FILE
        vectors_path = out / WORD_VECTORS_FILE
        write_corpus(corpus_path, synthetic.dim_image, synthetic.records)
        write_word_vectors(synthetic.table, vectors_path)
        alignments_path = write_alignments(out / ALIGNMENTS_FILE, synthetic.alignments)
        spec_path = out / SPEC_FILE
        spec_path.write_text(spec.to_yaml(), encoding="utf-8")
    logger.info("wrote synthetic corpus to %s", corpus_path)
    return GenerateResult(
        corpus_path=str(corpus_path),
        word_vectors_path=str(vectors_path),
        alignments_path=str(alignments_path),
        spec_path=str(spec_path),
        n_items=len(synthetic.records),
        n_image_fragments=sum(len(r.image_fragments) for r in synthetic.records),
        n_triplets=len(synthetic.alignments),
    )


# --- data preparation --------------------------------------------------------


@dataclass(frozen=True)
class CorpusInputs:
    dim_image: int
    records: list[RawRecord]
    table: WordTable


def load_inputs(corpus: str | None, word_vectors: str | None) -> CorpusInputs:
    if not corpus:
        raise ConfigError("a corpus path is required")
    if not word_vectors:
        raise ConfigError("a word vector path is required")
    dim_image, records = read_corpus(corpus)
    table = load_word_vectors(word_vectors)
    logger.info(
        "loaded %d records (D_img=%d) from %s and %d word vectors (d=%d) from %s",
        len(records),
        dim_image,
        corpus,
        len(table),
        table.dim_word,
        word_vectors,
    )
    return CorpusInputs(dim_image, records, table)


def build_corpus(
    records: Sequence[RawRecord],
    config: RunConfig,
    inputs: CorpusInputs,
    vocab: RelationVocab | None,
) -> Corpus:
    """Restrict to `vocab`, drop out-of-dictionary words and build fragments."""
    mode = config.fragment_mode
    if mode in RELATION_MODES:
        if vocab is None:
            raise ConfigError(f"{mode} fragments need a relation vocabulary")
        records = restrict_relations(records, vocab)
    records = filter_dictionary(records, inputs.table, mode)
    return build_fragments(
        records,
        mode,
        inputs.dim_image,
        vocab=vocab if mode in RELATION_MODES else None,
        table=inputs.table,
    )


def select_split(records: Sequence[RawRecord], split: SplitSpec, which: str) -> list[RawRecord]:
    if which == "all":
        return list(records)
    if which == "test" and split.test == 0:
        logger.info("split has no test part; evaluating all %d records", len(records))
        return list(records)
    _, val, test = split_records(records, split)
    chosen = test if which == "test" else val
    if not chosen:
        raise ConfigError(f"the {which} split is empty")
    return chosen


def _check_devise_dims(config: RunConfig, table: WordTable) -> None:
    if config.fragment_mode == FragmentMode.devise and config.embedding_dim != table.dim_word:
        raise ConfigError(
            f"devise fragments need embedding_dim == word vector width ({table.dim_word}), "
            f"got {config.embedding_dim}"
        )


# --- train -------------------------------------------------------------------


def _validation_logger(corpus: Corpus, table: WordTable, config: RunConfig) -> EpochCallback:
    def log_validation(epoch: int, params: ModelParams, entry: EpochTrace) -> None:
        scores = dense_scores(params, table, corpus, config.objective.smoothing_n)
        for report in evaluate_scores(scores, config.eval_ks):
            recalls = " ".join(f"R@{k}={100 * v:.1f}" for k, v in report.recall_at.items())
            logger.info(
                "epoch %d validation %s: %s med_r=%g",
                epoch + 1,
                report.direction,
                recalls,
                report.median_rank,
            )

    return log_validation


def run_train(config: RunConfig, inputs: CorpusInputs | None = None) -> TrainResult:
    """Prepare the training split, train, and write checkpoint, loss trace and config."""
    with stage("data"):
        output_dir = resolve_output_dir(config.paths.output_dir)
        config = config.with_overrides({"paths.output_dir": str(output_dir)})
        if inputs is None:
            inputs = load_inputs(config.paths.corpus, config.paths.word_vectors)
        _check_devise_dims(config, inputs.table)
        train_records, val_records, _ = split_records(inputs.records, config.split)
        if not train_records:
            raise EmptyCorpusError("the training split is empty")
        vocab = None
        if config.fragment_mode in RELATION_MODES:
            vocab, train_records = prune_relations(train_records, config.min_relation_frac)
        train_corpus = build_corpus(train_records, config, inputs, vocab)
        val_corpus = build_corpus(val_records, config, inputs, vocab) if val_records else None
        logger.info(
            "training on %d items / %d sentences with %d relation types (%s)",
            len(train_corpus),
            train_corpus.num_sentences,
            len(train_corpus.relations),
            model_label(config),
        )

    with stage("train"):
        rng = np.random.default_rng(config.train.seed)
        dims = Dims(inputs.table.dim_word, config.embedding_dim, inputs.dim_image)
        params = init_params(train_corpus.relations, dims, rng, config.init)
        callback = _validation_logger(val_corpus, inputs.table, config) if val_corpus else None
        outcome = train(
            train_corpus,
            inputs.table,
            params,
            config.train,
            config.objective,
            rng,
            on_epoch_end=callback,
        )

    with stage("checkpoint"):
        checkpoint_path = save_checkpoint(output_dir / CHECKPOINT_FILE, outcome.params, config)
        trace_path = write_csv(
            output_dir / TRACE_FILE,
            ["epoch", "phase", "lr", "mean_loss"],
            ([t.epoch, t.phase.value, repr(t.lr), repr(t.mean_loss)] for t in outcome.trace),
        )
        config_path = output_dir / CONFIG_FILE
        config_path.write_text(config.to_yaml(), encoding="utf-8")
    logger.info("checkpoint written to %s", checkpoint_path)
    return TrainResult(
        checkpoint_path=str(checkpoint_path),
        trace_path=str(trace_path),
        config_path=str(config_path),
        trace=outcome.trace,
    )


# --- eval --------------------------------------------------------------------


def run_eval(
    checkpoint: str | os.PathLike,
    *,
    corpus: str | None = None,
    word_vectors: str | None = None,
    output_dir: str | None = None,
    split: str = "test",
    hodosh: bool = False,
    ground_truth: str | None = None,
    random_baseline: bool = False,
    threads: int = THREADS,
    ks: Sequence[int] | None = None,
    inputs: CorpusInputs | None = None,
) -> EvalResult:
    """Score a split with a trained checkpoint and write report.txt / report.csv.

    Paths default to those recorded in the checkpoint's run config; the
    output directory defaults to the checkpoint's directory.
    """
    with stage("checkpoint"):
        loaded = load_checkpoint(checkpoint)
    params = loaded.params
    config = loaded.config or RunConfig()
    ks = sorted(set(ks)) if ks else config.eval_ks
    out = Path(output_dir) if output_dir else Path(checkpoint).parent

    corpus = corpus or config.paths.corpus
    word_vectors = word_vectors or config.paths.word_vectors

    with stage("data"):
        if inputs is None:
            inputs = load_inputs(corpus, word_vectors)
        if inputs.dim_image != params.dims.dim_image:
            raise ShapeError(
                f"checkpoint expects D_img={params.dims.dim_image}, corpus has D_img={inputs.dim_image}"
            )
        if inputs.table.dim_word != params.dims.dim_word:
            raise ShapeError(
                f"checkpoint expects word width d={params.dims.dim_word}, "
                f"word vectors have d={inputs.table.dim_word}"
            )
        records = select_split(inputs.records, config.split, split)
        vocab = params.relations if config.fragment_mode in RELATION_MODES else None
        test_corpus = build_corpus(records, config, inputs, vocab)
        if hodosh:
            test_corpus = hodosh_subset(test_corpus)

    with stage("eval"):
        scores = dense_scores(params, inputs.table, test_corpus, config.objective.smoothing_n, threads)
        reports = evaluate_scores(scores, ks)
        rows: list[tuple[str, Sequence[RetrievalReport]]] = [(model_label(config), reports)]
        baseline = None
        if random_baseline:
            rng = np.random.default_rng(config.train.seed)
            baseline = random_ranking(len(test_corpus), scores.owners, ks, rng)
            rows.insert(0, (RANDOM_RANKING, baseline))
        accuracy = None
        if ground_truth:
            if config.fragment_mode != FragmentMode.triplets:
                raise ConfigError("alignment accuracy needs triplet fragments")
            accuracy = alignment_accuracy(
                params,
                inputs.table,
                test_corpus,
                read_alignments(ground_truth),
                [r.image_id for r in inputs.records],
            )
        text = format_report_table(rows, len(test_corpus), test_corpus.num_sentences, ks)
        if accuracy is not None:
            text += f"alignment accuracy: {100 * accuracy:.1f}%\n"
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / REPORT_FILE
        report_path.write_text(text, encoding="utf-8")
        csv_path = write_report_csv(out / REPORT_CSV_FILE, rows, ks)
        settings = EvalSettings(
            checkpoint=str(checkpoint),
            corpus=corpus,
            word_vectors=word_vectors,
            split=split,
            hodosh=hodosh,
            ground_truth=ground_truth,
            random_baseline=random_baseline,
            threads=threads,
            ks=list(ks),
        )
        config_path = out / EVAL_CONFIG_FILE
        config_path.write_text(EvalConfig(run=config, evaluation=settings).to_yaml(), encoding="utf-8")
    for report in reports:
        logger.info(
            "%s: %s med_r=%g mean_r=%.2f",
            report.direction,
            " ".join(f"R@{k}={100 * v:.1f}" for k, v in report.recall_at.items()),
            report.median_rank,
            report.mean_rank,
        )
    return EvalResult(
        n_images=len(test_corpus),
        n_sentences=test_corpus.num_sentences,
        reports=reports,
        report_path=str(report_path),
        csv_path=str(csv_path),
        config_path=str(config_path),
        random_baseline=baseline,
        alignment_accuracy=accuracy,
    )


# --- gradcheck ---------------------------------------------------------------

GRADCHECK_DIMS = Dims(dim_word=4, embedding_dim=5, dim_image=6)
GRADCHECK_RELATIONS = RelationVocab(("r0", "r1"))
GRADCHECK_WORDS = tuple(f"w{i}" for i in range(6))
GRADCHECK_ITEMS = 3


def gradcheck_instance(seed: int) -> tuple[ModelParams, WordTable, list[CorpusItem]]:
    """Small random problem: 3 items, 1 to 3 fragments per image and per sentence."""
    rng = np.random.default_rng(seed)
    dims = GRADCHECK_DIMS
    table = random_word_table(GRADCHECK_WORDS, dims.dim_word, int(rng.integers(2**63)))
    base = init_params(GRADCHECK_RELATIONS, dims, rng)
    biases = tuple(rng.normal(0.0, 0.1, dims.embedding_dim) for _ in GRADCHECK_RELATIONS.relations)
    params = ModelParams(GRADCHECK_RELATIONS, dims, base.W_R, biases, base.W_m)

    items: list[CorpusItem] = []
    for k in range(GRADCHECK_ITEMS):
        fragments = tuple(
            ImageFragment(rng.standard_normal(dims.dim_image)) for _ in range(int(rng.integers(1, 4)))
        )
        sentence = tuple(
            SentenceFragment(
                int(rng.integers(len(GRADCHECK_RELATIONS))),
                GRADCHECK_WORDS[int(rng.integers(len(GRADCHECK_WORDS)))],
                GRADCHECK_WORDS[int(rng.integers(len(GRADCHECK_WORDS)))],
            )
            for _ in range(int(rng.integers(1, 4)))
        )
        items.append(CorpusItem(f"gradcheck-{k}", fragments, (sentence,)))
    return params, table, items


def run_gradcheck(
    seed: int = 0,
    *,
    eps: float = 1e-5,
    kink_tol: float = 1e-4,
    mode: ObjectiveMode = ObjectiveMode.combined_mil,
) -> GradCheckReport:
    params, table, items = gradcheck_instance(seed)
    obj_cfg = ObjectiveConfig(alpha=1e-3, mode=mode)
    with stage("gradcheck"):
        return grad_check(params, table, items, obj_cfg, eps=eps, kink_tol=kink_tol)


def format_gradcheck_report(report: GradCheckReport) -> str:
    width = max(len(t.name) for t in report.tensors)
    lines = [
        f"{t.name.ljust(width)}  checked={t.checked:<4d} skipped={t.skipped:<3d} "
        f"max_rel_err={t.max_rel_err:.3e}"
        for t in report.tensors
    ]
    lines.append(
        f"max_rel_err={report.max_rel_err:.3e} checked={report.checked} skipped={report.skipped}"
    )
    return "\n".join(lines) + "\n"


# --- ablate ------------------------------------------------------------------


def run_ablate(config: RunConfig, seeds: int = 3, threads: int = THREADS) -> AblationResult:
    """Train and evaluate every ablation variant for `seeds` consecutive training seeds.

    Each variant/seed gets its own subdirectory; the averaged table goes to
    ablation.txt / ablation.csv in the output directory.
    """
    if seeds <= 0:
        raise StageError("ablate", ConfigError(f"seeds must be positive, got {seeds}"))
    with stage("data"):
        base_dir = resolve_output_dir(config.paths.output_dir)
        inputs = load_inputs(config.paths.corpus, config.paths.word_vectors)

    runs: dict[str, list[list[RetrievalReport]]] = {RANDOM_RANKING: []}
    n_images = n_sentences = 0
    for offset in range(seeds):
        seed = config.train.seed + offset
        for label, overrides in ABLATION_VARIANTS:
            variant_overrides: dict[str, object] = {
                **overrides,
                "train.seed": seed,
                "paths.output_dir": str(base_dir / sanitize_dirname(label) / f"seed-{seed}"),
            }
            if overrides.get("fragment_mode") == FragmentMode.devise:
                variant_overrides["embedding_dim"] = inputs.table.dim_word
            variant = config.with_overrides(variant_overrides)
            logger.info("ablation %s (seed %d)", label, seed)
            trained = run_train(variant, inputs)
            evaluated = run_eval(
                trained.checkpoint_path,
                threads=threads,
                random_baseline=label == OBJECTIVE_LABELS[ObjectiveMode.combined_mil],
                inputs=inputs,
            )
            runs.setdefault(label, []).append(evaluated.reports)
            if evaluated.random_baseline is not None:
                runs[RANDOM_RANKING].append(evaluated.random_baseline)
                n_images, n_sentences = evaluated.n_images, evaluated.n_sentences

    rows = [AblationRow(label=label, reports=average_reports(per_seed)) for label, per_seed in runs.items()]
    table_rows = [(row.label, row.reports) for row in rows]
    with stage("eval"):
        base_dir.mkdir(parents=True, exist_ok=True)
        table_path = base_dir / ABLATION_FILE
        table_path.write_text(
            format_report_table(table_rows, n_images, n_sentences, config.eval_ks), encoding="utf-8"
        )
        csv_path = write_report_csv(base_dir / ABLATION_CSV_FILE, table_rows, config.eval_ks)
    return AblationResult(rows=rows, table_path=str(table_path), csv_path=str(csv_path))
