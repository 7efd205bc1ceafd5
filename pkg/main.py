"""
Command line for fragment-embedding image-sentence retrieval.
"""

from __future__ import annotations

import functools
from collections.abc import Callable
from pathlib import Path
from typing import Any

import click
from pydantic import ValidationError

from models import FragmentMode, InitScheme, ObjectiveMode, RunConfig, SyntheticSpec
from task import (
    LOG_FILE,
    format_gradcheck_report,
    run_ablate,
    run_eval,
    run_generate,
    run_gradcheck,
    run_train,
)
from utils.errors import StageError
from utils.helper import parse_int_list
from utils.logging_helper import logging_help

READABLE_FILE = click.Path(exists=True, dir_okay=False)

# option name -> dotted RunConfig key
TRAINING_OVERRIDES = {
    "corpus": "paths.corpus",
    "word_vectors": "paths.word_vectors",
    "output_dir": "paths.output_dir",
    "mode": "objective.mode",
    "fragment_mode": "fragment_mode",
    "beta": "objective.beta",
    "alpha": "objective.alpha",
    "delta": "objective.delta",
    "smoothing_n": "objective.smoothing_n",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "momentum": "train.momentum",
    "anneal_factor": "train.anneal_factor",
    "anneal_last_epochs": "train.anneal_last_epochs",
    "mil_start_epoch": "train.mil_start_epoch",
    "seed": "train.seed",
    "embedding_dim": "embedding_dim",
    "init": "init",
    "min_relation_frac": "min_relation_frac",
    "train_count": "split.train",
    "val": "split.val",
    "test": "split.test",
    "split_seed": "split.seed",
    "ks": "eval_ks",
}


def _parse_ks(ctx: click.Context, param: click.Parameter, value: str | None) -> list[int] | None:
    if value is None:
        return None
    try:
        return parse_int_list(value)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


def training_options(fn: Callable) -> Callable:
    """Flags shared by `train` and `ablate`; each one overrides the loaded config."""
    options = [
        click.option("--config", "config_path", type=READABLE_FILE, help="run_config.yaml to start from."),
        click.option("--corpus", type=READABLE_FILE, help="JSON-lines corpus file."),
        click.option("--word-vectors", type=READABLE_FILE, help="Word vector text file."),
        click.option(
            "--output-dir",
            type=click.Path(file_okay=False),
            envvar="FRAGALIGN_OUTPUT_DIR",
            help="Run directory [env: FRAGALIGN_OUTPUT_DIR].",
        ),
        click.option("--mode", type=click.Choice([m.value for m in ObjectiveMode])),
        click.option("--fragment-mode", type=click.Choice([m.value for m in FragmentMode])),
        click.option("--beta", type=float),
        click.option("--alpha", type=float),
        click.option("--delta", type=float),
        click.option("--smoothing-n", type=float),
        click.option("--epochs", type=int),
        click.option("--batch-size", type=int),
        click.option("--lr", type=float),
        click.option("--momentum", type=float),
        click.option("--anneal-factor", type=float),
        click.option("--anneal-last-epochs", type=int),
        click.option("--mil-start-epoch", type=int),
        click.option("--seed", type=int),
        click.option("--embedding-dim", type=int),
        click.option("--init", type=click.Choice([s.value for s in InitScheme])),
        click.option("--min-relation-frac", type=float),
        click.option("--train-count", type=int, help="Training items (default: all not in val/test)."),
        click.option("--val", type=int),
        click.option("--test", type=int),
        click.option("--split-seed", type=int),
        click.option("--ks", callback=_parse_ks, help="Recall cut-offs, e.g. 1,5,10."),
    ]
    return functools.reduce(lambda f, option: option(f), reversed(options), fn)


def _resolve_config(config_path: str | None, flags: dict[str, Any]) -> RunConfig:
    overrides = {
        TRAINING_OVERRIDES[name]: value
        for name, value in flags.items()
        if name in TRAINING_OVERRIDES and value is not None
    }
    try:
        base = RunConfig.from_yaml(config_path) if config_path else RunConfig()
        return base.with_overrides(overrides)
    except ValidationError as exc:
        raise click.UsageError(f"invalid configuration: {exc}") from exc


def _stage_errors(fn: Callable) -> Callable:
    """Turn stage failures into click errors naming the stage."""

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except StageError as exc:
            raise click.ClickException(str(exc)) from exc
        except ValidationError as exc:
            raise click.UsageError(str(exc)) from exc

    return wrapper


@click.group()
@click.option(
    "--log-file",
    type=click.Path(dir_okay=False),
    default=LOG_FILE,
    envvar="FRAGALIGN_LOG_FILE",
    show_default=True,
    help="Append logs here [env: FRAGALIGN_LOG_FILE].",
)
def cli(log_file: str) -> None:
    """Train and evaluate fragment-embedding image-sentence retrieval models."""
    logging_help(log_file)


@cli.command()
@click.option(
    "--output-dir",
    type=click.Path(file_okay=False),
    envvar="FRAGALIGN_OUTPUT_DIR",
    required=True,
    help="Where corpus.jsonl, word_vectors.txt and alignments.csv go.",
)
@click.option("--items", type=int)
@click.option("--concepts", type=int)
@click.option("--fragments-per-image", type=int)
@click.option("--triplets-per-sentence", type=int)
@click.option("--noise", type=float)
@click.option("--dim-image", type=int)
@click.option("--dim-word", type=int)
@click.option("--fullframe/--no-fullframe", default=None)
@click.option("--seed", type=int)
@_stage_errors
def generate(output_dir: str, **flags: Any) -> None:
    """Write a synthetic planted-alignment corpus."""
    names = {
        "items": "num_items",
        "concepts": "num_concepts",
        "noise": "noise_sigma",
    }
    values = {names.get(k, k): v for k, v in flags.items() if v is not None}
    try:
        spec = SyntheticSpec(**values)
    except ValidationError as exc:
        raise click.UsageError(f"invalid synthetic spec: {exc}") from exc
    result = run_generate(spec, output_dir)
    click.echo(
        f"wrote {result.n_items} items, {result.n_image_fragments} image fragments and "
        f"{result.n_triplets} triplets to {Path(result.corpus_path).parent}"
    )


@cli.command(name="train")
@training_options
@_stage_errors
def train_cmd(config_path: str | None, **flags: Any) -> None:
    """Train a model and write model.ckpt, loss_trace.csv and run_config.yaml.

    Training runs on a single thread so reruns are bit-identical; the
    --threads option of eval and ablate only parallelizes scoring.
    """
    config = _resolve_config(config_path, flags)
    result = run_train(config)
    last = result.trace[-1]
    click.echo(
        f"trained {len(result.trace)} epochs, final mean loss {last.mean_loss:.6f}; "
        f"checkpoint {result.checkpoint_path}"
    )


@cli.command(name="eval")
@click.argument("checkpoint", type=READABLE_FILE)
@click.option("--corpus", type=READABLE_FILE, help="Defaults to the corpus recorded in the checkpoint.")
@click.option("--word-vectors", type=READABLE_FILE)
@click.option("--output-dir", type=click.Path(file_okay=False), help="Defaults to the checkpoint's directory.")
@click.option("--split", type=click.Choice(["test", "val", "all"]), default="test", show_default=True)
@click.option("--hodosh", is_flag=True, help="Keep only the first sentence of every image.")
@click.option("--ground-truth", type=READABLE_FILE, help="alignments.csv; adds alignment accuracy.")
@click.option("--random-baseline", is_flag=True, help="Add a Random Ranking row.")
@click.option("--threads", type=click.IntRange(min=1), envvar="FRAGALIGN_THREADS", default=1, show_default=True)
@click.option("--ks", callback=_parse_ks)
@_stage_errors
def eval_cmd(checkpoint: str, **flags: Any) -> None:
    """Bidirectional retrieval report for a checkpoint."""
    result = run_eval(checkpoint, **flags)
    click.echo(Path(result.report_path).read_text(encoding="utf-8"), nl=False)


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threshold", type=float, default=1e-6, show_default=True)
@click.option("--eps", type=float, default=1e-5, show_default=True)
@click.option("--kink-tol", type=float, default=1e-4, show_default=True)
@click.option(
    "--mode",
    type=click.Choice([m.value for m in ObjectiveMode]),
    default=ObjectiveMode.combined_mil.value,
    show_default=True,
)
@_stage_errors
def gradcheck(seed: int, threshold: float, eps: float, kink_tol: float, mode: str) -> None:
    """Compare analytic gradients with central differences on a random instance."""
    report = run_gradcheck(seed, eps=eps, kink_tol=kink_tol, mode=ObjectiveMode(mode))
    click.echo(format_gradcheck_report(report), nl=False)
    if not report.max_rel_err < threshold:
        worst = report.worst
        where = ""
        if worst is not None:
            where = (
                f" at {worst.name}{worst.worst_index}"
                f" (analytic {worst.analytic!r}, numeric {worst.numeric!r})"
            )
        raise click.ClickException(
            f"max relative error {report.max_rel_err:.3e} is not below {threshold:g}{where}"
        )


@cli.command()
@training_options
@click.option("--seeds", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--threads", type=click.IntRange(min=1), envvar="FRAGALIGN_THREADS", default=1, show_default=True)
@_stage_errors
def ablate(config_path: str | None, seeds: int, threads: int, **flags: Any) -> None:
    """Train and evaluate every ablation variant and write the combined table."""
    config = _resolve_config(config_path, flags)
    result = run_ablate(config, seeds=seeds, threads=threads)
    click.echo(Path(result.table_path).read_text(encoding="utf-8"), nl=False)


if __name__ == "__main__":
    cli()
