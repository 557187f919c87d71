#!/usr/bin/env python3
"""
Empathy Fusion Engine
Trains and evaluates multi-modal empathy-level classifiers with topic supervision
"""

import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import click

from config.settings import Config, SplitSpec, SynthConfig, load_train_config, make_config
from src.dataio import LABEL_NAMES, SYNTH_TASKS, load_dataset, save_dataset, split, synth_generate
from src.errors import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EmpathyError
from src.evaluation import SUITES, evaluate, run_ablation
from src.lda import fit_documents, load_lda, save_lda, top_words
from src.network import load_checkpoint
from src.training import GRADCHECK_TOLERANCE, gradient_check, train

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None) -> None:
    """Setup logging: a log file plus stderr, keeping stdout for command output."""
    log_file = Path(Config.LOG_FILE)
    log_file.parent.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=getattr(logging, (level or Config.LOG_LEVEL).upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.FileHandler(log_file), logging.StreamHandler(sys.stderr)],
        force=True,
    )


def emit(payload) -> None:
    click.echo(json.dumps(payload, indent=2))


def parse_ratios(value: Optional[str]) -> Optional[tuple]:
    if value is None:
        return None
    try:
        return tuple(float(part) for part in value.split(":"))
    except ValueError:
        raise click.BadParameter(f"expected three ratios like 7:1:2, got {value!r}") from None


def normalize_ratios(ratios: Optional[Sequence[float]]) -> Optional[tuple]:
    if ratios is None:
        return None
    if len(ratios) != 3 or sum(ratios) <= 0:
        raise click.BadParameter("expected three non-negative ratios")
    total = sum(ratios)
    return tuple(r / total for r in ratios)


LABEL_CHOICE = click.Choice(list(LABEL_NAMES))


@click.group()
@click.option("--log-level", default=None, help="Override LOG_LEVEL for this run.")
def cli(log_level: Optional[str]) -> None:
    """Multi-modal empathy prediction with supervisory-document topic targets."""
    setup_logging(log_level)


@cli.command("train")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--label", type=LABEL_CHOICE, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
@click.option("--no-sdat", is_flag=True, help="Train without topic supervision.")
@click.option("--seed", type=int, default=None)
@click.option("--split", "ratios", default=None, help="train:val:test ratios, default 7:1:2.")
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False))
def train_command(data_path, label, config_path, out_dir, no_sdat, seed, ratios, resume_path):
    """Train one empathy model and write checkpoints under OUT."""
    overrides = {"label_target": label, "seed": seed}
    if no_sdat:
        overrides["sdat_enabled"] = False
    cfg = load_train_config(config_path, **overrides)
    ds = load_dataset(data_path)
    spec_values = {"seed": cfg.seed}
    if ratios is not None:
        spec_values["ratios"] = normalize_ratios(parse_ratios(ratios))
    train_ds, val_ds, test_ds = split(ds, make_config(SplitSpec, **spec_values))
    logger.info(f"📂 Split {len(ds)} samples into {len(train_ds)}/{len(val_ds)}/{len(test_ds)}")
    if len(val_ds) == 0:
        logger.warning("⚠️ Validation split is empty; best checkpoint follows training loss")

    out = Path(out_dir or Config.OUTPUT_DIR)
    resume = load_checkpoint(resume_path) if resume_path else None
    run = train(train_ds, val_ds, cfg, out_dir=out, resume=resume)
    summary = {
        "out_dir": str(out),
        "epochs": len(run.history),
        "best_epoch": run.best_epoch,
        "best_val_accuracy": run.best_val_accuracy,
    }
    if len(test_ds):
        summary["test"] = evaluate(run.best_params(), test_ds, cfg.label_target).to_dict()
    emit(summary)


@cli.command("evaluate")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--label", type=LABEL_CHOICE, default=None)
@click.option("--modalities", default=None, help="Comma list the checkpoint must consume, e.g. text.")
def evaluate_command(checkpoint_path, data_path, label, modalities):
    """Score a checkpoint on a dataset; prints the report as JSON."""
    ckpt = load_checkpoint(checkpoint_path)
    if modalities is not None:
        wanted = [m.strip() for m in modalities.split(",") if m.strip()]
        if sorted(wanted) != sorted(ckpt.params.modalities):
            raise click.UsageError(
                f"checkpoint consumes {','.join(ckpt.params.modalities)}, not {modalities}"
            )
    if label is None:
        label = ckpt.config.label_target if ckpt.config is not None else "ee"
    emit(evaluate(ckpt, load_dataset(data_path), label).to_dict())


@cli.command("lda-fit")
@click.option("--docs", "docs_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--topics", "K", type=int, default=10, show_default=True)
@click.option("--sweeps", type=int, default=None)
@click.option("--alpha", type=float, default=0.1, show_default=True)
@click.option("--beta", type=float, default=0.01, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def lda_fit_command(docs_path, K, sweeps, alpha, beta, seed, out_path):
    """Fit a topic model on whitespace-tokenized documents, one per line."""
    lines = Path(docs_path).read_text(encoding="utf-8").splitlines()
    documents: List[List[str]] = [line.split() for line in lines if line.strip()]
    model = fit_documents(
        documents,
        K=K,
        alpha=alpha,
        beta=beta,
        sweeps=sweeps if sweeps is not None else Config.LDA_SWEEPS,
        seed=seed if seed is not None else Config.DEFAULT_SEED,
    )
    save_lda(model, out_path)
    emit({"model": out_path, "documents": model.D, "vocabulary": model.V, "topics": model.K})


@cli.command("lda-topics")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--top", "n", type=int, default=10, show_default=True)
def lda_topics_command(model_path, n):
    """Print the top words of every topic."""
    model = load_lda(model_path)
    emit(
        {
            f"topic_{k}": [{"token": t, "probability": p} for t, p in top_words(model, k, n)]
            for k in range(model.K)
        }
    )


@cli.command("synth")
@click.option("--task", type=click.Choice(list(SYNTH_TASKS)), required=True)
@click.option("--n", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def synth_command(task, n, seed, out_path):
    """Write a synthetic dataset with a known label mechanism."""
    ds = synth_generate(make_config(SynthConfig, task=task, n=n), seed)
    save_dataset(ds, out_path)
    emit({"out": out_path, "task": task, "n": len(ds), "dims": ds.dims.to_dict()})


@cli.command("gradcheck")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def gradcheck_command(ctx, config_path, seed):
    """Compare tape gradients of the full loss with central differences."""
    errors = gradient_check(load_train_config(config_path), seed=seed)
    worst = float(max(errors.values()))
    passed = bool(worst < GRADCHECK_TOLERANCE)
    errors = {name: float(err) for name, err in errors.items()}
    emit({"max_relative_error": worst, "passed": passed, "per_parameter": errors})
    if not passed:
        logger.error(f"❌ Gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE}")
        ctx.exit(EXIT_NUMERIC)


@cli.command("ablate")
@click.option("--suite", type=click.Choice(list(SUITES)), required=True)
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--label", type=LABEL_CHOICE, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--split", "ratios", default=None, help="train:val:test ratios, default 7:1:2.")
def ablate_command(suite, data_path, config_path, label, seed, ratios):
    """Train every variant of an ablation suite; JSON on stdout, table on stderr."""
    cfg = load_train_config(config_path, label_target=label, seed=seed)
    spec_values = {"seed": cfg.seed}
    if ratios is not None:
        spec_values["ratios"] = normalize_ratios(parse_ratios(ratios))
    train_ds, val_ds, test_ds = split(load_dataset(data_path), make_config(SplitSpec, **spec_values))
    table = run_ablation(suite, cfg, train_ds, val_ds, test_ds)
    click.echo(table.to_text(), err=True)
    emit(table.to_dict())


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line and map failures onto exit codes."""
    try:
        result = cli.main(args=argv, prog_name="empathy-engine", standalone_mode=False)
        code = result if isinstance(result, int) else EXIT_OK
    except click.exceptions.Exit as e:
        code = e.exit_code
    except click.Abort:
        code = EXIT_USAGE
    except click.ClickException as e:
        e.show()
        code = EXIT_USAGE
    except EmpathyError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        code = e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        code = EXIT_USAGE
    return code


if __name__ == "__main__":
    sys.exit(main())
