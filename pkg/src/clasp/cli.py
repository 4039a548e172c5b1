"""Command-line entry point: gen-data, pseudo-label, pretrain, diagnose, export.

Exit codes: 0 success, 2 usage/configuration error, 1 runtime failure.
CLASP_SEED overrides the configured seed; an explicit --seed wins over both.
"""
from __future__ import annotations

import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import click

from clasp.checkpoint import load_checkpoint
from clasp.config import load_json_config
from clasp.dataset import DataConfig, label_images, read_images, write_label_files
from clasp.diagnostics import GradientTrace, diagnose
from clasp.encoders import OracleSpec
from clasp.errors import ClaspError, ConfigurationError
from clasp.metrics import MetricsRow, export_metrics, row_from_record
from clasp.netpbm import write_pgm, write_ppm
from clasp.pseudo_labels import AttributeSchema, PartVocabulary
from clasp.synthetic import SyntheticPersonSpec, default_oracle_spec, generate_synthetic_dataset
from clasp.trainer import TrainConfig, run_pretraining

SEED_ENV = "CLASP_SEED"


def resolve_seed(flag: int | None, default: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return default
    try:
        return int(env)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV}={env!r} is not an integer") from None


def parse_granularity(text: str) -> list[int]:
    try:
        S = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None
    if not S or min(S) < 1:
        raise click.BadParameter("granularity set must be nonempty positive integers")
    return S


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Prompt-routed mixture-of-experts pre-training on person images."""


@cli.command("gen-data")
@click.option("--n", "n", type=click.IntRange(min=1), default=100, show_default=True, help="Number of images.")
@click.option("--seed", type=int, default=None, help="Seed (default: $CLASP_SEED or 0).")
@click.option("--background-fraction", type=click.FloatRange(0.0, 1.0), default=0.25, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def gen_data(n, seed, background_fraction, out_dir):
    """Render synthetic person images with ground-truth part maps and attributes."""
    seed = resolve_seed(seed, 0)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab, schema = PartVocabulary.default(), AttributeSchema.default()
    oracle = default_oracle_spec(seed, vocab, schema)
    spec = SyntheticPersonSpec(background_fraction=background_fraction)
    samples = generate_synthetic_dataset(n, seed, spec, oracle, vocab, schema)
    oracle.save(out / "oracle.json")
    rows = []
    for s in samples:
        write_ppm(out / f"{s.image.id}.ppm", s.image.values)
        write_pgm(out / f"{s.image.id}.gt.pgm", s.part_map)
        rows.append(json.dumps({"image_id": s.image.id, "attributes": s.attributes, "parts": s.parts}, sort_keys=True))
    (out / "ground_truth.jsonl").write_text("".join(r + "\n" for r in rows))
    click.echo(f"wrote {n} images to {out}")


@cli.command("pseudo-label")
@click.option("--images", "image_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory of .ppm images plus oracle.json (as written by gen-data).")
@click.option("--oracle", "oracle_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Oracle encoder spec (default: <images>/oracle.json).")
@click.option("--granularity", default="2,3,4", show_default=True, help="Candidate part counts S.")
@click.option("--seed", type=int, default=None)
@click.option("--part-vocab", type=click.Path(exists=True, dir_okay=False), default=None, help="Part vocabulary JSON.")
@click.option("--attr-schema", type=click.Path(exists=True, dir_okay=False), default=None, help="Attribute schema JSON.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def pseudo_label(image_dir, oracle_path, granularity, seed, part_vocab, attr_schema, out_dir):
    """Filter images and write part label maps (PGM) and attribute labels (JSONL)."""
    seed = resolve_seed(seed, 0)
    S = parse_granularity(granularity)
    oracle = OracleSpec.load(oracle_path or Path(image_dir) / "oracle.json")
    paths = sorted(Path(image_dir).glob("*.ppm"))
    if not paths:
        raise click.UsageError(f"no .ppm images in {image_dir}")
    images = read_images(paths)
    cfg = DataConfig(granularity=S)
    vocab = PartVocabulary.load(part_vocab) if part_vocab else PartVocabulary.default()
    schema = AttributeSchema.load(attr_schema) if attr_schema else AttributeSchema.default()
    labels = label_images(images, oracle, vocab, schema, cfg, seed)
    write_label_files(out_dir, images, labels, vocab, with_images=False)
    n_ok = sum(lb.accepted for lb in labels)
    click.echo(f"labelled {n_ok}/{len(labels)} images -> {out_dir}")


@cli.command("pretrain")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON config mirroring TrainConfig field names.")
@click.option("--steps", type=click.IntRange(min=0), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/pretrain", show_default=True)
@click.option("--deterministic", is_flag=True, help="Disable gate noise.")
@click.option("--warm-start", type=click.Path(dir_okay=False), default=None, help="Stage-1 checkpoint to fine-tune from.")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None, help="Checkpoint to resume.")
@click.option("--quiet", is_flag=True)
def pretrain(config_path, steps, seed, out_dir, deterministic, warm_start, resume, quiet):
    """Run teacher-student pre-training; writes checkpoint, metrics.csv, summary.json."""
    cfg = load_json_config(TrainConfig, config_path) if config_path else TrainConfig()
    changes = {"seed": resolve_seed(seed, cfg.seed)}
    if steps is not None:
        changes["steps"] = steps
    if deterministic:
        changes["deterministic"] = True
    if warm_start is not None:
        changes["warm_start_checkpoint"] = warm_start
    cfg = replace(cfg, **changes)

    def report(row: MetricsRow):
        if not quiet and (row.step % 10 == 0 or row.step == cfg.steps):
            click.echo(f"step {row.step:5d}  total {row.total:.4f}  dino {row.dino:.4f}  part {row.part:.4f}  "
                       f"attr {row.attribute:.4f}  bal {row.balancing:.5f}")

    state = run_pretraining(cfg, out_dir=out_dir, resume=resume, on_step=report)
    click.echo(f"finished at step {state.step}; outputs in {out_dir}")


@cli.command("diagnose")
@click.option("--trace", "trace_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Gradient trace JSON {tasks, layers, gradients[, profiles]}.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="report.json", show_default=True)
def diagnose_cmd(trace_path, out_path):
    """Compute the gradient conflict ratio (and EAD when profiles are present)."""
    report = diagnose(GradientTrace.load(trace_path))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    click.echo(f"GCR = {report['gcr']:.6f} -> {out_path}")


@cli.command("export")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def export_cmd(ckpt_path, out_dir):
    """Re-export metrics.csv and summary.json from a checkpoint's stored history."""
    ck = load_checkpoint(ckpt_path)
    rows = ck.extra.get("history", [])
    if not rows:
        raise ClaspError(f"{ckpt_path} holds no metrics history")
    history = [row_from_record(d) for d in rows]
    csv_path, summary_path = export_metrics(history, out_dir)
    click.echo(f"wrote {csv_path} and {summary_path}")


def main(argv: list[str] | None = None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="clasp", standalone_mode=False)
        return rv if isinstance(rv, int) else 0
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except ConfigurationError as e:
        click.echo(f"configuration error: {e}", err=True)
        return 2
    except (ClaspError, OSError, ValueError, ArithmeticError) as e:
        click.echo(f"error: {e}", err=True)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
