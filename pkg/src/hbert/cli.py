"""Command-line entry point: ``hbert gen-data | train | evaluate | embed | compare``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import yaml

from . import pipeline
from .dataset import DataError, load_dataset
from .evaluation import DegenerateData, EmptyGroup, NoDefinedTasks, embeddings_csv, metrics_csv, pca_csv
from .ontology import OntologyError
from .synthdata import SynthDataError
from .train import (RUN_LOG_HEADER, Checkpoint, CheckpointCorrupt, NumericFailure, TrainError,
                    load_checkpoint, save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_ERRORS = (DataError, SynthDataError, OntologyError, CheckpointCorrupt, TrainError,
               pipeline.MissingCheckpoint, EmptyGroup, FileNotFoundError)
NUMERIC_ERRORS = (NumericFailure, FloatingPointError, NoDefinedTasks, DegenerateData)

log = logging.getLogger("hbert")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Provenance record written next to every command's outputs."""

    def __init__(self, command: str, seed: int | None, variant: str | None = None,
                 config: Path | None = None, overrides: dict | None = None):
        resolved = json.dumps(overrides or {}, sort_keys=True, default=str)
        self.body = {
            "command": command,
            "seed": seed,
            "variant": variant,
            "config_path": str(config) if config else None,
            "config_sha256": pipeline.sha256_file(config) if config else None,
            "overrides_sha256": hashlib.sha256(resolved.encode()).hexdigest(),
            "stages": {},
            "outputs": {},
        }

    def stage(self, name: str, started: str) -> None:
        self.body["stages"][name] = {"started": started, "finished": _now()}

    def output(self, name: str, path: Path) -> None:
        path = Path(path)
        digest = pipeline.sha256_file(path) if path.is_file() else None
        self.body["outputs"][name] = {"path": str(path), "sha256": digest}

    def write(self, out_dir: Path) -> Path:
        p = Path(out_dir) / "run_manifest.json"
        p.write_text(json.dumps(self.body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


def _parse_set(values) -> dict:
    out = {}
    for item in values:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise click.UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _overrides(config, sets, epochs=None, lr=None, batch_size=None) -> dict:
    ov = pipeline.load_overrides(config)
    ov.update(_parse_set(sets))
    for key, val in (("epochs", epochs), ("learning_rate", lr), ("batch_size", batch_size)):
        if val is not None:
            ov[key] = val
    pipeline.split_overrides(ov)
    return ov


def _write(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


config_opt = click.option("--config", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                          help="YAML mapping of ModelConfig/TrainConfig field names.")
set_opt = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override one config key.")
seed_opt = click.option("--seed", type=int, default=0, show_default=True)
data_opt = click.option("--data", "data_dir", required=True,
                        type=click.Path(exists=True, file_okay=False, path_type=Path))
out_dir_opt = click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug.")
def cli(verbose):
    """Hierarchy-aware visit encoders on synthetic EHR data."""
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command("gen-data")
@click.option("--spec", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Phenotype spec (defaults to the bundled fixture).")
@click.option("--n-patients", type=int, default=None)
@out_dir_opt
@seed_opt
def gen_data(spec, n_patients, out_dir, seed):
    """Generate a labelled synthetic dataset with patient-level splits."""
    started = _now()
    man = RunManifest("gen-data", seed, config=spec)
    summary = pipeline.generate(out_dir, seed, spec or pipeline.PHENOTYPE_SPEC, n_patients)
    man.stage("gen-data", started)
    for p in sorted(Path(out_dir).rglob("*")):
        if p.is_file() and p.name != "run_manifest.json":
            man.output(str(p.relative_to(out_dir)), p)
    man.write(out_dir)
    click.echo(json.dumps(summary, indent=2, sort_keys=True))


@cli.command()
@click.option("--variant", type=click.Choice(pipeline.ALL_VARIANTS), required=True)
@click.option("--phase", type=click.Choice(["pretrain", "finetune"]), required=True)
@click.option("--init", "init_dir", type=click.Path(path_type=Path), default=None,
              help="Pretrained checkpoint directory (required for finetune).")
@data_opt
@out_dir_opt
@seed_opt
@config_opt
@set_opt
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
def train(variant, phase, init_dir, data_dir, out_dir, seed, config, sets, epochs, lr, batch_size):
    """Pretrain (MLM) or fine-tune one variant; writes a checkpoint and run_log.csv."""
    ov = _overrides(config, sets, epochs, lr, batch_size)
    data = load_dataset(data_dir)
    init = None
    if phase == "finetune":
        if init_dir is None or not (Path(init_dir) / "manifest.json").is_file():
            raise pipeline.MissingCheckpoint(f"no pretrained checkpoint at {init_dir}")
        init = load_checkpoint(init_dir)
    started = _now()
    man = RunManifest("train", seed, variant, config, ov)
    ckpt, hist = pipeline.train_stage(data, variant, phase, seed, ov, init)
    man.stage(phase, started)
    ck_dir = save_checkpoint(Path(out_dir) / "checkpoint", ckpt)
    run_log = _write(Path(out_dir) / "run_log.csv", RUN_LOG_HEADER + "".join(r.csv_row() for r in hist))
    man.output("checkpoint_manifest", ck_dir / "manifest.json")
    man.output("run_log", run_log)
    man.write(out_dir)
    click.echo(f"{variant} {phase}: {len(hist)} epochs, final loss {hist[-1].loss:.5f}")


@cli.command()
@click.option("--checkpoint", "ck_dir", required=True, type=click.Path(path_type=Path))
@data_opt
@click.option("--out", "out_file", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--split", type=click.Choice(["train", "valid", "test"]), default="test", show_default=True)
def evaluate(ck_dir, data_dir, out_file, split):
    """Per-task and mean AUC/APS as CSV."""
    ckpt = _load_finetuned(ck_dir)
    scores = pipeline.evaluate_stage(ckpt, load_dataset(data_dir), split)
    _write(out_file, metrics_csv(scores))
    click.echo(f"mean_auc={scores.mean_auc:.4f} mean_aps={scores.mean_aps:.4f}")


@cli.command()
@click.option("--checkpoint", "ck_dir", required=True, type=click.Path(path_type=Path))
@data_opt
@out_dir_opt
@click.option("--split", type=click.Choice(["train", "valid", "test"]), default="test", show_default=True)
def embed(ck_dir, data_dir, out_dir, split):
    """Patient embeddings, top-2 PCA coordinates and cohort separation ratios."""
    ckpt = _load_finetuned(ck_dir, need_head=False)
    res = pipeline.embed_stage(ckpt, load_dataset(data_dir), split)
    _write_embed(Path(out_dir), res)
    for (a, b), s in res.separation.items():
        click.echo(f"separation {a} vs {b}: {'undefined' if s is None else f'{s:.3f}'}")


def _write_embed(out_dir: Path, res: pipeline.EmbedResult) -> None:
    _write(out_dir / "embeddings.csv", embeddings_csv(res.embeddings))
    _write(out_dir / "pca.csv", pca_csv(res.embeddings, res.projections))
    rows = ["cohort_a,cohort_b,separation\n"] + [f"{a},{b},{_fmt(s)}\n" for (a, b), s in res.separation.items()]
    _write(out_dir / "separation.csv", "".join(rows))
    _write(out_dir / "explained_variance.csv",
           "component,variance\n" + "".join(f"pc{k + 1},{_fmt(v)}\n" for k, v in enumerate(res.variances)))


def _load_finetuned(ck_dir: Path, need_head: bool = True) -> Checkpoint:
    if not (Path(ck_dir) / "manifest.json").is_file():
        raise pipeline.MissingCheckpoint(f"no checkpoint at {ck_dir}")
    ckpt = load_checkpoint(ck_dir)
    if need_head and "task.W" not in ckpt.params:
        raise CheckpointCorrupt(f"{ck_dir} has no task head; evaluate a fine-tuned checkpoint")
    return ckpt


def compare_table(rows: list[pipeline.CompareRow]) -> str:
    pairs = sorted({p for r in rows for p in r.separation})
    head = ["variant", "mean_auc", "mean_aps", "n_params"] + [f"sep_{a}_{b}" for a, b in pairs]
    lines = [",".join(head)]
    for r in rows:
        cells = [r.variant, _fmt(r.mean_auc), _fmt(r.mean_aps), str(r.n_params)]
        cells += [_fmt(r.separation.get(p)) for p in pairs]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


@cli.command()
@click.option("--variants", default=",".join(pipeline.ALL_VARIANTS), show_default=True)
@data_opt
@out_dir_opt
@seed_opt
@config_opt
@set_opt
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
def compare(variants, data_dir, out_dir, seed, config, sets, epochs, lr):
    """Train and evaluate several variants on one budget and seed."""
    names = [v.strip() for v in variants.split(",") if v.strip()]
    bad = [v for v in names if v not in pipeline.ALL_VARIANTS]
    if bad or not names:
        raise click.UsageError(f"unknown variants: {', '.join(bad) or '(none)'}")
    ov = _overrides(config, sets, epochs, lr)
    data = load_dataset(data_dir)
    started = _now()
    man = RunManifest("compare", seed, ",".join(names), config, ov)
    rows = pipeline.compare(data, names, seed, ov)
    man.stage("compare", started)
    out_dir = Path(out_dir)
    for r in rows:
        vdir = out_dir / r.variant
        save_checkpoint(vdir / "checkpoint", r.checkpoint)
        man.output(f"{r.variant}/metrics", _write(vdir / "metrics.csv", metrics_csv(r.scores)))
        _write_embed(vdir, r.embed)
        man.output(f"{r.variant}/pca", vdir / "pca.csv")
    table = _write(out_dir / "compare.csv", compare_table(rows))
    man.output("compare", table)
    man.write(out_dir)
    click.echo(table.read_text(encoding="utf-8"), nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="hbert", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except (click.UsageError, pipeline.ConfigError) as exc:
        click.echo(f"usage error: {exc}", err=True)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        click.echo(f"data error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
