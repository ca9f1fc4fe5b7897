"""Stage functions shared by the CLI and the acceptance suite.

Each stage takes already-loaded inputs and returns plain objects; file
layout and exit codes live in ``cli``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .dataset import EHRData, load_dataset, tokenize, write_dataset
from .evaluation import (EmbeddingMatrix, TaskScores, cohort_separation, patient_embeddings, pca_top2,
                         score_tasks)
from .fixtures import DX_HIERARCHY, PHENOTYPE_SPEC, RX_HIERARCHY
from .model import ModelConfig, Variant, count_parameters
from .ontology import SystemId, load_tree
from .synthdata import build_dataset, load_population_spec, population_summary
from .train import (Checkpoint, EpochRecord, Phase, TrainConfig, VariantMismatch, finetune, predict,
                    pretrain)

log = logging.getLogger(__name__)

ALL_VARIANTS = tuple(v.value for v in Variant)
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"variant", "vocab_size", "n_tasks"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "phase"}


class ConfigError(ValueError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# configuration


def load_overrides(path: Path | None) -> dict:
    """Flat YAML mapping of ModelConfig / TrainConfig field names."""
    if path is None:
        return {}
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a key-value mapping")
    return raw


def split_overrides(overrides: Mapping) -> tuple[dict, dict]:
    unknown = set(overrides) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    model = {k: v for k, v in overrides.items() if k in _MODEL_KEYS}
    train = {k: v for k, v in overrides.items() if k in _TRAIN_KEYS}
    return model, train


def resolve(variant: str, data: EHRData, seed: int, phase: Phase | str,
            overrides: Mapping | None = None) -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = split_overrides(overrides or {})
    try:
        cfg = ModelConfig.for_variant(variant, len(data.vocab), len(data.tasks), **model_kw)
        tcfg = TrainConfig(seed=seed, phase=Phase(phase), **train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, tcfg


# ---------------------------------------------------------------------------
# stages


def generate(out: Path, seed: int, spec: Path | str = PHENOTYPE_SPEC, n_patients: int | None = None,
             dx_file: Path = DX_HIERARCHY, rx_file: Path = RX_HIERARCHY) -> dict:
    """Synthetic population -> dataset directory. Returns the population summary."""
    dx = load_tree(dx_file, SystemId.DIAGNOSIS)
    rx = load_tree(rx_file, SystemId.PRESCRIPTION)
    spec_text = Path(spec).read_text(encoding="utf-8")
    pop = load_population_spec(spec_text, dx, rx)
    ds = build_dataset(pop, dx, seed, n_patients)
    meta = {"seed": seed, "spec_sha256": hashlib.sha256(spec_text.encode("utf-8")).hexdigest()}
    write_dataset(out, ds, [c.name for c in pop.cohorts], dx, rx, meta)
    summary = population_summary(ds)
    (Path(out) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def train_stage(data: EHRData, variant: str, phase: Phase | str, seed: int,
                overrides: Mapping | None = None, init: Checkpoint | None = None
                ) -> tuple[Checkpoint, list[EpochRecord]]:
    cfg, tcfg = resolve(variant, data, seed, phase, overrides)
    train = tokenize(data, "train", cfg.token_mode)
    digest = data.vocab.digest()
    if tcfg.phase is Phase.PRETRAIN:
        params, hist = pretrain(cfg, train, tcfg)
    else:
        if init is None:
            raise MissingCheckpoint("fine-tuning needs a pretrained checkpoint")
        if init.config.variant is not cfg.variant:
            raise VariantMismatch(f"checkpoint is {init.config.variant.value}, requested {cfg.variant.value}")
        if init.vocab_digest != digest:
            raise VariantMismatch("checkpoint vocabulary does not match the dataset")
        valid = tokenize(data, "valid", cfg.token_mode)
        params, hist = finetune(cfg, init.params, train, tcfg, data.tasks, valid)
    return Checkpoint(cfg, params, list(data.tasks), digest, tcfg.phase), hist


@dataclass
class EmbedResult:
    embeddings: EmbeddingMatrix
    projections: np.ndarray
    variances: np.ndarray
    separation: dict[tuple[str, str], float | None] = field(default_factory=dict)


def _split_outputs(ckpt: Checkpoint, data: EHRData, split: str):
    tok = tokenize(data, split, ckpt.config.token_mode)
    if len(tok) == 0:
        raise ValueError(f"split {split!r} has no visits")
    logits, embs = predict(ckpt.config, ckpt.params, tok)
    return tok, logits, embs


def evaluate_stage(ckpt: Checkpoint, data: EHRData, split: str = "test") -> TaskScores:
    tok, logits, _ = _split_outputs(ckpt, data, split)
    return score_tasks(data.tasks, tok.labels, logits)


def embed_stage(ckpt: Checkpoint, data: EHRData, split: str = "test") -> EmbedResult:
    tok, _, embs = _split_outputs(ckpt, data, split)
    return embed_from_visits(data, tok.patient_ids, tok.labels, embs)


def embed_from_visits(data: EHRData, patient_ids: Sequence[str], labels: np.ndarray,
                      embs: np.ndarray) -> EmbedResult:
    """Patient means, PCA, and separation for every cohort pair.

    Patients in both cohorts of a pair are left out of that pair's groups.
    """
    cohort_col = {c: data.tasks.index(c) for c in data.cohorts}
    tags = {}
    for pid, row in zip(patient_ids, labels):
        tags[pid] = [c for c, k in cohort_col.items() if row[k]]
    emb = patient_embeddings(embs, patient_ids, tags)
    proj, var = pca_top2(emb.vectors)
    sep = {}
    for a, b in itertools.combinations(data.cohorts, 2):
        in_a, in_b = emb.rows_tagged(a), emb.rows_tagged(b)
        ga, gb = in_a & ~in_b, in_b & ~in_a
        sep[(a, b)] = cohort_separation(proj, ga, gb) if ga.any() and gb.any() else None
    return EmbedResult(emb, proj, var, sep)


@dataclass
class CompareRow:
    variant: str
    mean_auc: float
    mean_aps: float
    n_params: int
    separation: dict[tuple[str, str], float | None]
    seconds: float
    scores: TaskScores | None = None
    embed: EmbedResult | None = None
    checkpoint: Checkpoint | None = None


def compare(data: EHRData, variants: Sequence[str] = ALL_VARIANTS, seed: int = 0,
            overrides: Mapping | None = None) -> list[CompareRow]:
    """Pretrain, fine-tune and evaluate each variant on one budget and seed.

    Rows come back sorted by mean AUC, best first.
    """
    rows = []
    for v in variants:
        t0 = time.perf_counter()
        pre, _ = train_stage(data, v, Phase.PRETRAIN, seed, overrides)
        ft, _ = train_stage(data, v, Phase.FINETUNE, seed, overrides, init=pre)
        scores = evaluate_stage(ft, data)
        emb = embed_stage(ft, data)
        rows.append(CompareRow(v, scores.mean_auc, scores.mean_aps, count_parameters(ft.params),
                               emb.separation, time.perf_counter() - t0, scores, emb, ft))
        log.info("compare %s: auc %.4f aps %.4f (%.0fs)", v, scores.mean_auc, scores.mean_aps, rows[-1].seconds)
    rows.sort(key=lambda r: -r.mean_auc)
    return rows


def generate_and_load(out: Path, seed: int, **kw) -> EHRData:
    generate(out, seed, **kw)
    return load_dataset(out)


__all__ = [
    "ALL_VARIANTS", "ConfigError", "MissingCheckpoint", "CompareRow", "EmbedResult",
    "load_overrides", "split_overrides", "resolve", "generate", "generate_and_load", "train_stage",
    "evaluate_stage", "embed_stage", "embed_from_visits", "compare", "sha256_file",
]
