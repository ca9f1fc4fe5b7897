"""On-disk dataset layout and per-variant tokenization.

A dataset directory holds::

    dataset.json           metadata (tasks, cohorts, depths, seed, spec digest)
    visits.jsonl           one visit per line (see VisitRecord.to_json)
    dx_hierarchy.tsv       diagnosis hierarchy
    rx_hierarchy.tsv       prescription hierarchy
    vocab.tsv              token<TAB>id, sorted by id
    splits/{train,valid,test}.txt   patient ids, one per line
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import VisitBatch
from .ontology import (HierarchyTree, SystemId, TokenMode, Vocabulary, build_vocabulary,
                       dump_tree, load_tree, visit_token_set)
from .synthdata import LabeledDataset, VisitRecord

SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent named sub-stream of one master seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


@dataclass
class EHRData:
    visits: list[VisitRecord]
    tasks: list[str]
    cohorts: list[str]
    splits: dict[str, list[str]]
    dx_tree: HierarchyTree
    rx_tree: HierarchyTree
    vocab: Vocabulary
    meta: dict

    @property
    def trees(self) -> tuple[HierarchyTree, HierarchyTree]:
        return self.dx_tree, self.rx_tree

    @property
    def depths(self) -> dict[SystemId, int]:
        return {SystemId.DIAGNOSIS: self.dx_tree.system.max_depth,
                SystemId.PRESCRIPTION: self.rx_tree.system.max_depth}

    def split_visits(self, split: str) -> list[VisitRecord]:
        ids = set(self.splits[split])
        return [v for v in self.visits if v.patient_id in ids]


def write_dataset(out: Path, ds: LabeledDataset, cohorts: list[str], dx_tree: HierarchyTree,
                  rx_tree: HierarchyTree, meta: dict) -> dict[str, Path]:
    out = Path(out)
    (out / "splits").mkdir(parents=True, exist_ok=True)
    vocab = build_vocabulary([dx_tree, rx_tree])
    files = {
        "visits": out / "visits.jsonl",
        "dx_hierarchy": out / "dx_hierarchy.tsv",
        "rx_hierarchy": out / "rx_hierarchy.tsv",
        "vocab": out / "vocab.tsv",
        "dataset": out / "dataset.json",
    }
    files["visits"].write_text("".join(v.to_json() + "\n" for v in ds.visits), encoding="utf-8")
    files["dx_hierarchy"].write_text(dump_tree(dx_tree), encoding="utf-8")
    files["rx_hierarchy"].write_text(dump_tree(rx_tree), encoding="utf-8")
    files["vocab"].write_text(vocab.to_tsv(), encoding="utf-8")
    for name in SPLITS:
        p = out / "splits" / f"{name}.txt"
        p.write_text("".join(pid + "\n" for pid in ds.splits[name]), encoding="utf-8")
        files[f"split_{name}"] = p
    body = dict(meta)
    body.update({
        "tasks": ds.tasks,
        "cohorts": cohorts,
        "depths": {"DIAGNOSIS": dx_tree.system.max_depth, "PRESCRIPTION": rx_tree.system.max_depth},
        "vocab_digest": vocab.digest(),
    })
    files["dataset"].write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return files


def load_dataset(data_dir: Path) -> EHRData:
    data_dir = Path(data_dir)
    try:
        meta = json.loads((data_dir / "dataset.json").read_text(encoding="utf-8"))
        depths = meta["depths"]
        dx_tree = load_tree(data_dir / "dx_hierarchy.tsv", SystemId.DIAGNOSIS, depths["DIAGNOSIS"])
        rx_tree = load_tree(data_dir / "rx_hierarchy.tsv", SystemId.PRESCRIPTION, depths["PRESCRIPTION"])
        vocab = Vocabulary.from_tsv((data_dir / "vocab.tsv").read_text(encoding="utf-8"))
        tasks = list(meta["tasks"])
        with open(data_dir / "visits.jsonl", encoding="utf-8") as fh:
            visits = [VisitRecord.from_json(line, len(tasks)) for line in fh if line.strip()]
        splits = {name: (data_dir / "splits" / f"{name}.txt").read_text(encoding="utf-8").split()
                  for name in SPLITS}
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset from {data_dir}: {exc}") from exc
    if vocab.digest() != meta.get("vocab_digest"):
        raise DataError("vocabulary file does not match dataset.json")
    return EHRData(visits, tasks, list(meta.get("cohorts", [])), splits, dx_tree, rx_tree, vocab, meta)


@dataclass
class TokenizedSplit:
    examples: list[tuple[list[int], list[tuple[int, int]]]]
    labels: np.ndarray
    patient_ids: list[str]

    def __len__(self) -> int:
        return len(self.examples)

    def batch(self, idx) -> VisitBatch:
        return VisitBatch.from_examples([self.examples[i] for i in idx], self.labels[idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None,
                bucket: int = 8) -> Iterator[tuple[np.ndarray, VisitBatch]]:
        """Fixed order without ``rng``. With ``rng``: shuffle, sort by length
        inside windows of ``bucket`` batches to cut padding, then shuffle the
        batch order."""
        if rng is None:
            order = np.arange(len(self))
            chunks = [order[s:s + batch_size] for s in range(0, len(order), batch_size)]
        else:
            order = rng.permutation(len(self))
            lengths = np.array([len(self.examples[i][0]) for i in order])
            window = batch_size * max(bucket, 1)
            chunks = []
            for s in range(0, len(order), window):
                w = order[s:s + window]
                w = w[np.argsort(lengths[s:s + window], kind="stable")]
                chunks += [w[k:k + batch_size] for k in range(0, len(w), batch_size)]
            chunks = [chunks[i] for i in rng.permutation(len(chunks))]
        for idx in chunks:
            yield idx, self.batch(idx)


def tokenize(data: EHRData, split: str, mode: TokenMode) -> TokenizedSplit:
    visits = data.split_visits(split)
    examples = [visit_token_set(list(v.dx_codes) + list(v.rx_codes), data.trees, data.depths,
                                data.vocab, mode) for v in visits]
    labels = np.array([v.labels for v in visits], dtype=np.float64).reshape(len(visits), len(data.tasks))
    return TokenizedSplit(examples, labels, [v.patient_id for v in visits])
