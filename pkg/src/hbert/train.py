"""MLM pretraining and multitask fine-tuning with Adam, plus checkpoint I/O."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import TokenizedSplit, rng_stream
from .evaluation import NoDefinedTasks, score_tasks
from .model import (ModelConfig, encode_visit, init_encoder, init_mlm_head, init_task_head,
                    mlm_corrupt, mlm_logits, task_logits, visit_embedding)
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainError(ValueError):
    pass


class MissingGrad(TrainError):
    pass


class EmptyDataset(TrainError):
    pass


class TaskCountMismatch(TrainError):
    pass


class CheckpointCorrupt(TrainError):
    pass


class VariantMismatch(TrainError):
    pass


class NumericFailure(ArithmeticError):
    pass


class Phase(str, enum.Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    phase: Phase = Phase.PRETRAIN

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every tensor in ``params``, in place."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGrad(name)
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _checked(loss: Tensor, where: str) -> Tensor:
    if not np.isfinite(loss.data).all():
        raise NumericFailure(f"non-finite loss during {where}")
    return loss


# ---------------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + <dir>/tensors/<name>.bin


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, Tensor]
    tasks: list[str]
    vocab_digest: str
    phase: Phase


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(ckpt.params):
        blob = T.tensor_to_bytes(ckpt.params[name])
        fname = f"tensors/{name}.bin"
        (path / fname).write_bytes(blob)
        entries[name] = {"file": fname, "sha256": hashlib.sha256(blob).hexdigest()}
    manifest = {
        "format": 1,
        "phase": ckpt.phase.value,
        "config": ckpt.config.to_dict(),
        "tasks": ckpt.tasks,
        "vocab_digest": ckpt.vocab_digest,
        "tensors": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        cfg = ModelConfig(**manifest["config"])
        params = {}
        for name, entry in manifest["tensors"].items():
            blob = (path / entry["file"]).read_bytes()
            if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
                raise CheckpointCorrupt(f"digest mismatch for tensor {name}")
            params[name] = T.tensor_from_bytes(blob, requires_grad=True)
        return Checkpoint(cfg, params, list(manifest["tasks"]), manifest["vocab_digest"],
                          Phase(manifest["phase"]))
    except CheckpointCorrupt:
        raise
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorrupt(f"cannot read checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# loops


@dataclass
class EpochRecord:
    epoch: int
    phase: Phase
    loss: float
    mean_auc: float | None = None
    mean_aps: float | None = None

    def csv_row(self) -> str:
        f = lambda v: "" if v is None else repr(float(v))
        return f"{self.epoch},{self.phase.value},{self.loss!r},{f(self.mean_auc)},{f(self.mean_aps)}\n"


RUN_LOG_HEADER = "epoch,phase,loss,mean_auc,mean_aps\n"


def _encoder_only(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if not k.startswith(("mlm.", "task."))}


def pretrain(cfg: ModelConfig, data: TokenizedSplit, tcfg: TrainConfig,
             params: dict[str, Tensor] | None = None) -> tuple[dict[str, Tensor], list[EpochRecord]]:
    """Masked-token pretraining; returns encoder + MLM head and one record per epoch."""
    if len(data) == 0:
        raise EmptyDataset("no visits to pretrain on")
    if params is None:
        init = rng_stream(tcfg.seed, "init")
        params = init_encoder(cfg, init)
        params.update(init_mlm_head(cfg, init))
    shuffle = rng_stream(tcfg.seed, "shuffle/pretrain")
    masker = rng_stream(tcfg.seed, "mask")
    drop = rng_stream(tcfg.seed, "dropout/pretrain")
    state = AdamState()
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        losses = []
        for _, batch in data.batches(tcfg.batch_size, shuffle):
            corrupted, loss_mask, original = mlm_corrupt(batch.token_ids, batch.pad_mask, masker, cfg.vocab_size)
            batch.token_ids = corrupted
            hidden = encode_visit(batch, cfg, params, training=True, rng=drop)
            loss = _checked(T.masked_cross_entropy(mlm_logits(hidden, params), original, loss_mask), "pretraining")
            zero_grads(params)
            T.backward(loss)
            adam_step(params, state, tcfg.learning_rate)
            losses.append(loss.item())
        history.append(EpochRecord(epoch, Phase.PRETRAIN, float(np.mean(losses))))
        log.info("pretrain %s epoch %d loss %.5f", cfg.variant.value, epoch, history[-1].loss)
    return params, history


def predict(cfg: ModelConfig, params: dict[str, Tensor], data: TokenizedSplit,
            batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode task logits ``[n, n_tasks]`` and visit embeddings ``[n, d]`` in data order."""
    logits, embs = [], []
    with T.no_grad():
        for _, batch in data.batches(batch_size):
            emb = visit_embedding(encode_visit(batch, cfg, params, training=False), batch.pad_mask)
            embs.append(emb.data)
            if "task.W" in params:
                logits.append(task_logits(emb, params).data)
    d = cfg.d_model
    emb_arr = np.concatenate(embs) if embs else np.zeros((0, d))
    log_arr = np.concatenate(logits) if logits else np.zeros((len(emb_arr), cfg.n_tasks))
    return log_arr, emb_arr


def finetune(cfg: ModelConfig, params: dict[str, Tensor], train: TokenizedSplit, tcfg: TrainConfig,
             tasks: list[str], valid: TokenizedSplit | None = None
             ) -> tuple[dict[str, Tensor], list[EpochRecord]]:
    """Joint BCE over all tasks per visit, starting from a pretrained encoder.

    The MLM head is dropped and a fresh task head is initialised. Training runs
    for exactly ``tcfg.epochs`` epochs; the final weights are returned.
    """
    if len(train) == 0:
        raise EmptyDataset("no visits to fine-tune on")
    if train.labels.shape[1] != cfg.n_tasks or len(tasks) != cfg.n_tasks:
        raise TaskCountMismatch(f"config has {cfg.n_tasks} tasks, data has {train.labels.shape[1]}")
    params = dict(_encoder_only(params))
    params.update(init_task_head(cfg, rng_stream(tcfg.seed, "init/task")))
    shuffle = rng_stream(tcfg.seed, "shuffle/finetune")
    drop = rng_stream(tcfg.seed, "dropout/finetune")
    state = AdamState()
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        losses = []
        for _, batch in train.batches(tcfg.batch_size, shuffle):
            hidden = encode_visit(batch, cfg, params, training=True, rng=drop)
            logits = task_logits(visit_embedding(hidden, batch.pad_mask), params)
            loss = _checked(T.bce_with_logits(logits, batch.labels), "fine-tuning")
            zero_grads(params)
            T.backward(loss)
            adam_step(params, state, tcfg.learning_rate)
            losses.append(loss.item())
        rec = EpochRecord(epoch, Phase.FINETUNE, float(np.mean(losses)))
        if valid is not None and len(valid):
            scores, _ = predict(cfg, params, valid)
            try:
                agg = score_tasks(tasks, valid.labels, scores)
                rec.mean_auc, rec.mean_aps = agg.mean_auc, agg.mean_aps
            except NoDefinedTasks:
                pass
        history.append(rec)
        log.info("finetune %s epoch %d loss %.5f val_auc %s", cfg.variant.value, epoch, rec.loss, rec.mean_auc)
    return params, history
