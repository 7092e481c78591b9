"""VQA training loop, evaluation with breakdowns, and run records."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .contrastive import VolumeEncoder
from .data import VqaData
from .model import ConfigError, ModelConfig, VqaModel
from .optim import Adam
from .seeding import child_rng
from .vocab import AnswerVocab, QuestionVocab, RELATIONS

ENCODER_SOURCES = ("trainable-2d", "projection-3d", "contrastive-frozen")


class CompatibilityError(ValueError):
    """Checkpoint and dataset vocabularies disagree."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 60
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"
    run_id: str = "run"
    encoder_source: str = "trainable-2d"
    contrastive_checkpoint: str | None = None
    canonical_only: bool = False

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.encoder_source not in ENCODER_SOURCES:
            raise ConfigError(f"unknown encoder source {self.encoder_source!r}")
        if self.encoder_source == "contrastive-frozen" and not self.contrastive_checkpoint:
            raise ConfigError("contrastive-frozen requires a pretrained checkpoint path")
        if not self.model.gru_only:
            wants_3d = self.encoder_source != "trainable-2d"
            if self.model.use_3d != wants_3d:
                raise ConfigError(
                    f"encoder source {self.encoder_source!r} requires use_3d={wants_3d}"
                )
        self.model.validate()
        return self

    def config_hash(self):
        blob = json.dumps(
            {k: v for k, v in asdict(self).items() if k not in ("out_dir", "run_id")},
            sort_keys=True,
            default=str,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    seed: int
    epochs: list = field(default_factory=list)  # dicts: epoch, train/val loss+acc
    best_val_acc: float = 0.0
    best_epoch: int = 0
    test_acc: float | None = None
    wall_seconds: float = 0.0
    checkpoint: str | None = None

    def to_json(self):
        return asdict(self)


def build_model(cfg: TrainConfig, question_vocab, answer_vocab):
    external = None
    if cfg.encoder_source == "contrastive-frozen":
        side = ckpt.load_sidecar(cfg.contrastive_checkpoint)
        external = VolumeEncoder(c_vol=side["c_vol"], d_vol=side["d_vol"], seed=cfg.seed)
        ckpt.load_module(cfg.contrastive_checkpoint, external)
        external.freeze()
        external.eval()
        if (external.c_vol, external.d_vol) != (cfg.model.vol_channels, cfg.model.vol_depth):
            raise ConfigError(
                f"encoder volume ({external.c_vol}, {external.d_vol}) does not match model "
                f"({cfg.model.vol_channels}, {cfg.model.vol_depth})"
            )
    return VqaModel(
        cfg.model,
        question_vocab_size=len(question_vocab),
        n_answers=len(answer_vocab),
        seed=cfg.seed,
        pad_index=question_vocab.pad_index,
        external_volume_encoder=external,
    )


def _run_epoch(model, data, batch_size, rng=None, train=True, opt=None, canonical_only=False):
    losses, correct, seen = [], 0, 0
    if train:
        model.train()
        batches = data.train_batches(batch_size, rng, canonical_only=canonical_only)
    else:
        model.eval()
        batches = data.eval_batches(batch_size, canonical_only=canonical_only)
    for batch in batches:
        if train:
            logits = model(batch["images"], batch["tokens"], batch["camera"])
            loss = ad.softmax_cross_entropy(logits, batch["answers"])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        else:
            with ad.no_grad():
                logits = model(batch["images"], batch["tokens"], batch["camera"])
                loss = ad.softmax_cross_entropy(logits, batch["answers"])
        losses.append(float(loss.data) * len(batch["answers"]))
        pred = logits.data.argmax(axis=1)
        correct += int((pred == batch["answers"]).sum())
        seen += len(batch["answers"])
    return sum(losses) / seen, correct / seen


def train_vqa(cfg: TrainConfig, log=None):
    """Fixed-epoch training with best-validation checkpointing.

    The test split is evaluated exactly once, on the checkpoint that scored
    the highest validation accuracy.
    """
    cfg.validate()
    data_dir = Path(cfg.data_dir)
    train_data = VqaData.from_shard(data_dir / "train.mrts")
    val_data = VqaData.from_shard(data_dir / "val.mrts")

    model = build_model(cfg, train_data.question_vocab, train_data.answer_vocab)
    trainable = [p for _, p in model.trainable_parameters()]
    opt = Adam(
        trainable,
        lr=cfg.lr,
        betas=cfg.betas,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )

    out = Path(cfg.out_dir) / cfg.run_id
    out.mkdir(parents=True, exist_ok=True)
    best_path = out / "best.mrtc"
    record = RunRecord(run_id=cfg.run_id, config_hash=cfg.config_hash(), seed=cfg.seed)
    sidecar = {
        "model": cfg.model.to_dict(),
        "encoder_source": cfg.encoder_source,
        "answer_tokens": list(train_data.answer_vocab.tokens),
        "question_words": list(train_data.question_vocab.words),
        "canonical_only": cfg.canonical_only,
    }

    t0 = time.time()
    for epoch in range(1, cfg.epochs + 1):
        rng = child_rng(cfg.seed, f"train/epoch{epoch}")
        tr_loss, tr_acc = _run_epoch(
            model,
            train_data,
            cfg.batch_size,
            rng=rng,
            train=True,
            opt=opt,
            canonical_only=cfg.canonical_only,
        )
        va_loss, va_acc = _run_epoch(
            model, val_data, cfg.batch_size, train=False, canonical_only=cfg.canonical_only
        )
        record.epochs.append(
            {
                "epoch": epoch,
                "train_loss": tr_loss,
                "train_acc": tr_acc,
                "val_loss": va_loss,
                "val_acc": va_acc,
            }
        )
        if va_acc > record.best_val_acc or epoch == 1:
            record.best_val_acc = va_acc
            record.best_epoch = epoch
            ckpt.save_module(best_path, model, sidecar=sidecar)
            record.checkpoint = str(best_path)
        if log:
            log(
                f"[{cfg.run_id}] epoch {epoch}/{cfg.epochs}: "
                f"train {tr_loss:.4f}/{tr_acc:.3f} val {va_loss:.4f}/{va_acc:.3f}"
            )

    # test once, on the best-val checkpoint
    ckpt.load_module(best_path, model)
    test_data = VqaData.from_shard(data_dir / "test.mrts")
    _, test_acc = _run_epoch(
        model, test_data, cfg.batch_size, train=False, canonical_only=cfg.canonical_only
    )
    record.test_acc = test_acc
    record.wall_seconds = time.time() - t0

    append_metrics(Path(cfg.out_dir) / "metrics.csv", cfg, record)
    with open(out / "record.json", "w") as f:
        json.dump(record.to_json(), f, indent=2)
    return record


def append_metrics(path, cfg, record):
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["run_id", "config_hash", "seed", "epoch", "split", "loss", "acc"])
        for row in record.epochs:
            w.writerow(
                [record.run_id, record.config_hash, record.seed, row["epoch"], "train",
                 f"{row['train_loss']:.6f}", f"{row['train_acc']:.6f}"]
            )
            w.writerow(
                [record.run_id, record.config_hash, record.seed, row["epoch"], "val",
                 f"{row['val_loss']:.6f}", f"{row['val_acc']:.6f}"]
            )
        w.writerow(
            [record.run_id, record.config_hash, record.seed, record.best_epoch, "test",
             "", f"{record.test_acc:.6f}"]
        )


def load_model_for_eval(checkpoint_path, data):
    """Rebuild a model from its sidecar and restore weights.

    Raises CompatibilityError when the checkpoint vocabularies do not match
    the dataset's.
    """
    side = ckpt.load_sidecar(checkpoint_path)
    if tuple(side["answer_tokens"]) != data.answer_vocab.tokens:
        raise CompatibilityError("checkpoint answer vocabulary does not match dataset")
    if list(side["question_words"]) != data.question_vocab.words:
        raise CompatibilityError("checkpoint question vocabulary does not match dataset")
    model_cfg = ModelConfig.from_dict(side["model"])
    if side["encoder_source"] == "contrastive-frozen":
        raise ConfigError(
            "standalone evaluation of contrastive-frozen checkpoints requires the "
            "encoder checkpoint; evaluate through its TrainConfig instead"
        )
    model = VqaModel(
        model_cfg,
        question_vocab_size=len(data.question_vocab),
        n_answers=len(data.answer_vocab),
        seed=0,
        pad_index=data.question_vocab.pad_index,
    )
    ckpt.load_module(checkpoint_path, model)
    model.eval()
    return model, side


def evaluate(model, data, batch_size=64, canonical_only=False, n_azimuth_bins=12):
    """Deterministic full-split evaluation with per-template, per-relation and
    per-azimuth-bin breakdowns. Bin accuracies weighted by count recompose the
    overall accuracy exactly."""
    model.eval()
    per_template = {}
    per_relation = {}
    bins = [[0, 0] for _ in range(n_azimuth_bins)]
    correct, seen, loss_sum = 0, 0, 0.0
    for batch in data.eval_batches(batch_size, canonical_only=canonical_only):
        with ad.no_grad():
            logits = model(batch["images"], batch["tokens"], batch["camera"])
            loss = ad.softmax_cross_entropy(logits, batch["answers"])
        pred = logits.data.argmax(axis=1)
        ok = pred == batch["answers"]
        loss_sum += float(loss.data) * len(ok)
        correct += int(ok.sum())
        seen += len(ok)
        for row, qi in enumerate(batch["item_idx"]):
            _, item = data.items[qi]
            t = per_template.setdefault(item.template_id, [0, 0])
            t[0] += int(ok[row])
            t[1] += 1
            rel = item.bindings.get("rel")
            r = per_relation.setdefault(rel, [0, 0])
            r[0] += int(ok[row])
            r[1] += 1
            b = int(batch["azimuth"][row] // (360.0 / n_azimuth_bins)) % n_azimuth_bins
            bins[b][0] += int(ok[row])
            bins[b][1] += 1
    return {
        "accuracy": correct / seen,
        "loss": loss_sum / seen,
        "count": seen,
        "per_template": {k: v[0] / v[1] for k, v in sorted(per_template.items())},
        "template_counts": {k: v[1] for k, v in sorted(per_template.items())},
        "per_relation": {k: v[0] / v[1] for k, v in per_relation.items() if k},
        "per_azimuth_bin": [c / n if n else None for c, n in bins],
        "azimuth_bin_counts": [n for _, n in bins],
    }
