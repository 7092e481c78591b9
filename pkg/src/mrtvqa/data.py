"""In-memory dataset views over shards for the two training stages."""

from __future__ import annotations

import numpy as np

from .contrastive import ViewBank
from .shards import read_shard
from .vocab import AnswerVocab, QuestionVocab


class VqaData:
    """Flattened QA items with per-scene image/camera stacks.

    Images stay uint8 until batch assembly; cameras are the raw six-number
    form (orientation Euler angles + position) recomputed at load time.
    """

    def __init__(self, records, answer_vocab=None, question_vocab=None):
        self.answer_vocab = answer_vocab or AnswerVocab()
        self.question_vocab = question_vocab or QuestionVocab()
        self.scenes = [r.scene for r in records]
        self.images = [r.images for r in records]
        self.cameras = [
            np.stack([cam.raw6() for cam in r.cameras]).astype(np.float32) for r in records
        ]
        self.azimuths = [
            np.array([cam.azimuth for cam in r.cameras], dtype=np.float32) for r in records
        ]
        self.items = []
        for si, r in enumerate(records):
            for item in r.qa:
                self.items.append((si, item))
        if not self.items:
            raise ValueError("dataset contains no questions")
        self.max_len = max(len(item.tokens) for _, item in self.items)
        self.n_views = self.images[0].shape[0] if records else 0

    def __len__(self):
        return len(self.items)

    @classmethod
    def from_shard(cls, path, **kw):
        return cls(read_shard(path), **kw)

    def _assemble(self, idxs, view_ids):
        imgs, cams, answers, azs = [], [], [], []
        tokens = np.zeros((len(idxs), self.max_len), dtype=np.int64)
        for row, (qi, vi) in enumerate(zip(idxs, view_ids)):
            si, item = self.items[qi]
            img = self.images[si][vi].astype(np.float32) / 255.0
            imgs.append(img.transpose(2, 0, 1) * 2.0 - 1.0)
            cams.append(self.cameras[si][vi])
            azs.append(self.azimuths[si][vi])
            tokens[row, : len(item.tokens)] = item.tokens
            answers.append(self.answer_vocab.encode(item.answer))
        return {
            "images": np.stack(imgs),
            "tokens": tokens,
            "camera": np.stack(cams),
            "answers": np.array(answers, dtype=np.int64),
            "azimuth": np.array(azs, dtype=np.float32),
            "item_idx": np.array(idxs, dtype=np.int64),
        }

    def train_batches(self, batch_size, rng, canonical_only=False):
        """Shuffled minibatches with a freshly sampled view per question."""
        order = rng.permutation(len(self.items))
        for start in range(0, len(order), batch_size):
            idxs = order[start : start + batch_size]
            if len(idxs) < 2:
                continue  # batch norm needs at least two samples
            if canonical_only:
                views = np.zeros(len(idxs), dtype=np.int64)
            else:
                views = rng.integers(0, self.n_views, size=len(idxs))
            yield self._assemble(idxs, views)

    def eval_batches(self, batch_size, canonical_only=False):
        """Deterministic pass: question i always evaluates against view i % V."""
        idxs = np.arange(len(self.items))
        if canonical_only:
            views = np.zeros(len(idxs), dtype=np.int64)
        else:
            views = idxs % self.n_views
        for start in range(0, len(idxs), batch_size):
            sl = slice(start, start + batch_size)
            yield self._assemble(idxs[sl], views[sl])

    def answer_indices(self):
        return np.array([self.answer_vocab.encode(item.answer) for _, item in self.items])


def view_bank(records, include_canonical=True):
    """Camera-free view stacks for the contrastive stage."""
    ids, images = [], []
    for r in records:
        ids.append(r.scene.scene_id)
        imgs = r.images if include_canonical else r.images[1:]
        images.append(imgs)
    return ViewBank(ids, images)


def majority_baseline(train_data, eval_data):
    """Most frequent training answer and its accuracy on the eval split."""
    train_ans = train_data.answer_indices()
    counts = np.bincount(train_ans, minlength=len(train_data.answer_vocab))
    top = int(counts.argmax())
    eval_ans = eval_data.answer_indices()
    acc = float((eval_ans == top).mean())
    return {
        "token": train_data.answer_vocab.decode(top),
        "train_fraction": float(counts[top] / counts.sum()),
        "accuracy": acc,
    }
