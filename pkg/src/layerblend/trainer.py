"""Classification head and the seeded fine-tuning loop.

A run fine-tunes every encoder parameter, the combiner weights, and the
head jointly (nothing is frozen), records per-epoch training loss,
validation metrics and wall-clock time, snapshots the parameters whenever
validation accuracy improves, and reports test metrics from the snapshot
of the best epoch (earliest on ties). Runs are bit-reproducible given the
seed: the head init, dropout, and batch shuffling are the only random
streams.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .combiner import (
    CombinationSpec,
    CombinerParams,
    allocate_params,
    combine,
    validate_spec_for_model,
)
from .data import DatasetSplits, TokenizedSequence, batch_iter
from .diffcore import Adam, Tensor
from .encoder import Checkpoint, Encoder, Mode
from .errors import ContractError, InputError
from .stats import accuracy, weighted_f1


@dataclass(frozen=True)
class TrainHyper:
    """Fine-tuning hyper-parameters; the reference profile is B=64,
    lr=1e-5, 10 epochs, dropout 0.1, seeds 0..9."""

    batch_size: int = 64
    learning_rate: float = 1e-5
    epochs: int = 10
    dropout: float = 0.1
    seeds: tuple[int, ...] = tuple(range(10))
    eval_batch_size: int = 256

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)


class ClassifierHead:
    """Dropout plus one linear layer; softmax lives in the loss/metrics."""

    def __init__(self, hidden_size: int, num_classes: int, p_drop: float,
                 rng: np.random.Generator):
        if num_classes < 2:
            raise ContractError("need at least two classes")
        self.num_classes = num_classes
        self.p_drop = p_drop
        self.weight = Tensor(rng.normal(0.0, 0.02, (hidden_size, num_classes)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)

    def logits(self, rep: Tensor, mode: Mode = "eval",
               rng: np.random.Generator | None = None) -> Tensor:
        if rep.shape[-1] != self.weight.shape[0]:
            raise ContractError(
                f"representation size {rep.shape[-1]} does not match head "
                f"input {self.weight.shape[0]}"
            )
        single = rep.ndim == 1
        if single:
            rep = dc.reshape(rep, (1, rep.shape[0]))
        if mode == "train" and self.p_drop > 0.0:
            rep = dc.dropout(rep, self.p_drop, rng)
        out = dc.add(dc.matmul(rep, self.weight), self.bias)
        if single:
            out = dc.reshape(out, (self.num_classes,))
        return out

    def as_dict(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}


def head_forward(rep: Tensor, head: ClassifierHead, mode: Mode = "eval",
                 rng: np.random.Generator | None = None) -> Tensor:
    """Class probabilities for one representation (or a batch of them)."""
    return dc.softmax(head.logits(rep, mode, rng), axis=-1)


@dataclass
class ClassifierModel:
    """Encoder, combination strategy, combiner weights, and head as a unit."""

    encoder: Encoder
    spec: CombinationSpec
    combiner_params: CombinerParams
    head: ClassifierHead

    def all_params(self) -> dict[str, Tensor]:
        params = self.encoder.parameters()
        params.update(self.combiner_params.as_dict())
        params.update(self.head.as_dict())
        return params

    def logits(self, batch: Sequence[TokenizedSequence], mode: Mode = "eval",
               rng: np.random.Generator | None = None) -> Tensor:
        states = self.encoder.encode(batch, mode, rng)
        rep = combine(states, self.spec, self.combiner_params)
        return self.head.logits(rep, mode, rng)

    def predict(self, split: Sequence[TokenizedSequence],
                batch_size: int = 256) -> np.ndarray:
        preds = []
        with dc.no_grad():
            for start in range(0, len(split), batch_size):
                logits = self.logits(split[start:start + batch_size], "eval")
                preds.append(np.argmax(logits.values, axis=-1))
        return np.concatenate(preds)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.all_params().items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, p in self.all_params().items():
            p.values = snapshot[name].copy()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_f1w: float
    wall_seconds: float


@dataclass
class RunResult:
    """Outcome of one (spec, seed) fine-tuning run."""

    spec: CombinationSpec
    seed: int
    best_epoch: int
    test_accuracy: float
    test_f1w: float
    epochs: list[EpochRecord]
    num_layers: int
    hyper: dict

    def to_json(self) -> str:
        record = {
            "spec": str(self.spec),
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "test_accuracy": self.test_accuracy,
            "test_f1w": self.test_f1w,
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
            "num_layers": self.num_layers,
            "hyper": self.hyper,
        }
        return json.dumps(record, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunResult":
        d = json.loads(line)
        return cls(
            spec=CombinationSpec.parse(d["spec"]),
            seed=d["seed"],
            best_epoch=d["best_epoch"],
            test_accuracy=d["test_accuracy"],
            test_f1w=d["test_f1w"],
            epochs=[EpochRecord(**e) for e in d["epochs"]],
            num_layers=d["num_layers"],
            hyper=d["hyper"],
        )

    def mean_epoch_seconds(self) -> float:
        return float(np.mean([e.wall_seconds for e in self.epochs]))


def select_best_epoch(records: Sequence[EpochRecord]) -> int:
    """Epoch (1-based) with the highest validation accuracy, earliest on ties."""
    if not records:
        raise ContractError("no epoch records to select from")
    best = records[0]
    for rec in records[1:]:
        if rec.val_accuracy > best.val_accuracy:
            best = rec
    return best.epoch


def evaluate(model: ClassifierModel, split: Sequence[TokenizedSequence],
             batch_size: int = 256) -> tuple[float, float, np.ndarray]:
    """Accuracy, weighted F1, and argmax predictions on a split (eval mode)."""
    preds = model.predict(split, batch_size)
    labels = np.array([s.label for s in split])
    return (
        accuracy(preds, labels),
        weighted_f1(preds, labels, model.head.num_classes),
        preds,
    )


def fine_tune(
    ckpt: Checkpoint,
    spec: CombinationSpec,
    data: DatasetSplits,
    hyper: TrainHyper,
    seed: int,
) -> tuple[RunResult, ClassifierModel]:
    """Fine-tune one strategy for one seed; returns the run record and the
    model restored to its best-validation snapshot."""
    if not data.train or not data.valid or not data.test:
        raise InputError("fine_tune needs non-empty train/valid/test splits")
    validate_spec_for_model(spec, ckpt.config.num_layers)

    head_rng = np.random.default_rng([seed, 23])
    drop_rng = np.random.default_rng([seed, 29])
    encoder = Encoder.from_checkpoint(ckpt, dropout=hyper.dropout)
    model = ClassifierModel(
        encoder=encoder,
        spec=spec,
        combiner_params=allocate_params(spec, encoder.config),
        head=ClassifierHead(encoder.config.hidden_size, data.num_classes,
                            hyper.dropout, head_rng),
    )
    optimizer = Adam(model.all_params(), lr=hyper.learning_rate)

    records: list[EpochRecord] = []
    best_snapshot = model.snapshot()
    best_accuracy = -1.0
    for epoch in range(1, hyper.epochs + 1):
        started = time.perf_counter()
        loss_sum = 0.0
        sample_count = 0
        for batch in batch_iter(data.train, hyper.batch_size, seed, epoch):
            labels = np.array([s.label for s in batch])
            logits = model.logits(batch, "train", drop_rng)
            loss = dc.cross_entropy(logits, labels)
            optimizer.zero_grad()
            dc.backward(loss)
            optimizer.step()
            loss_sum += loss.item() * len(batch)
            sample_count += len(batch)
        wall = time.perf_counter() - started
        val_acc, val_f1, _ = evaluate(model, data.valid, hyper.eval_batch_size)
        records.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / sample_count,
            val_accuracy=val_acc,
            val_f1w=val_f1,
            wall_seconds=wall,
        ))
        if val_acc > best_accuracy:
            best_accuracy = val_acc
            best_snapshot = model.snapshot()

    best_epoch = select_best_epoch(records)
    model.restore(best_snapshot)
    test_acc, test_f1, _ = evaluate(model, data.test, hyper.eval_batch_size)
    result = RunResult(
        spec=spec,
        seed=seed,
        best_epoch=best_epoch,
        test_accuracy=test_acc,
        test_f1w=test_f1,
        epochs=records,
        num_layers=ckpt.config.num_layers,
        hyper=hyper.to_dict(),
    )
    return result, model
