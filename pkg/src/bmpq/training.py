"""Quantization-aware training with interval-driven bit-width re-assignment.

Per batch: quantize the shadow weights at the current widths, run the
forward pass with PACT-quantized activations, backpropagate through the
straight-through estimators, feed each layer's weight gradient into the
sensitivity ledger, and update shadow weights and clipping levels with
momentum SGD.

At each interval boundary that falls at or after the warm-up, the ENBG of
every flexible layer becomes the coefficient of a budgeted knapsack whose
solution sets the widths for the next interval.  Optimizer state, shadow
weights and clipping levels carry over unchanged.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import allocator
from .autograd import SGD, backward, softmax_cross_entropy
from .data import DatasetHandle, augment_batch, batches, epoch_rng
from .errors import ContractError
from .models import ModelSpec
from .network import Network
from .packing import PackedModel, config_hash, export_network
from .quant import ALPHA_FLOOR
from .sensitivity import SensitivityLedger
from .storage import mb_to_bits

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    support_bits: List[int] = field(default_factory=lambda: [2, 4])
    budget_bits: Optional[int] = None
    budget_mb: Optional[float] = None
    epochs: int = 10
    warmup_epochs: int = 2
    interval_epochs: int = 2
    interval_schedule: Optional[List[int]] = None  # aperiodic interval lengths
    reassign_after_final_epoch: bool = False
    lr: float = 0.1
    lr_milestones: List[int] = field(default_factory=list)
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    augment: bool = False
    augment_pad: int = 4
    pact_alpha_init: float = 8.0
    sensitivity_stride: int = 1
    quantize: bool = True
    clip_ste: bool = False
    eval_every_epoch: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def budget(self) -> int:
        if self.budget_bits is not None:
            return int(self.budget_bits)
        if self.budget_mb is not None:
            return mb_to_bits(self.budget_mb)
        raise ContractError("training config needs budget_bits or budget_mb")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-indexed ``epoch`` (step decay at each milestone)."""
        return self.lr * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)

    def boundaries(self) -> List[int]:
        """1-indexed epochs at which an interval ends."""
        ends, e, i = [], 0, 0
        while True:
            if self.interval_schedule:
                sched = self.interval_schedule
                e += sched[i] if i < len(sched) else sched[-1]
            else:
                e += self.interval_epochs
            if e > self.epochs:
                return ends
            ends.append(e)
            i += 1


@dataclass
class History:
    metrics: List[dict] = field(default_factory=list)
    assignments: List[dict] = field(default_factory=list)
    intervals: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class Trainer:
    """Owns every piece of mutable training state for one run."""

    def __init__(self, spec: ModelSpec, config: TrainConfig, train: DatasetHandle,
                 test: Optional[DatasetHandle] = None):
        self.spec = spec
        self.config = config
        self.train = train if train.mean is not None else train.with_stats()
        self.test = None if test is None else test.with_stats(self.train.mean, self.train.std)
        self.budget = config.budget()
        self.support = sorted(config.support_bits)
        self.network = Network(spec, seed=config.seed, pact_alpha_init=config.pact_alpha_init)
        self.optimizer = SGD(self.network.parameters(), config.lr, config.momentum,
                             config.weight_decay)
        self.ledger = SensitivityLedger([l.name for l in spec.layers], max(self.support))
        self.assignment = allocator.warmup_assignment(spec, self.support)
        if not config.quantize:
            self.assignment.bits = {k: 16 for k in self.assignment.bits}
        allocator.apply_assignment(self.network, self.assignment)
        self.history = History()
        self.history.assignments.append(self._assignment_record(0, None))
        self.epoch = 0
        self._x_train = self.train.to_float() if not config.augment else None
        self._x_test = None if self.test is None else self.test.to_float()
        minimal = allocator.ILPInstance(
            [allocator.LayerGroup(l.name, [l.name], 0.0, l.param_count)
             for l in spec.flexible_layers], self.support, self.budget)
        if config.quantize and not minimal.feasible:
            raise allocator.InfeasibleError(
                f"budget {self.budget} bits is below the floor {minimal.min_cost} bits",
                minimal.min_cost)

    # -- one step

    def train_step(self, x: np.ndarray, y: np.ndarray, batch_index: int = 0) -> tuple:
        """One SGD step; returns ``(mean loss, correct predictions)``."""
        cfg = self.config
        net = self.network
        net.zero_grad()
        logits, used = net.forward(x, training=True, quantize=cfg.quantize, clip_ste=cfg.clip_ste)
        loss = softmax_cross_entropy(logits, y)
        backward(loss)
        if cfg.quantize and batch_index % cfg.sensitivity_stride == 0:
            for name, qt in used.items():
                self.ledger.accumulate_batch(name, net.weights[name].grad, qt.scale)
        self.optimizer.step()
        for p in net.pact.values():
            p.clamp(ALPHA_FLOOR)
        return float(loss.data), int((logits.data.argmax(axis=1) == y).sum())

    # -- one epoch

    def run_epoch(self) -> dict:
        cfg = self.config
        e = self.epoch
        self.optimizer.lr = cfg.lr_at(e)
        total, correct, seen = 0.0, 0, 0
        aug_rng = epoch_rng(cfg.seed, e, 1)
        for b, idx in enumerate(batches(self.train, cfg.batch_size, cfg.seed, e)):
            if len(idx) < 2:
                log.warning("skipping a batch of size %d (batchnorm needs >= 2)", len(idx))
                continue
            if cfg.augment:
                x = self.train.to_float(augment_batch(self.train.images[idx], aug_rng,
                                                      cfg.augment_pad))
            else:
                x = self._x_train[idx]
            y = self.train.labels[idx]
            loss, hits = self.train_step(x, y, b)
            total += loss * len(idx)
            correct += hits
            seen += len(idx)
        self.epoch += 1
        if cfg.quantize:
            self.ledger.finalize_epoch()
        row = {
            "epoch": self.epoch,
            "lr": self.optimizer.lr,
            "loss": total / max(seen, 1),
            "train_accuracy": correct / max(seen, 1),
        }
        if self._x_test is not None and (cfg.eval_every_epoch or self.epoch == cfg.epochs):
            row["test_accuracy"] = self.evaluate()
        row.update({f"q[{k}]": v for k, v in self.network.bits.items()})
        self.history.metrics.append(row)
        log.info("epoch %d loss %.4f train %.4f test %s", self.epoch, row["loss"],
                 row["train_accuracy"], row.get("test_accuracy"))
        if cfg.quantize and self.epoch in cfg.boundaries():
            self.interval_boundary()
        return row

    def interval_boundary(self) -> Optional[allocator.BitAssignment]:
        """Close the current interval; re-assign widths unless still warming up."""
        cfg = self.config
        enbg = self.ledger.enbg_all()
        record = {"epoch": self.epoch, "interval": self.ledger.interval,
                  "epoch_nbg": self.ledger.snapshot()["epoch_nbg"], "enbg": enbg}
        self.history.intervals.append(record)
        result = None
        final = self.epoch >= cfg.epochs and not cfg.reassign_after_final_epoch
        if self.epoch >= cfg.warmup_epochs and not final:
            instance = allocator.build_instance(self.ledger, self.spec, self.budget, self.support)
            solved = allocator.solve_exact(instance)
            result = allocator.merge_assignment(self.spec, solved, self.ledger.interval + 1)
            old = dict(self.assignment.bits)
            allocator.apply_assignment(self.network, result)
            self.assignment = result
            self.history.assignments.append(self._assignment_record(self.epoch, instance))
            changed = {k: (old[k], v) for k, v in result.bits.items() if old[k] != v}
            log.info("epoch %d re-assignment objective %.6g cost %d changed %s",
                     self.epoch, solved.objective, solved.cost, changed)
        self.ledger.reset_interval()
        return result

    def _assignment_record(self, epoch: int, instance) -> dict:
        a = self.assignment
        rec = {"epoch": epoch, "interval": a.interval, "bits": dict(a.bits),
               "objective": a.objective,
               "cost_bits": allocator.flexible_cost(self.spec, a.bits),
               "budget_bits": self.budget}
        if instance is not None:
            rec["sensitivity"] = {g.id: g.sensitivity for g in instance.groups}
        return rec

    def fit(self) -> History:
        while self.epoch < self.config.epochs:
            self.run_epoch()
        return self.history

    def evaluate(self, data: Optional[DatasetHandle] = None) -> float:
        if data is None:
            x, y = self._x_test, self.test.labels
        else:
            data = data.with_stats(self.train.mean, self.train.std)
            x, y = data.to_float(), data.labels
        return self.network.accuracy(x, y, quantize=self.config.quantize)

    # -- outputs

    def write_metrics_csv(self, path) -> None:
        rows = self.history.metrics
        keys = []
        for r in rows:
            keys += [k for k in r if k not in keys]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)

    def write_history_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.history.to_dict(), indent=1, sort_keys=True))

    def packed_metadata(self) -> dict:
        return packed_metadata(self.spec, dict(self.network.bits), self.history.to_dict(),
                               self.config.to_dict(), self.train.mean, self.train.std)

    # -- checkpoints

    def checkpoint_save(self, path) -> None:
        arrays = {f"state/{k}": v for k, v in self.network.state_arrays().items()}
        for i, buf in enumerate(self.optimizer.state()):
            if buf is not None:
                arrays[f"velocity/{i}"] = buf
        meta = {
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "spec": self.spec.to_dict(),
            "assignment": self.assignment.to_dict(),
            "ledger": self.ledger.state(),
            "history": self.history.to_dict(),
            "train_stats": [self.train.mean.tolist(), self.train.std.tolist()],
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def checkpoint_load(cls, path, train: DatasetHandle,
                        test: Optional[DatasetHandle] = None) -> "Trainer":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            state = {k[len("state/"):]: z[k] for k in z.files if k.startswith("state/")}
            vel = {int(k.split("/")[1]): z[k] for k in z.files if k.startswith("velocity/")}
        spec = ModelSpec.from_dict(meta["spec"])
        mean, std = meta["train_stats"]
        trainer = cls(spec, TrainConfig.from_dict(meta["config"]), train.with_stats(mean, std), test)
        trainer.network.load_state_arrays(state)
        trainer.optimizer.load_state([vel.get(i) for i in range(len(trainer.optimizer.params))])
        a = meta["assignment"]
        trainer.assignment = allocator.BitAssignment(a["bits"], a["fixed"], a["interval"],
                                                     a["objective"], a["cost"])
        trainer.network.set_bits(a["bits"])
        trainer.ledger = SensitivityLedger.from_state(meta["ledger"])
        h = meta["history"]
        trainer.history = History(h["metrics"], h["assignments"], h["intervals"])
        trainer.epoch = meta["epoch"]
        return trainer


def packed_metadata(spec: ModelSpec, bits: Dict[str, int], history: dict, config: dict,
                    mean, std) -> dict:
    """Metadata stored alongside the packed weights of a trained model."""
    return {
        "spec": spec.to_dict(),
        "bits": dict(bits),
        "assignments": history["assignments"],
        "enbg": [{"epoch": r["epoch"], "enbg": r["enbg"]} for r in history["intervals"]],
        "config_hash": config_hash(config),
        "normalization": {"mean": np.asarray(mean).tolist(), "std": np.asarray(std).tolist()},
        "head_variant": spec.variant,
    }


def export_checkpoint(path) -> PackedModel:
    """Packed model from a checkpoint file, without touching any dataset."""
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        state = {k[len("state/"):]: z[k] for k in z.files if k.startswith("state/")}
    spec = ModelSpec.from_dict(meta["spec"])
    net = Network(spec)
    net.load_state_arrays(state)
    net.set_bits(meta["assignment"]["bits"])
    mean, std = meta["train_stats"]
    return export_network(net, packed_metadata(spec, net.bits, meta["history"], meta["config"],
                                               mean, std))


def bmpq_train(spec: ModelSpec, train: DatasetHandle, test: Optional[DatasetHandle],
               config: TrainConfig) -> Trainer:
    """Run a full schedule and return the trainer (network plus history)."""
    trainer = Trainer(spec, config, train, test)
    trainer.fit()
    return trainer
