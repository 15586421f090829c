"""Two-phase training: maximum likelihood, then MWER fine-tuning."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from latres.channel import Utterance
from latres.errors import ConfigError, TrainingDivergedError
from latres.model import RescoringModel, mle_losses, mwer_losses, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainSchedule:
    mle_epochs: int = 20
    mwer_epochs: int = 1
    batch_size: int = 16
    lr: float = 0.01
    mwer_lr: float = 0.0001
    lr_decay: float = 0.5
    decay_start: int = 12  # first MLE epoch (0-based) whose learning rate is decayed
    clip_norm: float = 5.0
    optimizer: str = "adam"  # or "sgd"
    mwer_ce_weight: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mle_epochs < 0 or self.mwer_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def batches(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _make_optimizer(model: RescoringModel, schedule: TrainSchedule, lr: float):
    params = list(model.store.params.values())
    if schedule.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr)


def _phase_loss(model: RescoringModel, preps, phase: str, ce_weight: float) -> torch.Tensor | None:
    if phase == "mle":
        return mle_losses(model, preps).mean()
    losses, _ = mwer_losses(model, preps)
    if not losses:
        return None
    loss = torch.stack(losses).mean()
    if ce_weight > 0:
        loss = loss + ce_weight * mle_losses(model, preps).mean()
    return loss


def evaluate_loss(model: RescoringModel, utts: Sequence[Utterance], phase: str, batch_size: int = 64) -> float:
    """Mean per-utterance loss of ``phase`` ('mle' or 'mwer') without gradients."""
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(utts), batch_size):
            preps = [model.prepare(u) for u in utts[start : start + batch_size]]
            if phase == "mle":
                vals = mle_losses(model, preps).tolist()
            else:
                vals = [float(v) for v in mwer_losses(model, preps)[0]]
            total += sum(vals)
            count += len(vals)
    return total / count if count else 0.0


def token_accuracy(model: RescoringModel, utts: Sequence[Utterance], batch_size: int = 64) -> float:
    """Teacher-forced argmax accuracy on references (end token included)."""
    right, total = 0, 0
    with torch.no_grad():
        for start in range(0, len(utts), batch_size):
            preps = [model.prepare(u) for u in utts[start : start + batch_size]]
            logits, tgt, mask, _ = model.decoder_logits(model.encode(preps), [p.ref for p in preps], range(len(preps)))
            pred = logits.argmax(dim=-1)
            right += int(((pred == tgt).double() * mask).sum())
            total += int(mask.sum())
    return right / total if total else 0.0


def train(
    model: RescoringModel,
    train_utts: Sequence[Utterance],
    schedule: TrainSchedule,
    dev_utts: Sequence[Utterance] | None = None,
    out_dir: str | Path | None = None,
    metrics: list[dict] | None = None,
    header: dict | None = None,
) -> list[dict]:
    """Train in place; returns the metrics log (one dict per epoch).

    Checkpoints ``mle.ckpt`` and ``mwer.ckpt`` are written to ``out_dir`` at the
    end of each phase, plus ``metrics.jsonl``. ``header`` is stored in every
    checkpoint written here (provenance such as the run config).

    Raises:
        TrainingDivergedError: on a non-finite loss; parameters are restored
            to the last finished epoch and written to ``last_good.ckpt``.
    """
    if not train_utts:
        raise ConfigError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("", encoding="utf-8")
    log_rows = metrics if metrics is not None else []
    rng = np.random.default_rng(schedule.seed)
    preps = [model.prepare(u) for u in train_utts]
    phases = [("mle", schedule.mle_epochs, schedule.lr), ("mwer", schedule.mwer_epochs, schedule.mwer_lr)]
    for phase, epochs, base_lr in phases:
        if epochs == 0:
            continue
        opt = _make_optimizer(model, schedule, base_lr)
        for epoch in range(epochs):
            lr = base_lr
            if phase == "mle" and epoch >= schedule.decay_start:
                lr = base_lr * schedule.lr_decay ** (epoch - schedule.decay_start + 1)
            for g in opt.param_groups:
                g["lr"] = lr
            good = model.state()
            total, steps = 0.0, 0
            for idx in batches(len(preps), schedule.batch_size, rng):
                batch = [preps[i] for i in idx]
                loss = _phase_loss(model, batch, phase, schedule.mwer_ce_weight)
                if loss is None:
                    continue
                value = float(loss.detach())
                if not math.isfinite(value):
                    model.load_state(good)
                    path = None
                    if out is not None:
                        path = str(out / "last_good.ckpt")
                        save_checkpoint(model, path, {**(header or {}), "schedule": schedule.to_dict()})
                    raise TrainingDivergedError(f"non-finite {phase} loss in epoch {epoch}", path)
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(list(model.store.params.values()), schedule.clip_norm)
                opt.step()
                total += value
                steps += 1
            row = {"phase": phase, "epoch": epoch, "lr": lr, "train_loss": total / max(steps, 1)}
            if dev_utts:
                row["dev_loss"] = evaluate_loss(model, dev_utts, phase)
            log_rows.append(row)
            log.info("%s epoch %d: %s", phase, epoch, row)
            if out is not None:
                with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
        if out is not None:
            save_checkpoint(model, out / f"{phase}.ckpt", {**(header or {}), "schedule": schedule.to_dict()})
    return log_rows
