"""Training and evaluation harness: splits, schedule, optimizer, early stopping."""
from __future__ import annotations

import copy
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import Rng
from .features import SPLIT_TAGS, DecisionWindow
from .neurons import CPLIF

SPLIT_MODES = ("within_trial", "cross_trial", "cross_subject")

# learning-rate presets per dataset and protocol
LR_PRESETS = {
    "within_trial_kul": 1e-3,
    "within_trial_dtu": 5e-4,
    "within_trial_avgc": 5e-4,
    "cross_trial": 2e-4,
    "cross_subject": 2e-3,
}
BATCH_SUBJECT_DEPENDENT = 32
BATCH_SUBJECT_INDEPENDENT = 128


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = BATCH_SUBJECT_DEPENDENT
    learning_rate: float = LR_PRESETS["within_trial_kul"]
    weight_decay: float = 1e-2
    patience: int = 25
    seed: int = 200
    t_0: int = 10
    t_mult: int = 2
    eta_min: float = 1e-6
    min_delta: float = 1e-5
    stop_at_val_acc: float | None = None  # optional early exit once reached
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.t_0 < 1 or self.t_mult < 1:
            raise ValueError("t_0 and t_mult must be >= 1")
        if not self.eta_min <= self.learning_rate:
            raise ValueError("eta_min exceeds the learning rate")

    @classmethod
    def for_protocol(cls, mode: str, dataset: str = "kul", **kw) -> "TrainConfig":
        key = f"{mode}_{dataset}" if mode == "within_trial" else mode
        if key not in LR_PRESETS:
            raise ValueError(f"no learning-rate preset for {key!r}")
        batch = BATCH_SUBJECT_INDEPENDENT if mode == "cross_subject" else BATCH_SUBJECT_DEPENDENT
        return cls(**{"learning_rate": LR_PRESETS[key], "batch_size": batch, **kw})


def lr_at(epoch: float, eta_max: float, t_0: int = 10, t_mult: int = 2, eta_min: float = 1e-6) -> float:
    """Cosine annealing with warm restarts at a (possibly fractional) epoch."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if t_mult == 1:
        t_i, t_cur = t_0, epoch % t_0
    else:
        n = int(math.log(epoch / t_0 * (t_mult - 1) + 1, t_mult))
        t_cur = epoch - t_0 * (t_mult ** n - 1) / (t_mult - 1)
        t_i = t_0 * t_mult ** n
        if t_cur >= t_i:  # float rounding at a boundary
            t_cur, t_i = t_cur - t_i, t_i * t_mult
    return eta_min + 0.5 * (eta_max - eta_min) * (1 + math.cos(math.pi * t_cur / t_i))


# ---------------------------------------------------------------- splits

WindowKey = tuple[int, int, int]  # (subject, trial, index within trial)


def window_key(w: DecisionWindow) -> WindowKey:
    return (w.subject, w.trial, w.index)


@dataclass
class SplitPlan:
    mode: str
    assignment: dict[WindowKey, str]
    holdout_subject: int | None = None

    def of(self, w: DecisionWindow) -> str | None:
        return self.assignment.get(window_key(w))

    def apply(self, windows: Iterable[DecisionWindow]) -> list[DecisionWindow]:
        """Tag windows in place; windows left out of the plan get ``split=None``."""
        out = []
        for w in windows:
            w.split = self.of(w)
            out.append(w)
        return out

    def counts(self) -> dict[str, int]:
        c = {s: 0 for s in SPLIT_TAGS}
        for s in self.assignment.values():
            c[s] += 1
        return c

    def keys(self, split: str) -> set[WindowKey]:
        return {k for k, s in self.assignment.items() if s == split}


def _ratio_counts(n: int) -> tuple[int, int, int]:
    n_train = int(round(n * 0.8))
    n_val = (n - n_train) // 2
    return n_train, n_val, n - n_train - n_val


def _by_trial(windows: Sequence[DecisionWindow]) -> dict[tuple[int, int], list[DecisionWindow]]:
    groups: dict[tuple[int, int], list[DecisionWindow]] = defaultdict(list)
    for w in windows:
        groups[(w.subject, w.trial)].append(w)
    return {k: sorted(v, key=lambda w: w.index) for k, v in sorted(groups.items())}


def _within_trial(windows, purge: bool) -> dict[WindowKey, str]:
    out = {}
    for trial_windows in _by_trial(windows).values():
        n_train, n_val, _ = _ratio_counts(len(trial_windows))
        tags = ["train"] * n_train + ["val"] * n_val + ["test"] * (len(trial_windows) - n_train - n_val)
        for i, (w, tag) in enumerate(zip(trial_windows, tags)):
            if purge and i > 0 and tags[i - 1] != tag:
                # overlaps the last window of the previous set
                continue
            out[window_key(w)] = tag
    return out


def _cross_trial(windows, rng: Rng) -> dict[WindowKey, str]:
    trials = _by_trial(windows)
    per_subject: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for key in trials:
        per_subject[key[0]].append(key)
    out = {}
    for subject, keys in sorted(per_subject.items()):
        if len(keys) < 3:
            raise ValueError(f"subject {subject} has {len(keys)} trials; cross_trial needs at least 3")
        order = [keys[i] for i in rng.spawn(subject).permutation(len(keys))]
        if len(keys) < 10:
            labels = {k: trials[k][0].label for k in keys}
            first = order[0]
            other = next((k for k in order[1:] if labels[k] != labels[first]), None)
            if other is None:
                raise ValueError(f"subject {subject}: every trial has the same label")
            test = [first, other]
            rest = [k for k in order if k not in test]
            n_val = max(1, int(round(len(rest) / 9)))
            tags = {k: "test" for k in test}
            tags.update({k: "val" for k in rest[:n_val]})
            tags.update({k: "train" for k in rest[n_val:]})
        else:
            n_train, n_val, _ = _ratio_counts(len(order))
            tags = {k: ("train" if i < n_train else "val" if i < n_train + n_val else "test")
                    for i, k in enumerate(order)}
        for k, tag in tags.items():
            for w in trials[k]:
                out[window_key(w)] = tag
    return out


def _cross_subject(windows, holdout: int) -> dict[WindowKey, str]:
    if holdout not in {w.subject for w in windows}:
        raise ValueError(f"held-out subject {holdout} not present")
    out = {}
    trials = _by_trial(windows)
    # validation: the last tenth of each training trial, by position
    for (subject, _), trial_windows in trials.items():
        if subject == holdout:
            for w in trial_windows:
                out[window_key(w)] = "test"
            continue
        n_val = len(trial_windows) // 10
        for i, w in enumerate(trial_windows):
            out[window_key(w)] = "val" if i >= len(trial_windows) - n_val else "train"
    return out


def make_splits(windows: Sequence[DecisionWindow], mode: str, seed: int = 200,
                holdout_subject: int | None = None, purge_boundary: bool = False) -> SplitPlan:
    """Assign each window to train/val/test under one of the three protocols."""
    if mode not in SPLIT_MODES:
        raise ValueError(f"mode must be one of {SPLIT_MODES}")
    if not windows:
        raise ValueError("no windows to split")
    rng = Rng(seed)
    if mode == "within_trial":
        assignment = _within_trial(windows, purge_boundary)
    elif mode == "cross_trial":
        assignment = _cross_trial(windows, rng)
    else:
        if holdout_subject is None:
            raise ValueError("cross_subject needs holdout_subject")
        assignment = _cross_subject(windows, holdout_subject)
    return SplitPlan(mode, assignment, holdout_subject)


# ---------------------------------------------------------------- data

@dataclass
class FeatureSet:
    """Stacked branch inputs for a set of windows."""
    e_s: np.ndarray  # (N, C, T)
    e_f: np.ndarray  # (N, 5, H, W)
    labels: np.ndarray  # (N,)
    subjects: np.ndarray  # (N,)

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.e_s) == len(self.e_f) == len(self.subjects) == n):
            raise ValueError("feature arrays disagree on the number of windows")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.e_s[idx], self.e_f[idx], self.labels[idx], self.subjects[idx])

    def batch(self, idx, dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (torch.as_tensor(self.e_s[idx], dtype=dtype),
                torch.as_tensor(self.e_f[idx], dtype=dtype),
                torch.as_tensor(self.labels[idx], dtype=torch.long))


# ---------------------------------------------------------------- optimisation

def decay_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    """AdamW parameter groups: no decay on batch-norm affine params or CPLIF bias."""
    skip = set()
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            skip.update(id(p) for p in m.parameters(recurse=False))
        elif isinstance(m, CPLIF):
            skip.add(id(m.beta))
    decay = [p for p in model.parameters() if p.requires_grad and id(p) not in skip]
    plain = [p for p in model.parameters() if p.requires_grad and id(p) in skip]
    return [{"params": decay, "weight_decay": weight_decay}, {"params": plain, "weight_decay": 0.0}]


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@dataclass
class EvalResult:
    accuracy: float  # mean of per-subject accuracies
    sd: float  # population SD across subjects
    per_subject: dict[int, float]
    loss: float
    window_accuracy: float


def subject_summary(per_subject: dict[int, float]) -> tuple[float, float]:
    vals = np.array(list(per_subject.values()), dtype=np.float64)
    return float(vals.mean()), float(vals.std(ddof=0))


def predict(model: nn.Module, data: FeatureSet, batch_size: int = 64) -> tuple[np.ndarray, float]:
    """Predicted classes and summed cross-entropy over the set."""
    if len(data) == 0:
        raise ValueError("empty split")
    was = model.training
    model.eval()
    dtype = _dtype(model)
    preds, loss = [], 0.0
    with torch.no_grad():
        for lo in range(0, len(data), batch_size):
            idx = slice(lo, lo + batch_size)
            e_s, e_f, y = data.batch(idx, dtype)
            logits = model(e_s, e_f)
            loss += float(F.cross_entropy(logits, y, reduction="sum"))
            preds.append(logits.argmax(dim=1).numpy())
    model.train(was)
    return np.concatenate(preds), loss


def evaluate(model: nn.Module, data: FeatureSet, batch_size: int = 64) -> EvalResult:
    preds, loss = predict(model, data, batch_size)
    correct = preds == data.labels
    per_subject = {int(s): float(correct[data.subjects == s].mean()) for s in np.unique(data.subjects)}
    mean, sd = subject_summary(per_subject)
    return EvalResult(mean, sd, per_subject, loss / len(data), float(correct.mean()))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class RunHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    stop_reason: str = ""
    test: EvalResult | None = None

    def to_text(self) -> str:
        lines = [json.dumps({"record": "epoch", **asdict(e)}) for e in self.epochs]
        summary = {"record": "summary", "best_epoch": self.best_epoch,
                   "stopped_early": self.stopped_early, "stop_reason": self.stop_reason}
        if self.test is not None:
            summary.update(test_accuracy=self.test.accuracy, test_sd=self.test.sd,
                           test_window_accuracy=self.test.window_accuracy,
                           per_subject={str(k): v for k, v in self.test.per_subject.items()})
        lines.append(json.dumps(summary))
        return "\n".join(lines) + "\n"


def _is_better(loss: float, acc: float, best_loss: float, best_acc: float) -> bool:
    return loss < best_loss or (loss == best_loss and acc > best_acc)


def train(model: nn.Module, train_set: FeatureSet, val_set: FeatureSet, cfg: TrainConfig | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> RunHistory:
    """Fit ``model`` in place and restore its best-validation state before returning."""
    cfg = cfg or TrainConfig()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    dtype = _dtype(model)
    opt = torch.optim.AdamW(decay_groups(model, cfg.weight_decay), lr=cfg.learning_rate)
    rng = Rng(cfg.seed).spawn(1)
    history = RunHistory()
    best_state = copy.deepcopy(model.state_dict())
    best_loss, best_acc = math.inf, -math.inf
    stop_loss, stale = math.inf, 0
    n = len(train_set)
    steps = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        lr = cfg.learning_rate
        for i in range(steps):
            lr = lr_at(epoch + i / steps, cfg.learning_rate, cfg.t_0, cfg.t_mult, cfg.eta_min)
            for g in opt.param_groups:
                g["lr"] = lr
            idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
            e_s, e_f, y = train_set.batch(idx, dtype)
            logits = model(e_s, e_f)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch} batch {i} (lr {lr:.3g})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grads = [p.grad for p in model.parameters() if p.grad is not None]
            if grads and not torch.isfinite(torch.stack([g.abs().sum() for g in grads])).all():
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch} batch {i} (lr {lr:.3g})")
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y).sum())
        val = evaluate(model, val_set, cfg.eval_batch_size)
        rec = EpochRecord(epoch, lr, total_loss / n, correct / n, val.loss, val.window_accuracy)
        history.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if not math.isfinite(val.loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        if _is_better(val.loss, val.window_accuracy, best_loss, best_acc):
            best_loss, best_acc = val.loss, val.window_accuracy
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
        if val.loss < stop_loss - cfg.min_delta:
            stop_loss, stale = val.loss, 0
        else:
            stale += 1
        if stale >= cfg.patience:
            history.stopped_early, history.stop_reason = True, "patience"
            break
        if cfg.stop_at_val_acc is not None and val.window_accuracy >= cfg.stop_at_val_acc:
            history.stopped_early, history.stop_reason = True, "target"
            break
    model.load_state_dict(best_state)
    return history
