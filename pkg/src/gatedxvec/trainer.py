"""Speaker-classification training: chunk sampling, Adam with L2 decay, LR schedule."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import FeatureArchive
from .network import Model, forward
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    initial_lr: float = 0.00015
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    chunk_frames: int = 1000
    batch_size: int = 32
    max_epochs: int = 20
    chunks_per_epoch: int = 0  # 0: one chunk per eligible training utterance
    weight_decay: float = 1e-4
    lr_decay: float = 0.5
    patience: int = 3
    min_lr: float = 1e-6
    seed: int = 0

    def validate(self, receptive_field: int = 1) -> "TrainConfig":
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.chunk_frames < receptive_field:
            raise ValueError(f"chunk_frames {self.chunk_frames} is below the receptive field {receptive_field}")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm needs batch statistics)")
        if not 0 < self.lr_decay < 1:
            raise ValueError("lr_decay must lie in (0, 1)")
        if self.weight_decay < 0 or self.max_epochs < 1 or self.chunks_per_epoch < 0:
            raise ValueError("weight_decay, max_epochs and chunks_per_epoch out of range")
        return self


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    valid_accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_text(self) -> str:
        lines = ["epoch train_loss valid_loss valid_accuracy lr"]
        for i, row in enumerate(zip(self.train_loss, self.valid_loss, self.valid_accuracy, self.lr), start=1):
            lines.append(f"{i} " + " ".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


@dataclass
class PlateauSchedule:
    """Multiply the LR by ``decay`` after ``patience`` epochs without a new best loss."""

    lr: float
    decay: float = 0.5
    patience: int = 3
    min_lr: float = 1e-6
    best: float = np.inf
    stall: int = 0

    def update(self, loss: float) -> bool:
        """Record one validation loss; returns True when it is a new best."""
        if loss < self.best:
            self.best, self.stall = loss, 0
            return True
        self.stall += 1
        if self.stall >= self.patience:
            self.lr *= self.decay
            self.stall = 0
        return False

    @property
    def finished(self) -> bool:
        return self.lr < self.min_lr


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    return T.cross_entropy(logits, labels)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam update in place; the L2 term is folded into the gradient."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape}, grad {g.shape}, state {m.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class ChunkSampler:
    """Random fixed-length windows from randomly chosen utterances.

    Utterances shorter than ``chunk_frames`` are skipped; ``skipped`` counts them.
    """

    def __init__(self, archive: FeatureArchive, labels: dict[str, int], chunk_frames: int, seed: int):
        self.chunk_frames = chunk_frames
        self.ids = [u for u in archive if archive[u].features.shape[0] >= chunk_frames]
        self.skipped = len(archive) - len(self.ids)
        if self.skipped:
            log.warning("skipping %d utterances shorter than %d frames", self.skipped, chunk_frames)
        if not self.ids:
            raise ValueError(f"no utterance has at least {chunk_frames} frames")
        self.archive = archive
        self.labels = labels
        self.rng = np.random.default_rng(seed)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        while True:
            yield self.sample()

    def sample(self) -> tuple[np.ndarray, int]:
        utt = self.ids[int(self.rng.integers(len(self.ids)))]
        feats = self.archive[utt].features
        start = int(self.rng.integers(feats.shape[0] - self.chunk_frames + 1))
        return feats[start:start + self.chunk_frames], self.labels[utt]

    def batch(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        chunks, labels = zip(*(self.sample() for _ in range(n)))
        return np.stack(chunks), np.array(labels)


def chunk_sampler(archive, labels, chunk_frames, seed) -> ChunkSampler:
    return ChunkSampler(archive, labels, chunk_frames, seed)


def speaker_labels(archive: FeatureArchive, speakers: list[str] | None = None) -> dict[str, int]:
    index = {s: i for i, s in enumerate(speakers or archive.speakers())}
    return {u: index[archive[u].speaker] for u in archive}


def evaluate_loss(model: Model, archive: FeatureArchive, labels: dict[str, int]) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over whole utterances in eval mode."""
    by_len: dict[int, list[str]] = {}
    for u in archive:
        by_len.setdefault(archive[u].features.shape[0], []).append(u)
    total, correct, n = 0.0, 0, 0
    with T.no_grad():
        for _, ids in sorted(by_len.items()):
            x = Tensor(np.stack([archive[u].features for u in ids]))
            y = np.array([labels[u] for u in ids])
            logits = forward(model, x, train=False)
            total += T.cross_entropy(logits, y).item() * len(ids)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            n += len(ids)
    return total / n, correct / n


def train_step(model: Model, x: np.ndarray, y: np.ndarray, state: AdamState, lr: float, cfg: TrainConfig) -> float:
    params = model.parameters()
    with T.Tape():
        loss = cross_entropy_loss(forward(model, Tensor(x), train=True), y)
        T.zero_grads(params)
        T.backward(loss)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at optimizer step {state.step + 1}")
    adam_step(params, [p.grad for p in params], state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    return value


def train(model: Model, train_set: FeatureArchive, valid_set: FeatureArchive,
          cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    """Train on random chunks; decay the LR when validation loss stalls.

    Returns the parameters from the epoch with the lowest validation loss.
    """
    cfg.validate(model.spec.receptive_field)
    overlap = set(train_set) & set(valid_set)
    if overlap:
        raise ValueError(f"validation shares {len(overlap)} utterances with training, e.g. {sorted(overlap)[0]}")
    speakers = train_set.speakers()
    if len(speakers) < 2:
        raise ValueError("training needs at least two speakers")
    if len(speakers) != model.spec.num_speakers:
        raise ValueError(f"model has {model.spec.num_speakers} outputs but data has {len(speakers)} speakers")
    unknown = set(valid_set.speakers()) - set(speakers)
    if unknown:
        raise ValueError(f"validation speakers missing from training: {sorted(unknown)[:3]}")
    train_labels = speaker_labels(train_set, speakers)
    valid_labels = speaker_labels(valid_set, speakers)
    sampler = ChunkSampler(train_set, train_labels, cfg.chunk_frames, cfg.seed)
    steps = max(1, (cfg.chunks_per_epoch or len(sampler.ids)) // cfg.batch_size)
    state = AdamState.for_params(model.parameters())
    history = TrainHistory()
    schedule = PlateauSchedule(cfg.initial_lr, cfg.lr_decay, cfg.patience, cfg.min_lr)
    best_state = None
    for epoch in range(1, cfg.max_epochs + 1):
        lr = schedule.lr
        losses = [train_step(model, *sampler.batch(cfg.batch_size), state, lr, cfg) for _ in range(steps)]
        v_loss, v_acc = evaluate_loss(model, valid_set, valid_labels)
        if not np.isfinite(v_loss):
            raise TrainingDiverged(f"validation loss became {v_loss} in epoch {epoch}")
        history.train_loss.append(float(np.mean(losses)))
        history.valid_loss.append(v_loss)
        history.valid_accuracy.append(v_acc)
        history.lr.append(lr)
        log.info("epoch=%d train_loss=%.6f valid_loss=%.6f lr=%.6g", epoch, history.train_loss[-1], v_loss, lr)
        if schedule.update(v_loss):
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_arrays())
        if schedule.finished:
            break
    if best_state is not None:
        model.load_state_arrays(best_state)
    return model, history
