"""Optimization recipe: dual-length batch sampling, losses, AMSGrad, cosine LR."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericError, ParameterSet, Tensor


@dataclass
class BatchSpec:
    """Mini-batch composition: two utterances per sampled speaker."""

    speakers_per_batch: int = 8
    utts_per_speaker: int = 2
    fixed_len: int = 59049
    random_len_range: tuple[int, int] = (16000, 59049)

    @property
    def batch_size(self) -> int:
        return self.speakers_per_batch * self.utts_per_speaker

    def validate(self) -> None:
        if self.speakers_per_batch < 1:
            raise ValueError("speakers_per_batch must be >= 1")
        if self.utts_per_speaker != 2:
            raise ValueError("batch construction uses exactly 2 utterances per speaker")
        lo, hi = self.random_len_range
        if not (1 <= lo <= hi <= self.fixed_len):
            raise ValueError(
                f"random_len_range {self.random_len_range} must lie within "
                f"[1, {self.fixed_len}]"
            )


@dataclass
class LRSchedule:
    lr_start: float = 1e-3
    lr_end: float = 1e-7
    total_epochs: int = 80

    def validate(self) -> None:
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")


def cosine_lr(epoch: float, schedule: LRSchedule) -> float:
    """Half-cosine decay from lr_start at epoch 0 to lr_end at total_epochs."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside [0, {schedule.total_epochs}]"
        )
    span = schedule.lr_start - schedule.lr_end
    return schedule.lr_end + 0.5 * span * (1 + math.cos(math.pi * epoch / schedule.total_epochs))


def pre_emphasis(x: np.ndarray, coeff: float = 0.97) -> np.ndarray:
    """First-order high-pass: y[n] = x[n] - coeff * x[n-1], y[0] = x[0]."""
    x = np.asarray(x)
    if x.shape[-1] == 0:
        raise ValueError("pre_emphasis: empty input")
    y = x.copy()
    y[..., 1:] -= coeff * x[..., :-1]
    return y


def duplicate_to_length(x: np.ndarray, target_len: int) -> np.ndarray:
    """Tile end-to-end and truncate to exactly target_len samples."""
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError("duplicate_to_length: empty input")
    if x.shape[0] >= target_len:
        return x[:target_len]
    reps = -(-target_len // x.shape[0])
    return np.tile(x, reps)[:target_len]


def crop_or_tile(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop when longer, tile when shorter."""
    if x.shape[0] > length:
        start = int(rng.integers(0, x.shape[0] - length + 1))
        return x[start : start + length]
    return duplicate_to_length(x, length)


@dataclass
class BatchItem:
    speaker: str
    label: int
    source_path: str
    chosen_len: int  # pre-tiling target length for this utterance
    is_fixed: bool


@dataclass
class Batch:
    waves: np.ndarray  # (B, fixed_len) float32, raw (no pre-emphasis)
    labels: np.ndarray  # (B,) int
    items: list[BatchItem]


def sample_batch(corpus, spec: BatchSpec, rng: np.random.Generator) -> Batch:
    """Draw speakers and build the fixed-length / random-length utterance pair.

    The first utterance of each speaker targets ``fixed_len`` directly; the
    second is cropped to a uniform random length from the configured range,
    then tiled back up to ``fixed_len``.
    """
    if corpus.n_speakers == 0:
        raise ValueError("corpus has no speakers")
    if corpus.n_speakers < spec.speakers_per_batch:
        raise ValueError(
            f"corpus has {corpus.n_speakers} speakers, batch needs "
            f"{spec.speakers_per_batch}"
        )
    speaker_ids = list(corpus.speakers)
    chosen = rng.choice(len(speaker_ids), size=spec.speakers_per_batch, replace=False)
    waves = np.empty((spec.batch_size, spec.fixed_len), dtype=np.float32)
    labels = np.empty(spec.batch_size, dtype=np.int64)
    items: list[BatchItem] = []
    lo, hi = spec.random_len_range
    row = 0
    for idx in chosen:
        speaker = speaker_ids[int(idx)]
        utts = corpus.utterances(speaker)
        replace = len(utts) < 2
        pair = rng.choice(len(utts), size=2, replace=replace)
        for j, utt_idx in enumerate(pair):
            entry = utts[int(utt_idx)]
            audio = corpus.load_audio(entry)
            if j == 0:
                chosen_len = spec.fixed_len
                prepared = crop_or_tile(audio, chosen_len, rng)
            else:
                chosen_len = int(rng.integers(lo, hi + 1))
                prepared = duplicate_to_length(
                    crop_or_tile(audio, chosen_len, rng), spec.fixed_len
                )
            waves[row] = prepared.astype(np.float32)
            labels[row] = corpus.label(speaker)
            items.append(BatchItem(speaker, corpus.label(speaker), entry.path,
                                   chosen_len, j == 0))
            row += 1
    return Batch(waves, labels, items)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return T.cross_entropy_logits(logits, labels)


def _l2_normalize(x: Tensor, axis: int) -> Tensor:
    sq = T.tsum(T.mul(x, x), axis=axis, keepdims=True)
    return T.div(x, T.sqrt(T.clamp_min(sq, 1e-24)))


def aam_softmax_loss(
    embeddings: Tensor,
    labels: np.ndarray,
    class_weights: Tensor,
    margin: float = 0.2,
    scale: float = 30.0,
) -> Tensor:
    """Additive angular margin softmax on cosine logits."""
    if not 0 <= margin < math.pi / 2:
        raise ValueError(f"margin must be in [0, pi/2), got {margin}")
    labels = np.asarray(labels)
    b = embeddings.shape[0]
    k = class_weights.shape[0]
    cos = T.linear(_l2_normalize(embeddings, 1), _l2_normalize(class_weights, 1))
    onehot = np.zeros((b, k), dtype=embeddings.dtype)
    onehot[np.arange(b), labels] = 1.0
    onehot_t = Tensor(onehot)
    target_cos = T.tsum(T.mul(cos, onehot_t), axis=1, keepdims=True)  # (B, 1)
    sin = T.sqrt(T.clamp_min(T.sub(Tensor(np.ones((b, 1), dtype=embeddings.dtype)),
                                   T.mul(target_cos, target_cos)), 0.0))
    phi = T.sub(T.mul(target_cos, Tensor(np.asarray(math.cos(margin), dtype=embeddings.dtype))),
                T.mul(sin, Tensor(np.asarray(math.sin(margin), dtype=embeddings.dtype))))
    adjusted = T.add(cos, T.mul(onehot_t, T.sub(phi, target_cos)))
    scaled = T.mul(adjusted, Tensor(np.asarray(scale, dtype=embeddings.dtype)))
    return T.cross_entropy_logits(scaled, labels)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AmsGrad:
    """Adam with a per-coordinate max on the second moment.

    Bias correction is applied to the first moment only; the denominator
    uses the running max of the raw second moment. Decoupled weight decay
    touches only rank >= 2 parameters (conv and linear weights), never
    normalization parameters or biases.
    """

    def __init__(self, params: ParameterSet, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.slots: dict[str, dict[str, np.ndarray]] = {
            name: {
                "m": np.zeros_like(p.data),
                "v": np.zeros_like(p.data),
                "vmax": np.zeros_like(p.data),
            }
            for name, p in params.items()
        }
        self.decayed = {name for name, p in params.items() if p.data.ndim >= 2}

    def step(self, lr: float) -> None:
        self.step_count += 1
        correction = 1.0 - self.beta1 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {name}")
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
            slot = self.slots[name]
            slot["m"] *= self.beta1
            slot["m"] += (1 - self.beta1) * g
            slot["v"] *= self.beta2
            slot["v"] += (1 - self.beta2) * g * g
            np.maximum(slot["vmax"], slot["v"], out=slot["vmax"])
            update = (slot["m"] / correction) / (np.sqrt(slot["vmax"]) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)
            if self.weight_decay and name in self.decayed:
                p.data -= (lr * self.weight_decay) * p.data

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, slot in self.slots.items():
            for kind, arr in slot.items():
                out[f"optim.{kind}.{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name, slot in self.slots.items():
            for kind in slot:
                src = arrays[f"optim.{kind}.{name}"]
                slot[kind] = src.astype(slot[kind].dtype).reshape(slot[kind].shape)
        self.step_count = step_count


# ---------------------------------------------------------------------------
# epoch driver
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    mean_loss: float
    mean_accuracy: float


def train_epoch(
    model,
    head,
    corpus,
    spec: BatchSpec,
    optimizer: AmsGrad,
    lr: float,
    rng: np.random.Generator,
    steps: int,
    *,
    loss_kind: str = "softmax",
    aam_margin: float = 0.2,
    aam_scale: float = 30.0,
    preemph_coeff: float = 0.97,
    epoch_index: int = 0,
    log=None,
) -> EpochMetrics:
    """One pass of ``steps`` seeded batches with AMSGrad updates."""
    model.train()
    head.train()
    losses = []
    accs = []
    for step in range(steps):
        batch = sample_batch(corpus, spec, rng)
        waves = pre_emphasis(batch.waves, preemph_coeff)
        x = Tensor(waves.astype(model.dtype))
        emb = model(x)
        if loss_kind == "softmax":
            logits = head(emb)
            loss = softmax_ce_loss(logits, batch.labels)
            pred = logits.data.argmax(axis=1)
        elif loss_kind == "aam":
            loss = aam_softmax_loss(emb, batch.labels, head.weight,
                                    margin=aam_margin, scale=aam_scale)
            en = emb.data / np.linalg.norm(emb.data, axis=1, keepdims=True)
            wn = head.weight.data / np.linalg.norm(head.weight.data, axis=1, keepdims=True)
            pred = (en @ wn.T).argmax(axis=1)
        else:
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        if not np.isfinite(loss.data).all():
            culprit = T.first_nonfinite(loss) or "<unknown>"
            raise NumericError(
                f"non-finite loss at epoch {epoch_index} step {step}; first "
                f"non-finite tensor: {culprit}"
            )
        acc = float((pred == batch.labels).mean())
        optimizer.params.zero_grad()
        loss.backward()
        optimizer.step(lr)
        losses.append(float(loss.data))
        accs.append(acc)
        if log is not None:
            log(f"epoch={epoch_index} step={step} lr={lr:.9g} "
                f"loss={losses[-1]:.6f} acc={acc:.4f}")
    return EpochMetrics(float(np.mean(losses)), float(np.mean(accs)))
