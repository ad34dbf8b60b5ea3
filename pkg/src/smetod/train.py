"""Adam training loop over text-to-text examples."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import backward
from .checkpoint import save_checkpoint
from .dialogue import DialogueExample
from .errors import CorpusError, LengthError, TrainingDivergedError
from .rng import make_rng
from .transformer import Seq2SeqModel, nll_loss, pad_batch, shift_right
from .vocab import EOS_ID, Vocab

DEFAULT_LR = {"nlu": 1e-3, "dst": 1e-4, "nlg": 1e-4}


@dataclass(frozen=True)
class OptConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 1000
    batch_size: int = 32
    warmup_steps: int = 0
    decay_to: float | None = None
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ValueError("lr, steps and warmup_steps must be >= 0 and batch_size >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    def lr_at(self, step: int) -> float:
        """Linear warmup, then constant or linear decay to ``decay_to * lr``."""
        lr = self.lr
        if self.warmup_steps and step <= self.warmup_steps:
            return lr * step / self.warmup_steps
        if self.decay_to is not None and self.steps > self.warmup_steps:
            frac = (step - self.warmup_steps) / (self.steps - self.warmup_steps)
            return lr * (1.0 - (1.0 - self.decay_to) * min(frac, 1.0))
        return lr


def default_lr(task: str) -> float:
    return DEFAULT_LR[task.lower()]


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params, config: OptConfig):
        self.params = list(params)
        self.config = config
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            if lr == 0.0:
                continue
            if c.weight_decay:
                p.data -= lr * c.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))


@dataclass
class EncodedExamples:
    src: list[list[int]]
    tgt: list[list[int]]

    def __len__(self) -> int:
        return len(self.src)


def encode_examples(examples: Sequence[DialogueExample], vocab: Vocab, max_len: int) -> EncodedExamples:
    if not examples:
        raise CorpusError("no training examples")
    src, tgt = [], []
    for ex in examples:
        s = vocab.encode(ex.x)
        t = vocab.encode(ex.y) + [EOS_ID]
        if len(s) > max_len or len(t) > max_len:
            raise LengthError(f"{ex.dialogue_id}/{ex.turn_id}: sequence longer than max_len {max_len}")
        src.append(s)
        tgt.append(t)
    return EncodedExamples(src, tgt)


def bucketed_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator, pool: int = 50):
    """Shuffle, sort within pools of ``pool`` batches by length, then shuffle the batches."""
    order = rng.permutation(len(lengths))
    span = batch_size * pool
    batches = []
    for start in range(0, len(order), span):
        chunk = sorted(order[start : start + span].tolist(), key=lambda i: lengths[i])
        batches.extend(chunk[k : k + batch_size] for k in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def batch_arrays(data: EncodedExamples, idx: Sequence[int]):
    src = pad_batch([data.src[i] for i in idx])
    tgt = pad_batch([data.tgt[i] for i in idx])
    return src, shift_right(tgt), tgt


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    @property
    def final_loss(self) -> float:
        return self.steps[-1]["loss"] if self.steps else float("nan")

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec) + "\n")


def train(
    model: Seq2SeqModel,
    examples: Sequence[DialogueExample],
    opt_config: OptConfig,
    vocab: Vocab,
    checkpoint=None,
    log_path=None,
    extra: dict | None = None,
    progress=None,
) -> TrainLog:
    """Minimize token NLL with Adam; writes a checkpoint at the end when asked.

    Raises ``TrainingDivergedError`` on a non-finite loss or gradient.
    """
    data = encode_examples(examples, vocab, model.config.max_len)
    params = model.parameters()
    opt = Adam(params, opt_config)
    batch_rng = make_rng(opt_config.seed, "batches")
    drop_rng = make_rng(opt_config.seed, "dropout") if model.config.dropout_rate > 0 else None
    lengths = [len(s) for s in data.src]
    log = TrainLog()
    t0 = time.perf_counter()
    queue: list[list[int]] = []
    for step in range(1, opt_config.steps + 1):
        if not queue:
            queue = bucketed_batches(lengths, opt_config.batch_size, batch_rng)
        idx = queue.pop()
        src, tgt_in, tgt = batch_arrays(data, idx)
        model.zero_grad()
        logits = model.forward(src, tgt_in, rng=drop_rng)
        loss = nll_loss(logits, tgt)
        lr = opt_config.lr_at(step)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(step, lr, float("nan"), value)
        backward(loss)
        norm = global_grad_norm(params)
        if not math.isfinite(norm):
            raise TrainingDivergedError(step, lr, norm, value)
        if opt_config.clip_norm is not None and norm > opt_config.clip_norm:
            scale = opt_config.clip_norm / norm
            for p in params:
                p.grad *= scale
        opt.step(lr)
        rec = {"step": step, "loss": value, "lr": lr, "grad_norm": norm, "batch": len(idx)}
        log.steps.append(rec)
        if progress is not None:
            progress(rec)
    log.seconds = time.perf_counter() - t0
    if log_path is not None:
        log.write(log_path)
    if checkpoint is not None:
        meta = {"opt": asdict(opt_config), "steps": opt_config.steps}
        meta.update(extra or {})
        save_checkpoint(checkpoint, model, vocab, meta)
    return log
