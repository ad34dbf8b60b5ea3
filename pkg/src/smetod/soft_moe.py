"""Soft Mixture-of-Experts layer.

Tokens ``X`` (``l x d_ff``) are mixed into ``m*p`` slots by a softmax over the
token axis of the logits ``X @ phi``; slot ``j`` is processed by expert
``ceil(j/p)`` (1-based), a linear map ``d_ff -> d``; each token then reads a
convex combination of the output slots through a softmax over the slot axis of
the same logits.

Every function accepts an optional leading batch axis.  Token masks are boolean
with True marking real tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, matmul, reshape, softmax, transpose
from .errors import DimensionError, SpecError

MAX_TOTAL_SLOTS = 4096


@dataclass(frozen=True)
class SoftMoEConfig:
    num_experts: int
    slots_per_expert: int
    d_ff: int
    d_model: int
    masked_softmax: bool = True

    def __post_init__(self):
        for name in ("num_experts", "slots_per_expert", "d_ff", "d_model"):
            if int(getattr(self, name)) < 1:
                raise SpecError(f"SoftMoEConfig.{name} must be >= 1")
        if self.total_slots > MAX_TOTAL_SLOTS:
            raise SpecError(f"total slots {self.total_slots} exceed {MAX_TOTAL_SLOTS}")

    @property
    def total_slots(self) -> int:
        return self.num_experts * self.slots_per_expert


def parameter_count(config: SoftMoEConfig) -> int:
    m, p, dff, d = config.num_experts, config.slots_per_expert, config.d_ff, config.d_model
    return dff * m * p + m * (dff * d + d)


@dataclass
class SoftMoEParams:
    """Slot logits ``phi`` plus stacked expert weights.

    Expert ``i`` (0-based) owns ``theta.data[i]`` (``d_ff x d``) and
    ``bias.data[i]``; keeping them stacked lets one batched matmul serve all
    experts, so latency does not grow with the expert count.
    """

    config: SoftMoEConfig
    phi: Tensor
    theta: Tensor
    bias: Tensor

    def __post_init__(self):
        c = self.config
        want = {
            "phi": (c.d_ff, c.total_slots),
            "theta": (c.num_experts, c.d_ff, c.d_model),
            "bias": (c.num_experts, c.d_model),
        }
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"SoftMoEParams.{name}: expected {shape}, got {got}")

    @property
    def expert_weights(self) -> list[np.ndarray]:
        return [self.theta.data[i] for i in range(self.config.num_experts)]

    @property
    def expert_biases(self) -> list[np.ndarray]:
        return [self.bias.data[i] for i in range(self.config.num_experts)]

    def tensors(self) -> dict[str, Tensor]:
        return {"phi": self.phi, "theta": self.theta, "bias": self.bias}

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors().values())


def slot_index_to_expert(j: int, p: int, m: int | None = None) -> int:
    """1-based expert index owning 1-based slot ``j``."""
    if p < 1:
        raise ValueError("slots per expert must be >= 1")
    if j < 1 or (m is not None and j > m * p):
        raise IndexError(f"slot {j} outside 1..{'?' if m is None else m * p}")
    return -(-j // p)


def _dispatch_mask(mask):
    if mask is None:
        return None
    # token axis is -2 of the logits, slots broadcast along -1
    return np.asarray(mask, dtype=bool)[..., :, None]


def _check_tokens(x: Tensor, phi: Tensor) -> None:
    if x.ndim not in (2, 3) or x.shape[-1] != phi.shape[0]:
        raise DimensionError(f"tokens {x.shape} incompatible with phi {phi.shape}")


def dispatch(x: Tensor, phi: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """Return dispatch weights ``D`` (``l x S``) and slot inputs (``S x d_ff``).

    Column ``j`` of ``D`` is a softmax over tokens, so every slot input is a
    convex combination of the (unmasked) tokens.
    """
    _check_tokens(x, phi)
    return _dispatch_from_logits(x, matmul(x, phi), mask)


def _dispatch_from_logits(x: Tensor, logits: Tensor, mask) -> tuple[Tensor, Tensor]:
    d = softmax(logits, axis=-2, mask=_dispatch_mask(mask))
    return d, matmul(transpose(d), x)


def apply_experts(xslots: Tensor, params: SoftMoEParams) -> Tensor:
    """Slot ``j`` goes through expert ``ceil(j/p)``: ``x @ theta_e + bias_e``."""
    c = params.config
    if xslots.shape[-2:] != (c.total_slots, c.d_ff):
        raise DimensionError(f"slot inputs {xslots.shape} vs config slots={c.total_slots}, d_ff={c.d_ff}")
    lead = xslots.shape[:-2]
    grouped = reshape(xslots, lead + (c.num_experts, c.slots_per_expert, c.d_ff))
    out = add(matmul(grouped, params.theta), reshape(params.bias, (c.num_experts, 1, c.d_model)))
    return reshape(out, lead + (c.total_slots, c.d_model))


def combine(x: Tensor, phi: Tensor, yslots: Tensor, mask=None) -> Tensor:
    """Each token takes a softmax-over-slots mixture of the output slots.

    Rows for masked tokens are still produced; callers ignore them.
    """
    _check_tokens(x, phi)
    return _combine_from_logits(matmul(x, phi), yslots)


def _combine_from_logits(logits: Tensor, yslots: Tensor) -> Tensor:
    if logits.shape[-1] != yslots.shape[-2]:
        raise DimensionError(f"combine: logits {logits.shape} vs output slots {yslots.shape}")
    return matmul(softmax(logits, axis=-1), yslots)


def soft_moe_forward(x: Tensor, params: SoftMoEParams, mask=None) -> Tensor:
    """Dispatch, expert application and combine, sharing one logits product.

    ``mask`` only takes effect when ``params.config.masked_softmax`` is set;
    otherwise padding tokens compete for slots like real ones.
    """
    _check_tokens(x, params.phi)
    logits = matmul(x, params.phi)
    use_mask = mask if params.config.masked_softmax else None
    _, xslots = _dispatch_from_logits(x, logits, use_mask)
    return _combine_from_logits(logits, apply_experts(xslots, params))
