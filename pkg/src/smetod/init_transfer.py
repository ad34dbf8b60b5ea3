"""Expert upcycling and Kaiming initialisation of the slot logits.

Upcycling copies a dense second feed-forward layer (``W2``, ``b2``) into every
expert; ``phi`` is drawn uniform on ``[-b, b]`` with ``b = sqrt(6 / d_ff)``,
the He/Kaiming bound for fan-in ``d_ff`` (variance ``2 / d_ff``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError
from .rng import make_rng
from .soft_moe import SoftMoEConfig, SoftMoEParams


@dataclass
class DenseFFNSnapshot:
    w2: np.ndarray
    b2: np.ndarray
    source: str = "random-pretrain"

    def __post_init__(self):
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.w2.ndim != 2 or self.b2.shape != (self.w2.shape[1],):
            raise DimensionError(f"dense snapshot: W2 {self.w2.shape} with b2 {self.b2.shape}")


def upcycle_experts(snapshot: DenseFFNSnapshot, m: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Return ``m`` independent copies of the dense layer's weights and bias."""
    if m < 1:
        raise ValueError("need at least one expert")
    return [snapshot.w2.copy() for _ in range(m)], [snapshot.b2.copy() for _ in range(m)]


def kaiming_init_phi(d_ff: int, num_slots: int, rng_seed: int) -> Tensor:
    if d_ff < 1 or num_slots < 1:
        raise ValueError("phi dimensions must be positive")
    bound = math.sqrt(6.0 / d_ff)
    rng = make_rng(rng_seed, "kaiming-phi")
    return Tensor(rng.uniform(-bound, bound, size=(d_ff, num_slots)), requires_grad=True, name="phi")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def random_dense_snapshot(d_ff: int, d_model: int, seed: int) -> DenseFFNSnapshot:
    rng = make_rng(seed, "dense-ffn")
    return DenseFFNSnapshot(xavier_uniform(rng, d_ff, d_model), np.zeros(d_model), "random-pretrain")


def init_soft_moe(config: SoftMoEConfig, seed: int, snapshot: DenseFFNSnapshot | None = None) -> SoftMoEParams:
    """Build a Soft-MoE layer whose experts all start from ``snapshot``."""
    if snapshot is None:
        snapshot = random_dense_snapshot(config.d_ff, config.d_model, seed)
    if snapshot.w2.shape != (config.d_ff, config.d_model):
        raise DimensionError(f"snapshot W2 {snapshot.w2.shape} vs layer ({config.d_ff}, {config.d_model})")
    weights, biases = upcycle_experts(snapshot, config.num_experts)
    return SoftMoEParams(
        config=config,
        phi=kaiming_init_phi(config.d_ff, config.total_slots, seed),
        theta=Tensor(np.stack(weights), requires_grad=True, name="theta"),
        bias=Tensor(np.stack(biases), requires_grad=True, name="bias"),
    )


def upcycle_model(donor, num_experts: int, slots_per_expert: int, masked_softmax: bool = True, seed: int = 0):
    """Turn a dense-encoder donor model into a Soft-MoE model.

    Every shared tensor is copied; each encoder block's dense second
    feed-forward layer is replicated into all experts and its ``phi`` gets a
    fresh Kaiming draw.
    """
    from dataclasses import replace

    from .transformer import Seq2SeqModel

    if donor.config.encoder_ffn != "dense":
        raise ValueError("donor must use dense encoder feed-forward layers")
    cfg = replace(
        donor.config,
        encoder_ffn="moe",
        num_experts=num_experts,
        slots_per_expert=slots_per_expert,
        masked_softmax=masked_softmax,
    )
    model = Seq2SeqModel(cfg, seed=seed)
    donor_params = donor.named_parameters()
    for name, t in model.named_parameters().items():
        if name in donor_params:
            t.data[...] = donor_params[name].data
    for k, block in enumerate(model.encoder_blocks):
        dense = donor.encoder_blocks[k]
        snap = DenseFFNSnapshot(dense.w2.data, dense.b2.data, f"donor-encoder-{k}")
        layer = init_soft_moe(cfg.moe, seed + 1000 * (k + 1), snap)
        block.moe.phi.data[...] = layer.phi.data
        block.moe.theta.data[...] = layer.theta.data
        block.moe.bias.data[...] = layer.bias.data
    return model
