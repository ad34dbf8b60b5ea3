"""Encoder-decoder transformer whose encoder FFN output layer is a Soft-MoE.

Blocks are pre-norm.  In every encoder block the first feed-forward map
(``d -> d_ff`` with GELU) feeds a Soft-MoE layer that maps back to ``d``; the
decoder keeps ordinary dense feed-forward layers.  The output projection is
tied to the token embedding, and decoding starts from the pad token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import (
    Tensor,
    add,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    reshape,
    scale,
    softmax,
    transpose,
)
from .errors import LengthError, SpecError
from .init_transfer import init_soft_moe, xavier_uniform
from .rng import make_rng
from .soft_moe import SoftMoEConfig, SoftMoEParams, soft_moe_forward
from .soft_moe import parameter_count as soft_moe_parameter_count
from .vocab import EOS_ID, PAD_ID

LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    d_ff: int = 128
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    num_heads: int = 4
    max_len: int = 128
    num_experts: int = 4
    slots_per_expert: int = 2
    masked_softmax: bool = True
    dropout_rate: float = 0.1
    encoder_ffn: str = "moe"

    def __post_init__(self):
        if self.vocab_size < 4:
            raise SpecError("vocab_size too small")
        if self.d_model % self.num_heads:
            raise SpecError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.d_ff < self.d_model:
            raise SpecError("d_ff must be >= d_model")
        if self.max_len < 2:
            raise SpecError("max_len must be >= 2")
        if self.encoder_ffn not in ("moe", "dense"):
            raise SpecError(f"unknown encoder_ffn {self.encoder_ffn!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError("dropout_rate must be in [0, 1)")
        self.moe  # validates the Soft-MoE part

    @property
    def moe(self) -> SoftMoEConfig:
        return SoftMoEConfig(self.num_experts, self.slots_per_expert, self.d_ff, self.d_model, self.masked_softmax)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Attention:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class EncoderBlock:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: Attention
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    moe: SoftMoEParams | None = None
    w2: Tensor | None = None
    b2: Tensor | None = None


@dataclass
class DecoderBlock:
    ln1_g: Tensor
    ln1_b: Tensor
    self_attn: Attention
    ln2_g: Tensor
    ln2_b: Tensor
    cross_attn: Attention
    ln3_g: Tensor
    ln3_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _walk(prefix: str, obj) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if v is None:
            continue
        if isinstance(v, Tensor):
            out[f"{prefix}{f.name}"] = v
        elif isinstance(v, SoftMoEParams):
            for k, t in v.tensors().items():
                out[f"{prefix}{f.name}.{k}"] = t
        else:
            out.update(_walk(f"{prefix}{f.name}.", v))
    return out


class Seq2SeqModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.bypass_attention = False  # test hook: skip encoder self-attention
        c = config
        rng = make_rng(seed, "model-init")
        d, dff = c.d_model, c.d_ff

        def lin(fan_in, fan_out, name):
            return _param(xavier_uniform(rng, fan_in, fan_out), name), _param(np.zeros(fan_out), name + "_b")

        def attention(name):
            wq, bq = lin(d, d, name + ".wq")
            wk, bk = lin(d, d, name + ".wk")
            wv, bv = lin(d, d, name + ".wv")
            wo, bo = lin(d, d, name + ".wo")
            return Attention(wq, bq, wk, bk, wv, bv, wo, bo)

        def norm():
            return _param(np.ones(d), "ln_g"), _param(np.zeros(d), "ln_b")

        self.tok_emb = _param(rng.normal(0.0, d**-0.5, size=(c.vocab_size, d)), "tok_emb")
        self.pos_emb = _param(rng.normal(0.0, d**-0.5, size=(c.max_len, d)), "pos_emb")

        self.encoder_blocks: list[EncoderBlock] = []
        for k in range(c.num_encoder_layers):
            g1, b1n = norm()
            g2, b2n = norm()
            w1, b1 = lin(d, dff, f"enc{k}.w1")
            block = EncoderBlock(g1, b1n, attention(f"enc{k}.attn"), g2, b2n, w1, b1)
            layer_seed = seed * 7919 + 1000 * (k + 1)
            if c.encoder_ffn == "moe":
                block.moe = init_soft_moe(c.moe, layer_seed)
            else:
                block.w2, block.b2 = lin(dff, d, f"enc{k}.w2")
            self.encoder_blocks.append(block)
        self.enc_ln_g, self.enc_ln_b = norm()

        self.decoder_blocks: list[DecoderBlock] = []
        for k in range(c.num_decoder_layers):
            g1, b1n = norm()
            g2, b2n = norm()
            g3, b3n = norm()
            sa = attention(f"dec{k}.self")
            ca = attention(f"dec{k}.cross")
            w1, b1 = lin(d, dff, f"dec{k}.w1")
            w2, b2 = lin(dff, d, f"dec{k}.w2")
            self.decoder_blocks.append(DecoderBlock(g1, b1n, sa, g2, b2n, ca, g3, b3n, w1, b1, w2, b2))
        self.dec_ln_g, self.dec_ln_b = norm()

        for name, t in self.named_parameters().items():
            t.name = name

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for k, b in enumerate(self.encoder_blocks):
            out.update(_walk(f"encoder.{k}.", b))
        out["encoder.ln_g"], out["encoder.ln_b"] = self.enc_ln_g, self.enc_ln_b
        for k, b in enumerate(self.decoder_blocks):
            out.update(_walk(f"decoder.{k}.", b))
        out["decoder.ln_g"], out["decoder.ln_b"] = self.dec_ln_g, self.dec_ln_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    # -- building blocks ----------------------------------------------------

    def _embed(self, ids: np.ndarray) -> Tensor:
        length = ids.shape[-1]
        if length > self.config.max_len:
            raise LengthError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        return add(embedding(self.tok_emb, ids), embedding(self.pos_emb, np.arange(length)))

    def _attend(self, p: Attention, xq: Tensor, xkv: Tensor, mask) -> Tensor:
        bsz, lq, d = xq.shape
        lk = xkv.shape[1]
        h = self.config.num_heads
        dh = d // h
        q = transpose(reshape(add(matmul(xq, p.wq), p.bq), (bsz, lq, h, dh)), (0, 2, 1, 3))
        k = transpose(reshape(add(matmul(xkv, p.wk), p.bk), (bsz, lk, h, dh)), (0, 2, 3, 1))
        v = transpose(reshape(add(matmul(xkv, p.wv), p.bv), (bsz, lk, h, dh)), (0, 2, 1, 3))
        weights = softmax(scale(matmul(q, k), 1.0 / math.sqrt(dh)), axis=-1, mask=mask)
        ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (bsz, lq, d))
        return add(matmul(ctx, p.wo), p.bo)

    def _drop(self, x: Tensor, rng) -> Tensor:
        if rng is None:
            return x
        return dropout(x, self.config.dropout_rate, rng)

    def _encode_batch(self, ids: np.ndarray, mask: np.ndarray, rng=None) -> Tensor:
        x = self._drop(self._embed(ids), rng)
        key_mask = mask[:, None, None, :]
        for block in self.encoder_blocks:
            if not self.bypass_attention:
                h = layer_norm(x, block.ln1_g, block.ln1_b, LN_EPS)
                x = add(x, self._drop(self._attend(block.attn, h, h, key_mask), rng))
            h = layer_norm(x, block.ln2_g, block.ln2_b, LN_EPS)
            u = gelu(add(matmul(h, block.w1), block.b1))
            if block.moe is not None:
                y = soft_moe_forward(u, block.moe, mask)
            else:
                y = add(matmul(u, block.w2), block.b2)
            x = add(x, self._drop(y, rng))
        return layer_norm(x, self.enc_ln_g, self.enc_ln_b, LN_EPS)

    def _decode_batch(self, memory: Tensor, src_mask: np.ndarray, tgt_in: np.ndarray, rng=None) -> Tensor:
        length = tgt_in.shape[1]
        x = self._drop(self._embed(tgt_in), rng)
        causal = np.tril(np.ones((length, length), dtype=bool))[None, None]
        cross_mask = src_mask[:, None, None, :]
        for block in self.decoder_blocks:
            h = layer_norm(x, block.ln1_g, block.ln1_b, LN_EPS)
            x = add(x, self._drop(self._attend(block.self_attn, h, h, causal), rng))
            h = layer_norm(x, block.ln2_g, block.ln2_b, LN_EPS)
            x = add(x, self._drop(self._attend(block.cross_attn, h, memory, cross_mask), rng))
            h = layer_norm(x, block.ln3_g, block.ln3_b, LN_EPS)
            ff = add(matmul(gelu(add(matmul(h, block.w1), block.b1)), block.w2), block.b2)
            x = add(x, self._drop(ff, rng))
        h = layer_norm(x, self.dec_ln_g, self.dec_ln_b, LN_EPS)
        return matmul(h, transpose(self.tok_emb))

    # -- public API ---------------------------------------------------------

    def encode(self, src, mask=None, rng=None) -> Tensor:
        """Encode one sequence (``[l]`` -> ``[l, d]``) or a padded batch (``[B, L]``)."""
        ids = np.asarray(src, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool) if single else ids != PAD_ID
        mask = np.asarray(mask, dtype=bool).reshape(ids.shape)
        out = self._encode_batch(ids, mask, rng)
        return reshape(out, out.shape[1:]) if single else out

    def forward(self, src, tgt_in, src_mask=None, rng=None) -> Tensor:
        """Teacher-forced logits ``[B, T, vocab]`` (``rng`` enables dropout)."""
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        if src_mask is None:
            src_mask = src != PAD_ID
        src_mask = np.asarray(src_mask, dtype=bool).reshape(src.shape)
        memory = self._encode_batch(src, src_mask, rng)
        return self._decode_batch(memory, src_mask, tgt_in, rng)


def expected_parameter_count(c: ModelConfig) -> int:
    """Closed-form parameter count; only the Soft-MoE term depends on (m, p)."""
    d, dff = c.d_model, c.d_ff
    attn = 4 * (d * d + d)
    ffn_in = d * dff + dff
    if c.encoder_ffn == "moe":
        ffn_out = soft_moe_parameter_count(c.moe)
    else:
        ffn_out = dff * d + d
    encoder = c.num_encoder_layers * (2 * 2 * d + attn + ffn_in + ffn_out) + 2 * d
    decoder = c.num_decoder_layers * (3 * 2 * d + 2 * attn + ffn_in + dff * d + d) + 2 * d
    return (c.vocab_size + c.max_len) * d + encoder + decoder


def shift_right(targets: np.ndarray) -> np.ndarray:
    targets = np.atleast_2d(targets)
    out = np.full_like(targets, PAD_ID)
    out[:, 1:] = targets[:, :-1]
    return out


def nll_loss(logits: Tensor, target_ids, pad_id: int = PAD_ID) -> Tensor:
    """Mean token negative log-likelihood over non-pad targets."""
    target_ids = np.asarray(target_ids, dtype=np.int64).reshape(logits.shape[:-1])
    return cross_entropy(logits, target_ids, ignore_index=pad_id)


def pad_batch(seqs, length: int | None = None) -> np.ndarray:
    length = max(len(s) for s in seqs) if length is None else length
    out = np.full((len(seqs), max(length, 1)), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def greedy_decode_batch(model: Seq2SeqModel, srcs, max_len: int) -> list[list[int]]:
    """Argmax decoding for a batch; returns ids without the end-of-sequence token.

    ``np.argmax`` returns the first maximum, so ties go to the lowest id.
    """
    if max_len > model.config.max_len:
        raise LengthError(f"max_len {max_len} exceeds model max_len {model.config.max_len}")
    src = pad_batch(srcs)
    mask = np.zeros(src.shape, dtype=bool)
    for i, s in enumerate(srcs):
        mask[i, : len(s)] = True
    n = len(srcs)
    out = np.full((n, 1), PAD_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    result: list[list[int]] = [[] for _ in range(n)]
    with no_grad():
        memory = model._encode_batch(src, mask)
        for _ in range(max_len):
            logits = model._decode_batch(memory, mask, out).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            for i in np.flatnonzero(~done):
                if nxt[i] == EOS_ID:
                    done[i] = True
                else:
                    result[i].append(int(nxt[i]))
            if done.all():
                break
            out = np.concatenate([out, nxt[:, None]], axis=1)
    return result


def greedy_decode(model: Seq2SeqModel, src, max_len: int) -> list[int]:
    return greedy_decode_batch(model, [list(src)], max_len)[0]
