"""Tiny frozen encoder-decoder whose attention projections carry the adapters.

The backbone is randomly initialized and frozen; learning happens in the
wrapped projections (query/value by default), the router, and (by default)
the shared embedding plus output head. Visual vectors enter as a fixed-length
prefix in front of the embedded instruction+text tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adapter import CloraeLinear, ForwardContext
from .autodiff import (Tensor, concat, cross_entropy, embedding, linear,
                       masked_softmax, matmul, matmul_nt, merge_heads, no_grad,
                       split_heads)
from .data import Batch, Vocab
from .nn import LayerNorm, Linear, Module, ModuleList, Parameter

Array = np.ndarray

NEG_INF = -1e9
ATTN_ROLES = ("q", "k", "v", "o")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 256
    max_text_len: int = 64
    max_answer_len: int = 24
    visual_len: int = 4
    rank: int = 9
    n_experts: int = 3
    alpha: float | None = None
    dropout: float = 0.1
    wrap: tuple = ("q", "v")
    variant: str = "full"
    fixed_gate: tuple | None = None
    adapters_enabled: bool = True
    train_embeddings: bool = True

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        has_tasks = self.variant not in ("vanilla", "only_universal")
        if self.adapters_enabled and has_tasks and self.rank % self.n_experts != 0:
            raise ValueError(
                f"rank {self.rank} not divisible by n_experts {self.n_experts}")
        bad = set(self.wrap) - set(ATTN_ROLES)
        if bad:
            raise ValueError(f"unknown projection roles to wrap: {sorted(bad)}")


def sinusoid_positions(length: int, dim: int) -> Array:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2 * i / dim)
    enc = np.zeros((length, dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc


class MultiHeadAttention(Module):
    def __init__(self, cfg: ModelConfig, name: str):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.wrapped_roles = tuple(r for r in ATTN_ROLES
                                   if cfg.adapters_enabled and r in cfg.wrap)
        self._name = name
        for role in ATTN_ROLES:
            if role in self.wrapped_roles:
                layer = CloraeLinear(cfg.d_model, cfg.d_model, cfg.rank,
                                     cfg.n_experts, cfg.alpha, cfg.dropout,
                                     variant=cfg.variant,
                                     fixed_gate=cfg.fixed_gate)
            else:
                layer = Linear(cfg.d_model, cfg.d_model, bias=False, frozen=True)
            setattr(self, role, layer)

    def _project(self, role: str, x: Tensor, task_id: int, ctx: ForwardContext,
                 token_mask: Array | None) -> Tensor:
        layer = getattr(self, role)
        if isinstance(layer, CloraeLinear):
            return layer(x, task_id, ctx, token_mask=token_mask,
                         layer_name=f"{self._name}.{role}")
        return layer(x)

    def __call__(self, x_q: Tensor, x_kv: Tensor, add_mask: Array,
                 task_id: int, ctx: ForwardContext,
                 q_mask: Array | None, kv_mask: Array | None) -> Tensor:
        q = split_heads(self._project("q", x_q, task_id, ctx, q_mask), self.n_heads)
        k = split_heads(self._project("k", x_kv, task_id, ctx, kv_mask), self.n_heads)
        v = split_heads(self._project("v", x_kv, task_id, ctx, kv_mask), self.n_heads)
        scores = matmul_nt(q, k, scale=1.0 / math.sqrt(self.head_dim))
        attn = masked_softmax(scores, add_mask, axis=-1)
        out = merge_heads(matmul(attn, v))
        return self._project("o", out, task_id, ctx, q_mask)


class FeedForward(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.lin1 = Linear(cfg.d_model, cfg.d_ff, frozen=True)
        self.lin2 = Linear(cfg.d_ff, cfg.d_model, frozen=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.lin1(x).relu())


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, name: str):
        super().__init__()
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg, f"{name}.attn")
        self.ln2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg)

    def __call__(self, x, add_mask, task_id, ctx, token_mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, add_mask, task_id, ctx, token_mask, token_mask)
        return x + self.ffn(self.ln2(x))


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, name: str):
        super().__init__()
        self.ln1 = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg, f"{name}.self_attn")
        self.ln2 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg, f"{name}.cross_attn")
        self.ln3 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg)

    def __call__(self, x, enc_out, self_mask, cross_mask, task_id, ctx,
                 dec_mask, enc_mask):
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_mask, task_id, ctx, dec_mask, dec_mask)
        x = x + self.cross_attn(self.ln2(x), enc_out, cross_mask, task_id, ctx,
                                dec_mask, enc_mask)
        return x + self.ffn(self.ln3(x))


class Seq2SeqModel(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        frozen_emb = not cfg.train_embeddings
        self.embedding = Parameter((cfg.vocab_size, cfg.d_model),
                                   frozen=frozen_emb, init=("normal", 0.02))
        self.out_head = Parameter((cfg.vocab_size, cfg.d_model),
                                  frozen=frozen_emb, init=("normal", 0.02))
        self.encoder = ModuleList(
            [EncoderBlock(cfg, f"encoder.{i}") for i in range(cfg.n_encoder_layers)])
        self.decoder = ModuleList(
            [DecoderBlock(cfg, f"decoder.{i}") for i in range(cfg.n_decoder_layers)])
        self.encoder_ln = LayerNorm(cfg.d_model)
        self.decoder_ln = LayerNorm(cfg.d_model)
        max_len = cfg.visual_len + cfg.max_text_len + cfg.max_answer_len
        self._pos = sinusoid_positions(max_len, cfg.d_model)
        self._emb_scale = math.sqrt(cfg.d_model)

    # -- wrapped-layer registry ------------------------------------------------

    def wrapped_layers(self) -> list[tuple[str, CloraeLinear, int]]:
        """(qualified name, layer, block depth) in construction order."""
        out = []
        depth = 0
        for block in self.encoder:
            for role in block.attn.wrapped_roles:
                out.append((f"{block.attn._name}.{role}",
                            getattr(block.attn, role), depth))
            depth += 1
        for block in self.decoder:
            for attn in (block.self_attn, block.cross_attn):
                for role in attn.wrapped_roles:
                    out.append((f"{attn._name}.{role}", getattr(attn, role), depth))
            depth += 1
        return out

    # -- forward -----------------------------------------------------------------

    def encode(self, batch: Batch, ctx: ForwardContext) -> Tensor:
        b, t_text = batch.text_ids.shape
        emb = embedding(self.embedding, batch.text_ids) * self._emb_scale
        x = concat([Tensor(batch.visual), emb], axis=1)
        t_enc = x.shape[1]
        x = x + self._pos[:t_enc]
        add_mask = np.where(batch.enc_token_mask, 0.0, NEG_INF)[:, None, None, :]
        for block in self.encoder:
            x = block(x, add_mask, batch.task_id, ctx, batch.enc_token_mask)
        return self.encoder_ln(x)

    def decode_logits(self, enc_out: Tensor, dec_ids: Array, batch: Batch,
                      ctx: ForwardContext,
                      dec_token_mask: Array | None = None) -> Tensor:
        b, t_dec = dec_ids.shape
        if dec_token_mask is None:
            dec_token_mask = np.ones((b, t_dec), dtype=bool)
        x = embedding(self.embedding, dec_ids) * self._emb_scale
        x = x + self._pos[:t_dec]
        causal = np.where(np.tril(np.ones((t_dec, t_dec), dtype=bool)), 0.0,
                          NEG_INF)[None, None, :, :]
        self_mask = causal + np.where(dec_token_mask, 0.0, NEG_INF)[:, None, None, :]
        cross_mask = np.where(batch.enc_token_mask, 0.0, NEG_INF)[:, None, None, :]
        for block in self.decoder:
            x = block(x, enc_out, self_mask, cross_mask, batch.task_id, ctx,
                      dec_token_mask, batch.enc_token_mask)
        x = self.decoder_ln(x)
        return linear(x, self.out_head)

    def forward_logits(self, batch: Batch, ctx: ForwardContext) -> Tensor:
        enc_out = self.encode(batch, ctx)
        return self.decode_logits(enc_out, batch.dec_in, batch, ctx,
                                  batch.dec_token_mask)

    def forward_loss(self, batch: Batch, ctx: ForwardContext,
                     pad_id: int) -> Tensor:
        """Teacher-forced mean cross-entropy over the batch's answer tokens."""
        logits = self.forward_logits(batch, ctx)
        b, t, v = logits.shape
        return cross_entropy(logits.reshape(b * t, v),
                             batch.dec_target.reshape(-1), ignore_index=pad_id)

    def decode_greedy(self, batch: Batch, vocab: Vocab,
                      ctx: ForwardContext | None = None,
                      max_len: int | None = None) -> list[list[str]]:
        """Argmax decoding until the end token or the length cap; deterministic."""
        if ctx is None:
            ctx = ForwardContext(training=False)
        cap = self.cfg.max_answer_len if max_len is None else max_len
        b = batch.size
        with no_grad():
            enc_out = self.encode(batch, ctx)
            dec_ids = np.full((b, 1), vocab.bos_id, dtype=np.int64)
            finished = np.zeros(b, dtype=bool)
            for _ in range(cap):
                logits = self.decode_logits(enc_out, dec_ids, batch, ctx)
                nxt = np.argmax(logits.data[:, -1, :], axis=-1)
                nxt = np.where(finished, vocab.pad_id, nxt)
                dec_ids = np.concatenate([dec_ids, nxt[:, None]], axis=1)
                finished |= nxt == vocab.eos_id
                if finished.all():
                    break
        out = []
        for row in dec_ids[:, 1:]:
            toks = []
            for i in row:
                if i == vocab.eos_id or i == vocab.pad_id:
                    break
                toks.append(vocab.tokens[int(i)])
            out.append(toks)
        return out
