"""Vision encoder + shared text decoder with two-pass execution.

The decoder runs twice per training step over one set of weights: a
bidirectional pass with every cross-attention sublayer skipped (text-only
contrastive embedding), and a causal pass with cross-attention into the
projected visual tokens (caption logits). Cross-attention is inserted
after every k-th decoder layer, so k=2 on N layers gives M = N/2 fusion
points; its output projections start at zero, making the generative pass
a pure language model at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TokenBatch
from .tensor import Tensor


@dataclass(frozen=True)
class MammutConfig:
    vision_layers: int = 4
    vision_dim: int = 128
    vision_heads: int = 4
    decoder_layers: int = 4
    decoder_dim: int = 128
    decoder_heads: int = 4
    cross_attention_every_k: int = 2
    vocab_size: int = 20
    max_text_len: int = 12
    patch_grid: int = 3  # G; the encoder sees G*G patch tokens
    patch_dim: int = 768  # 3 * patch_size**2
    ffn_mult: int = 2  # desk-scale width; 4 is the usual large-model value
    use_projection_head: bool = False
    use_attention_pooling: bool = False
    masking_mode_contrastive: str = "bidirectional"
    tie_embeddings: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.vision_dim % self.vision_heads or self.decoder_dim % self.decoder_heads:
            raise ValueError("head count must divide model dim")
        if self.cross_attention_every_k < 1:
            raise ValueError("cross_attention_every_k must be >= 1")
        if self.masking_mode_contrastive not in ("bidirectional", "causal"):
            raise ValueError(
                f"bad masking mode {self.masking_mode_contrastive!r}")

    @property
    def cross_attention_layers(self) -> tuple[int, ...]:
        """1-indexed decoder layers followed by cross-attention (k, 2k, ...)."""
        k = self.cross_attention_every_k
        return tuple(i for i in range(1, self.decoder_layers + 1) if i % k == 0)

    @property
    def num_patches(self) -> int:
        return self.patch_grid ** 2


def build_attention_mask(mode: str, valid: np.ndarray) -> np.ndarray:
    """[B, T, T] boolean; entry (q, k) allows query q to attend key k.

    causal: lower-triangular AND key validity; bidirectional: key validity.
    """
    B, L = valid.shape
    keys = np.broadcast_to(valid[:, None, :], (B, L, L))
    if mode == "bidirectional":
        return keys.copy()
    if mode == "causal":
        return keys & np.tril(np.ones((L, L), dtype=bool))
    raise ValueError(f"bad masking mode {mode!r}")


def _init_linear(rng, fan_in, fan_out, std=0.02):
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def parameter_count_formula(cfg: MammutConfig) -> int:
    """Closed-form total parameter count (see README for the derivation).

    Per transformer block of width d with hidden f: 4(d^2+d) attention,
    4d for the two layer norms, df+f+fd+d feed-forward. Each of the
    M = len(cross_attention_layers) fusion points adds 4(d^2+d) + 2d.
    """
    dv, dd = cfg.vision_dim, cfg.decoder_dim
    fv, fd = dv * cfg.ffn_mult, dd * cfg.ffn_mult
    G2, V, L = cfg.patch_grid ** 2, cfg.vocab_size, cfg.max_text_len

    def block(d, f):
        return 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d)

    enc = (cfg.patch_dim * dv + dv) + G2 * dv + cfg.vision_layers * block(dv, fv) + 2 * dv
    proj = dv * dd + dd
    m = len(cfg.cross_attention_layers)
    dec = (V * dd + L * dd + cfg.decoder_layers * block(dd, fd)
           + m * (4 * (dd * dd + dd) + 2 * dd) + 2 * dd + V)
    if not cfg.tie_embeddings:
        dec += dd * V
    extras = 1  # log_tau
    if cfg.use_attention_pooling:
        extras += dd
    if cfg.use_projection_head:
        extras += 2 * (dd * dd + dd)
    return enc + proj + dec + extras


class Mammut:
    """The full image-text model: one encoder, one shared decoder."""

    def __init__(self, config: MammutConfig, init_seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng([init_seed, 0x4A11])
        self._build(rng)

    # -- parameter construction -------------------------------------------

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def _attn_params(self, rng, prefix: str, dim: int, zero_out: bool = False):
        # one fused projection for q,k,v (columns in that order)
        self._param(f"{prefix}.wqkv", _init_linear(rng, dim, 3 * dim))
        self._param(f"{prefix}.bqkv", np.zeros(3 * dim))
        wo = np.zeros((dim, dim)) if zero_out else _init_linear(rng, dim, dim)
        self._param(f"{prefix}.wo", wo)
        self._param(f"{prefix}.bo", np.zeros(dim))

    def _block_params(self, rng, prefix: str, dim: int, ffn: int):
        self._param(f"{prefix}.ln1.g", np.ones(dim))
        self._param(f"{prefix}.ln1.b", np.zeros(dim))
        self._attn_params(rng, f"{prefix}.attn", dim)
        self._param(f"{prefix}.ln2.g", np.ones(dim))
        self._param(f"{prefix}.ln2.b", np.zeros(dim))
        self._param(f"{prefix}.ffn.w1", _init_linear(rng, dim, ffn))
        self._param(f"{prefix}.ffn.b1", np.zeros(ffn))
        self._param(f"{prefix}.ffn.w2", _init_linear(rng, ffn, dim))
        self._param(f"{prefix}.ffn.b2", np.zeros(dim))

    def _build(self, rng):
        cfg = self.config
        dv, dd = cfg.vision_dim, cfg.decoder_dim
        ffn_v, ffn_d = dv * cfg.ffn_mult, dd * cfg.ffn_mult

        self._param("enc.patch_embed.w", _init_linear(rng, cfg.patch_dim, dv))
        self._param("enc.patch_embed.b", np.zeros(dv))
        self._param("enc.pos_grid",
                    rng.normal(0.0, 0.01, size=(cfg.patch_grid, cfg.patch_grid, dv)))
        for i in range(cfg.vision_layers):
            self._block_params(rng, f"enc.l{i}", dv, ffn_v)
        self._param("enc.ln_f.g", np.ones(dv))
        self._param("enc.ln_f.b", np.zeros(dv))

        self._param("proj_visual.w", _init_linear(rng, dv, dd))
        self._param("proj_visual.b", np.zeros(dd))

        self._param("dec.tok_embed", rng.normal(0.0, 0.02, size=(cfg.vocab_size, dd)))
        self._param("dec.pos_embed", rng.normal(0.0, 0.01, size=(cfg.max_text_len, dd)))
        for i in range(cfg.decoder_layers):
            self._block_params(rng, f"dec.l{i}", dd, ffn_d)
            if (i + 1) in cfg.cross_attention_layers:
                self._param(f"dec.l{i}.lnx.g", np.ones(dd))
                self._param(f"dec.l{i}.lnx.b", np.zeros(dd))
                self._attn_params(rng, f"dec.l{i}.xattn", dd, zero_out=True)
        self._param("dec.ln_f.g", np.ones(dd))
        self._param("dec.ln_f.b", np.zeros(dd))
        if not cfg.tie_embeddings:
            self._param("dec.out.w", _init_linear(rng, dd, cfg.vocab_size))
        self._param("dec.out.b", np.zeros(cfg.vocab_size))

        self._param("log_tau", np.zeros(()))  # tau = exp(log_tau), init 1.0

        if cfg.use_attention_pooling:
            self._param("pool.query", rng.normal(0.0, 0.02, size=(1, dd)))
        if cfg.use_projection_head:
            self._param("head.image.w", _init_linear(rng, dd, dd))
            self._param("head.image.b", np.zeros(dd))
            self._param("head.text.w", _init_linear(rng, dd, dd))
            self._param("head.text.b", np.zeros(dd))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def temperature(self) -> Tensor:
        """Learnable tau > 0 via exponential parameterization."""
        return T.exp(self.params["log_tau"])

    # -- shared transformer machinery --------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return T.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"],
                            self.config.ln_eps)

    def _split_heads(self, x: Tensor, heads: int) -> Tensor:
        b, t, d = x.shape
        return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, t, dh = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor,
                   heads: int, mask: np.ndarray | None) -> Tensor:
        p = self.params
        d = q_in.shape[-1]
        if q_in is kv_in:
            qkv = T.linear(q_in, p[f"{prefix}.wqkv"], p[f"{prefix}.bqkv"])
            ctx = T.attention_core(qkv, heads, mask)
        else:  # cross-attention: queries from text, keys/values from vision
            q = T.linear(q_in, T.narrow(p[f"{prefix}.wqkv"], 1, 0, d),
                         T.narrow(p[f"{prefix}.bqkv"], 0, 0, d))
            kv = T.linear(kv_in, T.narrow(p[f"{prefix}.wqkv"], 1, d, 2 * d),
                          T.narrow(p[f"{prefix}.bqkv"], 0, d, 2 * d))
            ctx = T.attention_core_cross(q, kv, heads, mask)
        return T.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = T.gelu(T.linear(x, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"]))
        return T.linear(h, p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"])

    # -- vision pathway -----------------------------------------------------

    def encode_image(self, patches: np.ndarray,
                     pos_grid: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Raw patches -> (encoder tokens [B,P,dv], pooled unit embedding [B,d]).

        pos_grid overrides the learned grid (the cropped-positional-embedding
        path passes a transformed grid here).
        """
        cfg = self.config
        if patches.shape[1] != cfg.num_patches or patches.shape[2] != cfg.patch_dim:
            raise T.ShapeError(
                f"patches {patches.shape} vs expected "
                f"[B, {cfg.num_patches}, {cfg.patch_dim}]")
        grid = pos_grid if pos_grid is not None else self.params["enc.pos_grid"]
        if grid.shape[0] * grid.shape[1] != cfg.num_patches:
            raise T.ShapeError(f"pos grid {grid.shape} vs {cfg.num_patches} patches")
        x = self._linear(Tensor(patches), "enc.patch_embed")
        x = T.add(x, T.reshape(grid, (cfg.num_patches, cfg.vision_dim)))
        for i in range(cfg.vision_layers):
            x = self._encoder_block(f"enc.l{i}", x)
        enc = self._ln(x, "enc.ln_f")
        return enc, self._pool_visual(enc)

    def _encoder_block(self, prefix: str, x: Tensor) -> Tensor:
        h = self._ln(x, f"{prefix}.ln1")
        x = T.add(x, self._attention(f"{prefix}.attn", h, h,
                                     self.config.vision_heads, None))
        return T.add(x, self._ffn(prefix, self._ln(x, f"{prefix}.ln2")))

    def project_visual(self, enc: Tensor) -> Tensor:
        """Map encoder tokens to decoder width with one shared affine."""
        return self._linear(enc, "proj_visual")

    def _pool_visual(self, enc: Tensor) -> Tensor:
        if self.config.use_attention_pooling:
            pooled = self._attention_pool(self.project_visual(enc))
        else:
            # mean over patches, then project: affine commutes with the mean
            pooled = self.project_visual(T.mean(enc, axis=1))
        if self.config.use_projection_head:
            pooled = self._linear(pooled, "head.image")
        return T.l2_normalize(pooled)

    def _attention_pool(self, tokens: Tensor) -> Tensor:
        q = self.params["pool.query"]  # [1, d]
        scores = T.scale(T.matmul(tokens, T.transpose(q, (1, 0))),
                         1.0 / math.sqrt(q.shape[-1]))  # [B, P, 1]
        w = T.masked_softmax(T.transpose(scores, (0, 2, 1)),
                             np.ones((tokens.shape[0], 1, tokens.shape[1]), bool))
        return T.reshape(T.matmul(w, tokens), (tokens.shape[0], tokens.shape[2]))

    def encode_and_pool(self, patches: np.ndarray,
                        pos_grid: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """(projected visual tokens [B,P,d], pooled embedding [B,d])."""
        enc, v = self.encode_image(patches, pos_grid)
        return self.project_visual(enc), v

    # -- text decoder passes -------------------------------------------------

    def _embed_tokens(self, tokens: TokenBatch) -> Tensor:
        L = tokens.length
        if L > self.config.max_text_len:
            raise T.ShapeError(f"sequence {L} exceeds max_text_len "
                               f"{self.config.max_text_len}")
        x = T.embedding(self.params["dec.tok_embed"], tokens.ids)
        return T.add(x, T.narrow(self.params["dec.pos_embed"], 0, 0, L))

    def _decoder_stack(self, x: Tensor, mask: np.ndarray,
                       cross_kv: Tensor | None) -> Tensor:
        cfg = self.config
        fused = set(cfg.cross_attention_layers)
        for i in range(cfg.decoder_layers):
            prefix = f"dec.l{i}"
            h = self._ln(x, f"{prefix}.ln1")
            x = T.add(x, self._attention(f"{prefix}.attn", h, h,
                                         cfg.decoder_heads, mask))
            if cross_kv is not None and (i + 1) in fused:
                x = T.add(x, self._attention(f"{prefix}.xattn",
                                             self._ln(x, f"{prefix}.lnx"),
                                             cross_kv, cfg.decoder_heads, None))
            x = T.add(x, self._ffn(prefix, self._ln(x, f"{prefix}.ln2")))
        return self._ln(x, "dec.ln_f")

    def _pool_text(self, h: Tensor, valid: np.ndarray) -> Tensor:
        pooled = T.masked_mean(h, valid)
        if self.config.use_projection_head:
            pooled = self._linear(pooled, "head.text")
        return T.l2_normalize(pooled)

    def _vocab_logits(self, h: Tensor) -> Tensor:
        if self.config.tie_embeddings:
            w_out = T.transpose(self.params["dec.tok_embed"], (1, 0))
            return T.add(T.matmul(h, w_out), self.params["dec.out.b"])
        return T.linear(h, self.params["dec.out.w"], self.params["dec.out.b"])

    def contrastive_pass(self, tokens: TokenBatch) -> Tensor:
        """Text-only pass: bidirectional masking by default, every
        cross-attention sublayer skipped; mean over valid tokens, unit norm."""
        if not tokens.valid.any(axis=1).all():
            raise T.ShapeError("contrastive pass needs a nonempty sequence per row")
        mask = build_attention_mask(self.config.masking_mode_contrastive,
                                    tokens.valid)
        h = self._decoder_stack(self._embed_tokens(tokens), mask, cross_kv=None)
        return self._pool_text(h, tokens.valid)

    def generative_pass(self, tokens: TokenBatch, visual_tokens: Tensor) -> Tensor:
        """Causal pass with cross-attention; returns vocab logits [B,T,V]."""
        if visual_tokens is None:
            raise ValueError("generative pass requires visual tokens")
        mask = build_attention_mask("causal", tokens.valid)
        h = self._decoder_stack(self._embed_tokens(tokens), mask, visual_tokens)
        return self._vocab_logits(h)

    def joint_passes(self, tokens: TokenBatch,
                     visual_tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Both text passes as one batched decoder run over the shared weights.

        Row-for-row this matches contrastive_pass + generative_pass (the
        cross-attention sublayers see only the generative half); it exists so
        a training step pays per-layer dispatch once instead of twice.
        """
        cfg = self.config
        B = tokens.batch
        x1 = self._embed_tokens(tokens)
        x = T.concat([x1, x1], axis=0)
        mask = np.concatenate(
            [build_attention_mask(cfg.masking_mode_contrastive, tokens.valid),
             build_attention_mask("causal", tokens.valid)], axis=0)
        fused = set(cfg.cross_attention_layers)
        for i in range(cfg.decoder_layers):
            prefix = f"dec.l{i}"
            h = self._ln(x, f"{prefix}.ln1")
            x = T.add(x, self._attention(f"{prefix}.attn", h, h,
                                         cfg.decoder_heads, mask))
            if (i + 1) in fused:
                con = T.narrow(x, 0, 0, B)
                gen = T.narrow(x, 0, B, B)
                gen = T.add(gen, self._attention(f"{prefix}.xattn",
                                                 self._ln(gen, f"{prefix}.lnx"),
                                                 visual_tokens,
                                                 cfg.decoder_heads, None))
                x = T.concat([con, gen], axis=0)
            x = T.add(x, self._ffn(prefix, self._ln(x, f"{prefix}.ln2")))
        h = self._ln(x, "dec.ln_f")
        l = self._pool_text(T.narrow(h, 0, 0, B), tokens.valid)
        logits = self._vocab_logits(T.narrow(h, 0, B, B))
        return l, logits

    # -- generation -----------------------------------------------------------

    def generate(self, visual_tokens: Tensor, prompt_ids: np.ndarray,
                 eos_id: int, max_len: int | None = None,
                 pad_id: int = 0) -> list[list[int]]:
        """Greedy decoding over the full vocabulary, one generative pass per
        step (recomputed from scratch, fine at this scale); np.argmax breaks
        ties toward the lowest token id. Stops at eos or max_len; returns
        continuations per row, without the prompt or the stopping eos."""
        cfg = self.config
        max_len = cfg.max_text_len if max_len is None else min(max_len, cfg.max_text_len)
        prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
        B = visual_tokens.shape[0]
        rows = np.full((B, max_len), pad_id, dtype=np.int64)
        rows[:, :prompt_ids.shape[1]] = prompt_ids
        lengths = np.full(B, prompt_ids.shape[1], dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        with T.no_grad():
            while lengths.max() < max_len and not done.all():
                L = int(lengths.max())
                valid = np.arange(L)[None, :] < lengths[:, None]
                batch = TokenBatch(ids=rows[:, :L], valid=valid,
                                   bos_id=int(prompt_ids[0, 0]),
                                   eos_id=eos_id, pad_id=pad_id)
                logits = self.generative_pass(batch, visual_tokens)
                nxt = np.argmax(logits.data[np.arange(B), lengths - 1], axis=-1)
                for b in range(B):
                    if done[b]:
                        continue
                    if nxt[b] == eos_id:
                        done[b] = True
                        continue
                    rows[b, lengths[b]] = nxt[b]
                    lengths[b] += 1
        start = prompt_ids.shape[1]
        return [rows[b, start:lengths[b]].tolist() for b in range(B)]
