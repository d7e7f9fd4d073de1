"""Toy vision/text transformer towers with prompt-aware execution.

Both towers share one architecture: pre-norm blocks (attention + GELU MLP of
expansion 4) with separate q/k/v/o projection maps, learned positional
embeddings, and a bias-free projection to the shared d_proj space. The vision
tower pools the CLS state from the last layer; the text tower pools the final
hidden state of the last real token. Prompt matrices, when given, are fresh
per layer up to depth i and propagate like ordinary tokens afterwards.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericalAbort

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_proj: int = 32
    patch_count: int = 16  # M
    d_patch: int = 32
    vocab_size: int = 512
    max_text_len: int = 32  # T_max
    temperature: float = 0.07
    text_causal: bool = False

    def __post_init__(self):
        if self.layers < 2:
            raise ConfigError(f"layers must be >= 2, got {self.layers}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must leave room for the pad token and one real token")
        for name in ("d_proj", "patch_count", "d_patch", "max_text_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


class Adapter(nn.Module):
    """Bottleneck residual adapter; identity at init (up map starts at zero)."""

    def __init__(self, d_model: int, width: int):
        super().__init__()
        self.down = nn.Linear(d_model, width)
        self.up = nn.Linear(width, d_model)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(F.gelu(self.down(x)))


def _lora_delta(h: torch.Tensor, entry) -> torch.Tensor:
    a, b, scale = entry
    return (h @ a.t() @ b.t()) * scale


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP with hooks for LoRA deltas and adapters."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.ln_attn = nn.LayerNorm(d_model)
        self.ln_mlp = nn.LayerNorm(d_model)
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)
        self.mlp_in = nn.Linear(d_model, 4 * d_model)
        self.mlp_out = nn.Linear(4 * d_model, d_model)

    def forward(
        self,
        x: torch.Tensor,
        key_padding_mask: torch.Tensor | None = None,
        causal: bool = False,
        lora: dict | None = None,
        adapter: nn.Module | None = None,
    ) -> torch.Tensor:
        bsz, seq, d = x.shape
        h = self.ln_attn(x)

        def project(linear: nn.Linear, name: str) -> torch.Tensor:
            out = linear(h)
            if lora and name in lora:
                out = out + _lora_delta(h, lora[name])
            return out

        q = project(self.q_proj, "q").view(bsz, seq, self.n_heads, self.head_dim).transpose(1, 2)
        k = project(self.k_proj, "k").view(bsz, seq, self.n_heads, self.head_dim).transpose(1, 2)
        v = project(self.v_proj, "v").view(bsz, seq, self.n_heads, self.head_dim).transpose(1, 2)

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if causal:
            tri = torch.ones(seq, seq, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(tri, float("-inf"))
        if key_padding_mask is not None:
            # True marks padding; pads may never be attended to
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(bsz, seq, d)
        attn_out = self.o_proj(ctx)
        if lora and "o" in lora:
            attn_out = attn_out + _lora_delta(ctx, lora["o"])
        x = x + attn_out

        m = self.mlp_out(F.gelu(self.mlp_in(self.ln_mlp(x))))
        if adapter is not None:
            m = adapter(m)
        return x + m


def _run_blocks(
    blocks: nn.ModuleList,
    x: torch.Tensor,
    prompt_slice: slice,
    prompts: list[torch.Tensor] | None,
    key_padding_mask: torch.Tensor | None = None,
    causal: bool = False,
    lora: list | None = None,
    adapters: list | None = None,
    trace: list | None = None,
) -> torch.Tensor:
    """Run the tower's blocks with fresh-prompt replacement up to depth i.

    ``prompts`` holds i matrices; block l (1-indexed) for l <= i receives the
    fresh matrix at the prompt positions, discarding whatever the previous
    block produced there. Deeper blocks carry the prompt states forward
    unchanged in role, like ordinary tokens.
    """
    depth = len(prompts) if prompts else 0
    for layer, block in enumerate(blocks):
        if 0 < layer < depth:
            fresh = prompts[layer].unsqueeze(0).expand(x.shape[0], -1, -1)
            x = torch.cat([x[:, : prompt_slice.start], fresh, x[:, prompt_slice.stop :]], dim=1)
        if trace is not None:
            trace.append(x.detach().clone())
        x = block(
            x,
            key_padding_mask=key_padding_mask,
            causal=causal,
            lora=lora[layer] if lora else None,
            adapter=adapters[layer] if adapters else None,
        )
    return x


class EncoderStack(nn.Module):
    """Paired vision and text towers sharing a projection width."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.frozen = False
        d = config.d_model

        self.patch_embed = nn.Linear(config.d_patch, d)
        self.cls_token = nn.Parameter(torch.empty(d))
        self.visual_pos = nn.Parameter(torch.empty(1 + config.patch_count, d))
        self.visual_blocks = nn.ModuleList(
            TransformerBlock(d, config.n_heads) for _ in range(config.layers)
        )
        self.visual_proj = nn.Linear(d, config.d_proj, bias=False)

        self.token_embed = nn.Embedding(config.vocab_size, d)
        self.text_pos = nn.Parameter(torch.empty(config.max_text_len, d))
        self.text_blocks = nn.ModuleList(
            TransformerBlock(d, config.n_heads) for _ in range(config.layers)
        )
        self.text_proj = nn.Linear(d, config.d_proj, bias=False)

        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        # embeddings, positions, and CLS start small; linear maps use fan-in
        # scaling; norms and biases at their identity defaults
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in sorted(self.named_parameters(), key=lambda kv: kv[0]):
                if "ln_" in name:
                    param.fill_(1.0) if name.endswith("weight") else param.zero_()
                elif name.endswith("bias"):
                    param.zero_()
                elif "embed" in name or "pos" in name or name == "cls_token":
                    param.normal_(0.0, 0.02, generator=gen)
                else:
                    param.normal_(0.0, param.shape[-1] ** -0.5, generator=gen)

    # -- lifecycle -----------------------------------------------------------

    def freeze(self) -> "EncoderStack":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, param in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            digest.update(name.encode())
            digest.update(param.detach().numpy().tobytes())
        return digest.hexdigest()

    # -- encoding ------------------------------------------------------------

    def encode_image(
        self,
        patches: torch.Tensor | np.ndarray,
        prompts: list[torch.Tensor] | None = None,
        lora: list | None = None,
        adapters: list | None = None,
        trace: list | None = None,
    ) -> torch.Tensor:
        """Embed patch grids; returns (d_proj,) for one item or (B, d_proj).

        Sequence order is [CLS, patches, prompt]; the CLS state from the last
        block feeds the visual projection.
        """
        cfg = self.config
        x = torch.as_tensor(np.asarray(patches), dtype=self.patch_embed.weight.dtype)
        single = x.dim() == 2
        if single:
            x = x.unsqueeze(0)
        if x.shape[1:] != (cfg.patch_count, cfg.d_patch):
            raise DataError(
                f"patches must be ({cfg.patch_count}, {cfg.d_patch}), got {tuple(x.shape[1:])}"
            )
        if not torch.isfinite(x).all():
            raise DataError("non-finite values in patches")
        self._check_prompts(prompts)

        h = self.patch_embed(x)
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        h = torch.cat([cls, h], dim=1) + self.visual_pos
        n = prompts[0].shape[0] if prompts else 0
        if n:
            h = torch.cat([h, prompts[0].unsqueeze(0).expand(h.shape[0], -1, -1)], dim=1)
        # prompts occupy the tail; no positional signal is added to them
        p_slice = slice(1 + cfg.patch_count, 1 + cfg.patch_count + n)
        h = _run_blocks(
            self.visual_blocks, h, p_slice, prompts,
            lora=lora, adapters=adapters, trace=trace,
        )
        out = self.visual_proj(h[:, 0])
        return out[0] if single else out

    def encode_text(
        self,
        tokens,
        prompts: list[torch.Tensor] | None = None,
        lora: list | None = None,
        adapters: list | None = None,
        trace: list | None = None,
    ) -> torch.Tensor:
        """Embed token sequences; pad token 0 may trail the real tokens.

        Sequence order is [prompt, tokens]; pooling always reads the final
        state of the last real token, whatever the prompt length.
        """
        cfg = self.config
        if isinstance(tokens, np.ndarray):
            single = tokens.ndim == 1
        else:
            single = bool(tokens) and not isinstance(tokens[0], (list, tuple, np.ndarray))
        rows, lengths = self._prepare_tokens(tokens)
        self._check_prompts(prompts)

        seq = rows.shape[1]
        h = self.token_embed(rows) + self.text_pos[:seq]
        n = prompts[0].shape[0] if prompts else 0
        if n:
            h = torch.cat([prompts[0].unsqueeze(0).expand(h.shape[0], -1, -1), h], dim=1)
        pad_mask = torch.zeros(h.shape[0], n + seq, dtype=torch.bool)
        pad_mask[:, n:] = torch.arange(seq) >= lengths[:, None]
        p_slice = slice(0, n)
        h = _run_blocks(
            self.text_blocks, h, p_slice, prompts,
            key_padding_mask=pad_mask, causal=cfg.text_causal,
            lora=lora, adapters=adapters, trace=trace,
        )
        pooled = h[torch.arange(h.shape[0]), n + lengths - 1]
        out = self.text_proj(pooled)
        return out[0] if single else out

    def _prepare_tokens(self, tokens) -> tuple[torch.Tensor, torch.Tensor]:
        if isinstance(tokens, np.ndarray):
            tokens = tokens.tolist()
        if not tokens:
            raise DataError("empty token sequence")
        if not isinstance(tokens[0], (list, tuple)):
            tokens = [tokens]
        cfg = self.config
        lengths = []
        for row in tokens:
            row = list(row)
            # trailing pad tokens are padding, not content
            real = len(row)
            while real > 0 and row[real - 1] == 0:
                real -= 1
            if real == 0:
                raise DataError("token sequence has no real tokens")
            if real > cfg.max_text_len:
                raise DataError(f"token count {real} exceeds max_text_len={cfg.max_text_len}")
            for t in row[:real]:
                if not 0 <= t < cfg.vocab_size:
                    raise DataError(f"token {t} outside vocabulary of size {cfg.vocab_size}")
            lengths.append(real)
        width = max(lengths)
        rows = torch.zeros(len(tokens), width, dtype=torch.long)
        for r, row in enumerate(tokens):
            rows[r, : lengths[r]] = torch.as_tensor(list(row)[: lengths[r]], dtype=torch.long)
        return rows, torch.as_tensor(lengths, dtype=torch.long)

    def _check_prompts(self, prompts: list[torch.Tensor] | None) -> None:
        if not prompts:
            return
        cfg = self.config
        if len(prompts) >= cfg.layers:
            raise ConfigError(f"prompt depth {len(prompts)} must be < layers={cfg.layers}")
        n = prompts[0].shape[0]
        for p in prompts:
            if p.dim() != 2 or p.shape != (n, cfg.d_model):
                raise ConfigError(
                    f"prompt matrices must all be ({n}, {cfg.d_model}), got {tuple(p.shape)}"
                )


def info_nce_loss(image_emb: torch.Tensor, text_emb: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE over cosine similarities at the given temperature.

    Row i of each matrix is a positive pair; every other row in the batch
    serves as a negative. Both retrieval directions are averaged.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if image_emb.shape != text_emb.shape or image_emb.dim() != 2:
        raise ConfigError(
            f"paired embedding matrices must match, got {tuple(image_emb.shape)} "
            f"vs {tuple(text_emb.shape)}"
        )
    for name, emb in (("image", image_emb), ("text", text_emb)):
        norms = emb.norm(dim=1)
        if (norms == 0).any():
            raise DataError(f"zero-norm {name} embedding row; cosine similarity undefined")
    sim = F.normalize(image_emb, dim=1) @ F.normalize(text_emb, dim=1).t() / temperature
    labels = torch.arange(sim.shape[0])
    return 0.5 * (F.cross_entropy(sim, labels) + F.cross_entropy(sim.t(), labels))


def pretrain_alignment(
    stack: EncoderStack,
    bundles,
    epochs: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> dict:
    """Train the full stack on (image, text) pairs, then freeze it.

    Returns a report with first/last epoch losses. Raises NumericalAbort on a
    non-finite loss.
    """
    if stack.frozen:
        raise ConfigError("stack is already frozen")
    if epochs == 0:
        stack.freeze()
        return {"epochs": 0, "initial_loss": None, "final_loss": None}
    if bundles.num_items < 2:
        raise DataError("alignment needs at least 2 items for in-batch negatives")

    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(stack.parameters(), lr=lr, betas=(0.9, 0.999))
    patches = torch.as_tensor(bundles.patches, dtype=torch.float32)
    epoch_losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(bundles.num_items)
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue  # a singleton batch has no negatives
            loss = info_nce_loss(
                stack.encode_image(patches[torch.as_tensor(idx)]),
                stack.encode_text([bundles.tokens[i] for i in idx]),
                stack.config.temperature,
            )
            if not torch.isfinite(loss):
                raise NumericalAbort(f"alignment loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            count += 1
        epoch_losses.append(total / max(count, 1))
        logger.debug("alignment epoch %d loss %.4f", epoch, epoch_losses[-1])

    stack.freeze()
    return {
        "epochs": epochs,
        "initial_loss": epoch_losses[0],
        "final_loss": epoch_losses[-1],
        "epoch_losses": epoch_losses,
    }
