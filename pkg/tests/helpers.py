"""Shared test oracles: finite differences and a scalar transformer forward."""

import math

import numpy as np
import torch


def fd_gradient_check(loss_fn, tensors, eps=1e-5, tol=1e-4):
    """Compare autograd gradients against central finite differences.

    ``loss_fn`` maps the tensors to a scalar; every tensor must be float64
    with requires_grad set. Returns the worst relative error seen; asserts
    it stays within ``tol`` per tensor, where relative error is
    max|analytic - numeric| / (max|numeric| + 1e-12).
    """
    loss = loss_fn(*tensors)
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    worst = 0.0
    for tensor, grad in zip(tensors, grads):
        numeric = torch.zeros_like(tensor)
        flat = tensor.detach().reshape(-1)
        num_flat = numeric.reshape(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = loss_fn(*tensors).item()
            flat[idx] = orig - eps
            down = loss_fn(*tensors).item()
            flat[idx] = orig
            num_flat[idx] = (up - down) / (2 * eps)
        err = (grad - numeric).abs().max().item()
        scale = numeric.abs().max().item() + 1e-12
        rel = err / scale
        worst = max(worst, rel)
        assert rel <= tol, f"gradient mismatch: rel err {rel:.3e} > {tol}"
    return worst


# ---------------------------------------------------------------------------
# Independent numpy forward pass mirroring the tower architecture, written
# scalar-by-scalar from the layer definitions rather than from the torch code.
# ---------------------------------------------------------------------------


def np_layer_norm(x, weight, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * weight + bias


def np_gelu(x):
    out = np.empty_like(x)
    flat_in, flat_out = x.reshape(-1), out.reshape(-1)
    for i, t in enumerate(flat_in):
        flat_out[i] = 0.5 * t * (1.0 + math.erf(t / math.sqrt(2.0)))
    return out


def np_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def np_block(x, weights, prefix, n_heads, pad_mask=None, causal=False):
    d = x.shape[-1]
    head_dim = d // n_heads
    h = np_layer_norm(x, weights[f"{prefix}.ln_attn.weight"], weights[f"{prefix}.ln_attn.bias"])
    q = h @ weights[f"{prefix}.q_proj.weight"].T + weights[f"{prefix}.q_proj.bias"]
    k = h @ weights[f"{prefix}.k_proj.weight"].T + weights[f"{prefix}.k_proj.bias"]
    v = h @ weights[f"{prefix}.v_proj.weight"].T + weights[f"{prefix}.v_proj.bias"]
    seq = x.shape[0]
    ctx = np.zeros((seq, d))
    for head in range(n_heads):
        cols = slice(head * head_dim, (head + 1) * head_dim)
        scores = q[:, cols] @ k[:, cols].T / math.sqrt(head_dim)
        if causal:
            for a in range(seq):
                for b in range(a + 1, seq):
                    scores[a, b] = -np.inf
        if pad_mask is not None:
            scores[:, pad_mask] = -np.inf
        ctx[:, cols] = np_softmax(scores) @ v[:, cols]
    x = x + ctx @ weights[f"{prefix}.o_proj.weight"].T + weights[f"{prefix}.o_proj.bias"]
    h2 = np_layer_norm(x, weights[f"{prefix}.ln_mlp.weight"], weights[f"{prefix}.ln_mlp.bias"])
    m = np_gelu(h2 @ weights[f"{prefix}.mlp_in.weight"].T + weights[f"{prefix}.mlp_in.bias"])
    m = m @ weights[f"{prefix}.mlp_out.weight"].T + weights[f"{prefix}.mlp_out.bias"]
    return x + m


def np_encode_image(weights, config, patches, prompts=None):
    h = patches @ weights["patch_embed.weight"].T + weights["patch_embed.bias"]
    x = np.concatenate([weights["cls_token"][None, :], h], axis=0) + weights["visual_pos"]
    if prompts:
        x = np.concatenate([x, prompts[0]], axis=0)
    real = 1 + config.patch_count
    for layer in range(config.layers):
        if prompts and 0 < layer < len(prompts):
            x = np.concatenate([x[:real], prompts[layer]], axis=0)
        x = np_block(x, weights, f"visual_blocks.{layer}", config.n_heads)
    return x[0] @ weights["visual_proj.weight"].T


def np_encode_text(weights, config, tokens, prompts=None, pad_to=None):
    real = len(tokens)
    width = pad_to if pad_to is not None else real
    padded = list(tokens) + [0] * (width - real)
    emb = weights["token_embed.weight"][padded] + weights["text_pos"][:width]
    n = prompts[0].shape[0] if prompts else 0
    x = np.concatenate([prompts[0], emb], axis=0) if prompts else emb
    pad_mask = np.zeros(n + width, dtype=bool)
    pad_mask[n + real :] = True
    for layer in range(config.layers):
        if prompts and 0 < layer < len(prompts):
            x = np.concatenate([prompts[layer], x[n:]], axis=0)
        x = np_block(
            x, weights, f"text_blocks.{layer}", config.n_heads,
            pad_mask=pad_mask, causal=config.text_causal,
        )
    return x[n + real - 1] @ weights["text_proj.weight"].T


def random_weights(stack, seed, scale=0.5):
    """Draw float64 arrays shaped like every stack parameter."""
    rng = np.random.default_rng(seed)
    return {
        name: rng.normal(0.0, scale, size=tuple(param.shape))
        for name, param in stack.named_parameters()
    }


def load_weights(stack, weights):
    with torch.no_grad():
        for name, param in stack.named_parameters():
            param.copy_(torch.from_numpy(weights[name]))
