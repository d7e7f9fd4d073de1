"""Parameter-efficient strategies over a frozen encoder stack.

Three interchangeable families: deep prompts (fresh matrices per layer up to
a depth), LoRA deltas on the attention projection maps, and bottleneck
adapters after each MLP. A PeftView pairs a frozen stack with exactly one
strategy and exposes the prompted/patched encode calls plus parameter
accounting.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import Adapter, EncoderConfig, EncoderStack
from .errors import ConfigError

PROMPT_INIT_STD = 0.02
LORA_TARGETS = ("q", "k", "v", "o")


class PromptSet(nn.Module):
    """Per-layer prompt matrices for both towers; depth i, n rows each."""

    def __init__(self, visual: list[torch.Tensor], textual: list[torch.Tensor]):
        super().__init__()
        if len(visual) != len(textual) or not visual:
            raise ConfigError("need the same nonzero number of matrices per modality")
        shape = visual[0].shape
        for mat in (*visual, *textual):
            if mat.shape != shape:
                raise ConfigError(f"prompt matrices disagree: {tuple(mat.shape)} vs {tuple(shape)}")
            if not torch.isfinite(mat).all():
                raise ConfigError("non-finite prompt entries")
        self.visual = nn.ParameterList(nn.Parameter(m.clone()) for m in visual)
        self.textual = nn.ParameterList(nn.Parameter(m.clone()) for m in textual)

    @property
    def depth(self) -> int:
        return len(self.visual)

    @property
    def length(self) -> int:
        return self.visual[0].shape[0]


def init_prompts(config: EncoderConfig, depth: int, length: int, seed: int = 0) -> PromptSet:
    """Draw a PromptSet with entries from normal(0, 0.02^2), per-seed stable."""
    if not 1 <= depth < config.layers:
        raise ConfigError(f"prompt depth must satisfy 1 <= i < L={config.layers}, got {depth}")
    if length < 1:
        raise ConfigError("prompt length must be >= 1; use the frozen strategy instead of n = 0")
    gen = torch.Generator().manual_seed(seed)

    def draw() -> torch.Tensor:
        return torch.empty(length, config.d_model).normal_(0.0, PROMPT_INIT_STD, generator=gen)

    return PromptSet([draw() for _ in range(depth)], [draw() for _ in range(depth)])


@dataclass
class LoraSpec:
    rank: int = 4
    alpha: float = 8.0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")


@dataclass
class AdapterSpec:
    width: int = 16

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")


class _LoraPair(nn.Module):
    """A (r x d_in) starts small, B (d_out x r) starts at zero: no-op at init."""

    def __init__(self, d_in: int, d_out: int, rank: int, gen: torch.Generator):
        super().__init__()
        self.a = nn.Parameter(torch.empty(rank, d_in).normal_(0.0, 0.02, generator=gen))
        self.b = nn.Parameter(torch.zeros(d_out, rank))


class PeftView(nn.Module):
    """A frozen stack plus exactly one trainable strategy."""

    def __init__(self, stack: EncoderStack, kind: str, seed: int = 0):
        super().__init__()
        if not stack.frozen:
            raise ConfigError("stack must be frozen before attaching a strategy")
        self.stack = stack
        self.kind = kind
        self.prompts: PromptSet | None = None
        self.lora_spec: LoraSpec | None = None
        self.adapter_spec: AdapterSpec | None = None
        self._seed = seed

    # -- construction helpers --------------------------------------------

    def _build_lora(self, spec: LoraSpec) -> None:
        d = self.stack.config.d_model
        gen = torch.Generator().manual_seed(self._seed)
        pairs = {}
        for tower in ("visual", "textual"):
            for layer in range(self.stack.config.layers):
                for target in LORA_TARGETS:
                    pairs[f"{tower}_{layer}_{target}"] = _LoraPair(d, d, spec.rank, gen)
        self.lora_pairs = nn.ModuleDict(pairs)
        self.lora_spec = spec

    def _build_adapters(self, spec: AdapterSpec) -> None:
        d = self.stack.config.d_model
        layers = self.stack.config.layers
        self.visual_adapters = nn.ModuleList(Adapter(d, spec.width) for _ in range(layers))
        self.textual_adapters = nn.ModuleList(Adapter(d, spec.width) for _ in range(layers))
        self.adapter_spec = spec

    def _lora_tables(self, tower: str) -> list[dict]:
        spec = self.lora_spec
        scale = spec.alpha / spec.rank
        tables = []
        for layer in range(self.stack.config.layers):
            tables.append(
                {
                    target: (
                        self.lora_pairs[f"{tower}_{layer}_{target}"].a,
                        self.lora_pairs[f"{tower}_{layer}_{target}"].b,
                        scale,
                    )
                    for target in LORA_TARGETS
                }
            )
        return tables

    # -- encoding ----------------------------------------------------------

    def _encode_kwargs(self, tower: str) -> dict:
        if self.kind == "prompt":
            mats = self.prompts.visual if tower == "visual" else self.prompts.textual
            return {"prompts": list(mats)}
        if self.kind == "lora":
            return {"lora": self._lora_tables(tower)}
        if self.kind == "adapter":
            adapters = self.visual_adapters if tower == "visual" else self.textual_adapters
            return {"adapters": list(adapters)}
        return {}

    def encode_image(self, patches, trace=None) -> torch.Tensor:
        return self.stack.encode_image(patches, trace=trace, **self._encode_kwargs("visual"))

    def encode_text(self, tokens, trace=None) -> torch.Tensor:
        return self.stack.encode_text(tokens, trace=trace, **self._encode_kwargs("textual"))

    # -- accounting ----------------------------------------------------------

    def strategy_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def descriptor(self) -> dict:
        if self.kind == "prompt":
            return {"kind": "prompt", "depth": self.prompts.depth, "length": self.prompts.length}
        if self.kind == "lora":
            return {"kind": "lora", "rank": self.lora_spec.rank, "alpha": self.lora_spec.alpha}
        if self.kind == "adapter":
            return {"kind": "adapter", "width": self.adapter_spec.width}
        return {"kind": "frozen"}


def attach_strategy(
    stack: EncoderStack,
    strategy: str | PromptSet | LoraSpec | AdapterSpec,
    seed: int = 0,
) -> PeftView:
    """Wrap a frozen stack with one strategy; rejects stacked strategies."""
    if isinstance(strategy, (list, tuple, set)):
        raise ConfigError("exactly one strategy may be attached at a time")
    if isinstance(strategy, str):
        if strategy != "frozen":
            raise ConfigError(f"unknown strategy {strategy!r}")
        return PeftView(stack, "frozen", seed)
    if isinstance(strategy, PromptSet):
        view = PeftView(stack, "prompt", seed)
        if strategy.depth >= stack.config.layers:
            raise ConfigError(
                f"prompt depth {strategy.depth} must be < layers={stack.config.layers}"
            )
        if strategy.visual[0].shape[1] != stack.config.d_model:
            raise ConfigError("prompt width does not match the stack's d_model")
        view.prompts = strategy
        return view
    if isinstance(strategy, LoraSpec):
        view = PeftView(stack, "lora", seed)
        view._build_lora(strategy)
        return view
    if isinstance(strategy, AdapterSpec):
        view = PeftView(stack, "adapter", seed)
        view._build_adapters(strategy)
        return view
    raise ConfigError(f"unsupported strategy object {type(strategy).__name__}")


def strategy_from_descriptor(
    stack: EncoderStack, descriptor: dict, seed: int = 0
) -> PeftView:
    """Rebuild a PeftView from a checkpoint manifest descriptor."""
    kind = descriptor.get("kind")
    if kind == "frozen":
        return attach_strategy(stack, "frozen", seed)
    if kind == "prompt":
        prompts = init_prompts(stack.config, descriptor["depth"], descriptor["length"], seed)
        return attach_strategy(stack, prompts, seed)
    if kind == "lora":
        return attach_strategy(stack, LoraSpec(descriptor["rank"], descriptor["alpha"]), seed)
    if kind == "adapter":
        return attach_strategy(stack, AdapterSpec(descriptor["width"]), seed)
    raise ConfigError(f"unknown strategy descriptor {descriptor!r}")


def trainable_parameter_count(module: nn.Module) -> dict:
    """Exact counts by enumeration: {trainable, total, fraction}."""
    trainable = sum(p.numel() for p in module.parameters() if p.requires_grad)
    total = sum(p.numel() for p in module.parameters())
    return {
        "trainable": trainable,
        "total": total,
        "fraction": trainable / total if total else 0.0,
    }
