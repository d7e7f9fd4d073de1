"""PEFT strategies: init, identity-at-init, counting, gradient isolation."""

import numpy as np
import pytest
import torch

from ptmrec.encoder import EncoderConfig, EncoderStack
from ptmrec.errors import ConfigError
from ptmrec.peft import (
    AdapterSpec,
    LoraSpec,
    PromptSet,
    attach_strategy,
    init_prompts,
    strategy_from_descriptor,
    trainable_parameter_count,
)

DEFAULT = EncoderConfig()  # L=4, d_model=64, heads=4, d_proj=32, M=16


@pytest.fixture(scope="module")
def frozen_stack():
    return EncoderStack(DEFAULT, seed=0).freeze()


def sample_inputs(seed=0, batch=2):
    rng = np.random.default_rng(seed)
    patches = rng.normal(size=(batch, DEFAULT.patch_count, DEFAULT.d_patch)).astype(np.float32)
    tokens = [[int(t) for t in rng.integers(1, DEFAULT.vocab_size, size=7)] for _ in range(batch)]
    return patches, tokens


class TestInitPrompts:
    def test_default_config_parameter_count(self):
        prompts = init_prompts(DEFAULT, depth=2, length=4, seed=0)
        counted = sum(p.numel() for p in prompts.parameters())
        assert counted == 2 * 2 * 4 * 64 == 1024
        assert prompts.depth == 2 and prompts.length == 4

    def test_seed_determinism(self):
        a = init_prompts(DEFAULT, depth=2, length=4, seed=9)
        b = init_prompts(DEFAULT, depth=2, length=4, seed=9)
        c = init_prompts(DEFAULT, depth=2, length=4, seed=10)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert not all(torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_entries_match_declared_scale(self):
        prompts = init_prompts(DEFAULT, depth=3, length=32, seed=1)
        flat = torch.cat([p.flatten() for p in prompts.parameters()])
        # std 0.02: sample std over 12k draws lands well within 10%
        assert abs(flat.std().item() - 0.02) < 0.002
        assert abs(flat.mean().item()) < 0.002

    def test_zero_length_rejected(self):
        with pytest.raises(ConfigError, match="frozen strategy"):
            init_prompts(DEFAULT, depth=2, length=0)

    def test_depth_at_or_above_layers_rejected(self):
        with pytest.raises(ConfigError, match="depth"):
            init_prompts(DEFAULT, depth=4, length=4)
        with pytest.raises(ConfigError, match="depth"):
            init_prompts(DEFAULT, depth=0, length=4)


class TestAttachStrategy:
    def test_requires_frozen_stack(self):
        thawed = EncoderStack(DEFAULT, seed=0)
        with pytest.raises(ConfigError, match="frozen"):
            attach_strategy(thawed, "frozen")

    def test_two_strategies_rejected(self, frozen_stack):
        with pytest.raises(ConfigError, match="one strategy"):
            attach_strategy(frozen_stack, [LoraSpec(), AdapterSpec()])

    def test_unknown_strategy_rejected(self, frozen_stack):
        with pytest.raises(ConfigError, match="unknown"):
            attach_strategy(frozen_stack, "bitfit")

    def test_frozen_has_zero_trainables(self, frozen_stack):
        view = attach_strategy(frozen_stack, "frozen")
        assert trainable_parameter_count(view)["trainable"] == 0

    def test_lora_at_init_is_identity(self, frozen_stack):
        view = attach_strategy(frozen_stack, LoraSpec(rank=4, alpha=8.0))
        patches, tokens = sample_inputs()
        assert torch.equal(view.encode_image(patches), frozen_stack.encode_image(patches))
        assert torch.equal(view.encode_text(tokens), frozen_stack.encode_text(tokens))

    def test_adapter_at_init_is_identity(self, frozen_stack):
        view = attach_strategy(frozen_stack, AdapterSpec(width=16))
        patches, tokens = sample_inputs(seed=1)
        assert torch.equal(view.encode_image(patches), frozen_stack.encode_image(patches))
        assert torch.equal(view.encode_text(tokens), frozen_stack.encode_text(tokens))

    def test_trained_lora_changes_outputs(self, frozen_stack):
        view = attach_strategy(frozen_stack, LoraSpec(rank=2, alpha=4.0))
        with torch.no_grad():
            for name, p in view.named_parameters():
                if p.requires_grad and name.endswith(".b"):
                    p.normal_(0.0, 0.1)
        patches, _ = sample_inputs(seed=2)
        assert not torch.equal(view.encode_image(patches), frozen_stack.encode_image(patches))

    def test_prompt_view_matches_direct_prompt_call(self, frozen_stack):
        prompts = init_prompts(DEFAULT, depth=2, length=4, seed=3)
        view = attach_strategy(frozen_stack, prompts)
        patches, tokens = sample_inputs(seed=3)
        direct = frozen_stack.encode_image(patches, prompts=list(prompts.visual))
        assert torch.equal(view.encode_image(patches), direct)
        direct_t = frozen_stack.encode_text(tokens, prompts=list(prompts.textual))
        assert torch.equal(view.encode_text(tokens), direct_t)

    def test_descriptor_round_trip(self, frozen_stack):
        for strategy in ("frozen", init_prompts(DEFAULT, 2, 4, 0), LoraSpec(3, 6.0), AdapterSpec(8)):
            view = attach_strategy(frozen_stack, strategy, seed=5)
            desc = view.descriptor()
            rebuilt = strategy_from_descriptor(frozen_stack, desc, seed=5)
            assert rebuilt.descriptor() == desc
            counts = trainable_parameter_count(view)
            assert trainable_parameter_count(rebuilt) == counts


class TestParameterCounts:
    def test_prompt_fraction_below_two_percent(self, frozen_stack):
        view = attach_strategy(frozen_stack, init_prompts(DEFAULT, 2, 4, 0))
        counts = trainable_parameter_count(view)
        assert counts["trainable"] == 1024
        assert counts["fraction"] < 0.02

    def test_lora_closed_form(self, frozen_stack):
        view = attach_strategy(frozen_stack, LoraSpec(rank=4))
        counts = trainable_parameter_count(view)
        # 2 towers x 4 layers x 4 targets x (A: 4x64 + B: 64x4)
        assert counts["trainable"] == 2 * 4 * 4 * (2 * 4 * 64) == 16384

    def test_adapter_closed_form(self, frozen_stack):
        view = attach_strategy(frozen_stack, AdapterSpec(width=16))
        counts = trainable_parameter_count(view)
        # 8 adapters x (down 64x16+16, up 16x64+64)
        assert counts["trainable"] == 8 * (2 * 16 * 64 + 16 + 64) == 17024

    def test_default_ordering_prompt_lora_adapter(self, frozen_stack):
        sizes = {}
        for name, strategy in (
            ("prompt", init_prompts(DEFAULT, 2, 4, 0)),
            ("lora", LoraSpec()),
            ("adapter", AdapterSpec()),
        ):
            view = attach_strategy(frozen_stack, strategy)
            sizes[name] = trainable_parameter_count(view)["trainable"]
        assert sizes["prompt"] < sizes["lora"] < sizes["adapter"]

    def test_total_includes_frozen_base(self, frozen_stack):
        base = sum(p.numel() for p in frozen_stack.parameters())
        view = attach_strategy(frozen_stack, init_prompts(DEFAULT, 2, 4, 0))
        counts = trainable_parameter_count(view)
        assert counts["total"] == base + 1024


class TestGradientIsolation:
    @pytest.mark.parametrize("strategy", [
        init_prompts(DEFAULT, 2, 4, 0), LoraSpec(rank=2), AdapterSpec(width=4),
    ], ids=["prompt", "lora", "adapter"])
    def test_backward_touches_only_strategy_parameters(self, frozen_stack, strategy):
        view = attach_strategy(frozen_stack, strategy)
        patches, tokens = sample_inputs(seed=4)
        loss = view.encode_image(patches).square().sum() + view.encode_text(tokens).square().sum()
        loss.backward()
        for p in frozen_stack.parameters():
            assert p.grad is None
        grads = [p.grad for p in view.strategy_parameters()]
        assert all(g is not None for g in grads)
        # at least the directly-touched parameters carry signal
        assert any(g.abs().sum() > 0 for g in grads)


class TestPromptSetValidation:
    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ConfigError, match="disagree"):
            PromptSet([torch.zeros(2, 4)], [torch.zeros(3, 4)])

    def test_modality_count_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="per modality"):
            PromptSet([torch.zeros(2, 4)], [])

    def test_nonfinite_rejected(self):
        bad = torch.full((2, 4), float("nan"))
        with pytest.raises(ConfigError, match="finite"):
            PromptSet([bad], [torch.zeros(2, 4)])

    def test_width_mismatch_against_stack(self, frozen_stack):
        prompts = PromptSet([torch.zeros(2, 32)], [torch.zeros(2, 32)])
        with pytest.raises(ConfigError, match="d_model"):
            attach_strategy(frozen_stack, prompts)
