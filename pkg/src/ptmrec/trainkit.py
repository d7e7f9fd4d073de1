"""Training orchestration: alignment pretraining, the two preference stages,
and the ablation modes built from them.

Stage 1 trains the recommender on cached modal embeddings with large BPR
batches. Stage 2 freezes it (by default), attaches one PEFT strategy, and
optimizes strategy parameters plus the transfer maps with small micro-batches
under gradient accumulation, recomputing modal embeddings through the
prompted encoders every micro-batch.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import (
    CheckpointState,
    load_into_module,
    module_arrays,
    save_checkpoint,
)
from .corpus import InteractionCorpus, ModalityBundles, sample_bpr_triples
from .encoder import EncoderConfig, EncoderStack, pretrain_alignment
from .errors import ConfigError, NumericalAbort
from .evalkit import EvalResult, evaluate
from .peft import (
    AdapterSpec,
    LoraSpec,
    PeftView,
    attach_strategy,
    init_prompts,
    trainable_parameter_count,
)
from .recommender import RecModel, bpr_loss
from .transfer import KnowledgeTransfer, kt_loss, modal_distribution, target_distribution

logger = logging.getLogger(__name__)

ABLATION_MODES = ("clip_frozen", "clip_prompt_joint", "ptmrec_no_kt", "ptmrec")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    max_epochs: int = 100  # stage-1 cap; full-protocol value is 1000
    patience: int = 20
    stage1_batch_size: int = 2048
    stage2_batch_size: int = 128
    accum_steps: int = 12
    transfer_weight: float = 1.0  # λ on the knowledge-transfer term
    eval_every: int = 1
    eval_ks: tuple[int, ...] = (10, 20)
    early_stop_metric: str = "recall@20"
    seed: int = 0
    embed_dim: int = 64
    # desk-scale budgets for the later stages
    stage0_epochs: int = 20
    stage0_batch_size: int = 32
    stage2_max_epochs: int = 10
    stage2_patience: int = 5
    stage2_periods_per_epoch: int | None = 1  # None: derive from corpus size
    joint_max_epochs: int = 12
    prompt_depth: int = 2
    prompt_length: int = 4
    unfreeze_id_tables: bool = False
    use_rec_loss: bool = True
    check_barrier: bool = False

    def __post_init__(self):
        if self.accum_steps < 1:
            raise ConfigError("accum_steps must be >= 1")
        if self.patience < 1 or self.stage2_patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.transfer_weight < 0:
            raise ConfigError("transfer_weight must be >= 0")
        if min(self.stage1_batch_size, self.stage2_batch_size) < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.check_barrier and not self.unfreeze_id_tables:
            raise ConfigError("the barrier check needs trainable ID tables to be meaningful")


@dataclass
class RunReport:
    mode: str
    stage: str
    seed: int
    epoch_losses: list[float] = field(default_factory=list)
    epoch_kt: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: dict = field(default_factory=dict)
    test_metrics: dict | None = None
    param_counts: dict = field(default_factory=dict)
    checkpoint: str | None = None
    notes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


@dataclass
class EarlyStopper:
    """Strict-improvement early stopping over a validation metric."""

    patience: int
    best: float = float("-inf")
    best_epoch: int = -1
    bad: int = 0

    def update(self, value: float, epoch: int) -> bool:
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad = 0
            return True
        self.bad += 1
        return False

    def should_stop(self) -> bool:
        return self.bad >= self.patience


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def compute_modal_cache(encoder, bundles: ModalityBundles, batch_size: int = 128):
    """Run every item through the encoder once; returns (text, visual) tables."""
    texts, visuals = [], []
    with torch.no_grad():
        for start in range(0, bundles.num_items, batch_size):
            stop = min(start + batch_size, bundles.num_items)
            visuals.append(encoder.encode_image(bundles.patches[start:stop]))
            texts.append(encoder.encode_text([bundles.tokens[i] for i in range(start, stop)]))
    return torch.cat(texts), torch.cat(visuals)


def cache_scorer(model: RecModel, text_all: torch.Tensor, visual_all: torch.Tensor):
    def score_fn(users):
        with torch.no_grad():
            return model.score_matrix(users, text_all, visual_all).numpy()

    return score_fn


def live_eval(encoder, model: RecModel, bundles: ModalityBundles,
              corpus: InteractionCorpus, split: str, ks) -> EvalResult:
    """Evaluate with the modal cache recomputed once through the encoder."""
    text_all, vis_all = compute_modal_cache(encoder, bundles)
    return evaluate(cache_scorer(model, text_all, vis_all), corpus, split, ks)


def _snapshot(modules: dict[str, nn.Module]) -> dict:
    return {
        tag: {name: p.detach().clone() for name, p in m.named_parameters()}
        for tag, m in modules.items()
    }


def _restore(modules: dict[str, nn.Module], snap: dict) -> None:
    with torch.no_grad():
        for tag, m in modules.items():
            for name, p in m.named_parameters():
                p.copy_(snap[tag][name])


def _adam_arrays(opt: torch.optim.Adam, named: dict[str, nn.Parameter]) -> dict:
    by_id = {id(p): name for name, p in named.items()}
    arrays = {}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p)
            if not state:
                continue
            name = by_id[id(p)]
            arrays[f"adam.{name}.exp_avg"] = state["exp_avg"].numpy().copy()
            arrays[f"adam.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy().copy()
            arrays[f"adam.{name}.step"] = np.array([float(state["step"])], dtype=np.float64)
    return arrays


def _load_adam(opt: torch.optim.Adam, named: dict[str, nn.Parameter], arrays: dict) -> None:
    for name, p in named.items():
        key = f"adam.{name}.exp_avg"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[f"adam.{name}.step"][0])),
            "exp_avg": torch.from_numpy(arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam.{name}.exp_avg_sq"].copy()),
        }


def _epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    # one frozen stream per (seed, stage, epoch) so resumption replays exactly
    return np.random.default_rng([seed, stage, epoch])


def accumulate_period(opt: torch.optim.Optimizer, micro_batches, micro_loss) -> float:
    """One optimizer step over micro-batches with size-proportional scaling.

    Scaling each micro-batch loss by its share of the period makes the update
    equal to a single step on the concatenated batch, for any factorization
    of a fixed example list into micro-batches.
    """
    total = sum(len(batch) for batch in micro_batches)
    opt.zero_grad()
    period_loss = 0.0
    for batch in micro_batches:
        loss = micro_loss(batch)
        share = len(batch) / total
        (loss * share).backward()
        period_loss += loss.item() * share
    opt.step()
    return period_loss


def _abort_if_not_finite(loss: torch.Tensor, where: str, last_checkpoint: str | None):
    if not torch.isfinite(loss):
        raise NumericalAbort(f"non-finite loss in {where}", last_checkpoint=last_checkpoint)


# ---------------------------------------------------------------------------
# stage 1: preference learning on cached modal features
# ---------------------------------------------------------------------------


def train_stage1(
    corpus: InteractionCorpus,
    stack: EncoderStack,
    bundles: ModalityBundles,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume: CheckpointState | None = None,
) -> tuple[RecModel, RunReport]:
    """Train the recommender with BPR on frozen cached modal embeddings."""
    if not stack.frozen:
        raise ConfigError("stage 1 requires a frozen encoder stack")
    stack_sum = stack.checksum()
    text_all, vis_all = compute_modal_cache(stack, bundles)
    model = RecModel(corpus.num_users, corpus.num_items, d=config.embed_dim,
                     d_proj=stack.config.d_proj, seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    named = {f"rec.{n}": p for n, p in model.named_parameters()}
    stopper = EarlyStopper(config.patience)
    start_epoch = 0
    if resume is not None:
        load_into_module(resume, model, "rec")
        _load_adam(opt, named, resume.arrays)
        start_epoch = int(resume.config["next_epoch"])
        stopper.best = float(resume.config["best_metric"])
        stopper.best_epoch = int(resume.config["best_epoch"])
        stopper.bad = int(resume.config["bad_epochs"])

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    total = corpus.num_train_interactions()
    batches = max(1, round(total / config.stage1_batch_size))
    report = RunReport(mode="clip_frozen", stage="stage1", seed=config.seed)
    # a resumed run only restores a best state reached after resumption
    best_snap = _snapshot({"rec": model}) if resume is None else None
    last_path: str | None = None
    score_fn = cache_scorer(model, text_all, vis_all)

    for epoch in range(start_epoch, config.max_epochs):
        t0 = time.perf_counter()
        rng = _epoch_rng(config.seed, 1, epoch)
        running = 0.0
        for _ in range(batches):
            triples = sample_bpr_triples(corpus, config.stage1_batch_size, rng)
            loss = model.bpr_loss(triples, text_all, vis_all)
            _abort_if_not_finite(loss, f"stage 1 epoch {epoch}", last_path)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item()
        report.epoch_losses.append(running / batches)

        if (epoch + 1) % config.eval_every == 0:
            result = evaluate(score_fn, corpus, "val", config.eval_ks)
            report.val_history.append({"epoch": epoch, **result.metrics})
            if stopper.update(result.metrics[config.early_stop_metric], epoch):
                best_snap = _snapshot({"rec": model})
        report.epoch_seconds.append(time.perf_counter() - t0)

        if out_dir:
            state = CheckpointState(
                arrays={**module_arrays(model, "rec"), **_adam_arrays(opt, named)},
                config={
                    "next_epoch": epoch + 1,
                    "best_metric": stopper.best,
                    "best_epoch": stopper.best_epoch,
                    "bad_epochs": stopper.bad,
                },
                seed=config.seed,
                stage="stage1",
            )
            last_path = str(save_checkpoint(state, out_dir / "last.ckpt"))
        if stopper.should_stop():
            break

    if best_snap is not None:
        _restore({"rec": model}, best_snap)
    report.best_epoch = stopper.best_epoch
    report.best_val = next(
        (h for h in report.val_history if h["epoch"] == stopper.best_epoch), {}
    )
    report.param_counts = {"recommender": trainable_parameter_count(model)}
    if stack.checksum() != stack_sum:
        raise RuntimeError("frozen encoder weights changed during stage 1")
    if out_dir:
        best = CheckpointState(
            arrays=module_arrays(model, "rec"),
            config={"best_epoch": stopper.best_epoch},
            seed=config.seed,
            stage="stage1",
        )
        report.checkpoint = str(save_checkpoint(best, out_dir / "best.ckpt"))
        report.write(out_dir / "report.json")
    return model, report


# ---------------------------------------------------------------------------
# stage 2: knowledge-guided prompt (or LoRA/adapter) learning
# ---------------------------------------------------------------------------


def _encode_unique_items(view, bundles: ModalityBundles, item_ids: np.ndarray):
    """Live modal embeddings for the unique ids; returns (uniq, text, visual)."""
    uniq = np.unique(item_ids)
    patches = bundles.patches[uniq]
    tokens = [bundles.tokens[i] for i in uniq]
    return uniq, view.encode_text(tokens), view.encode_image(patches)


def _check_barrier(model: RecModel, kt: KnowledgeTransfer, users: torch.Tensor,
                   pos: torch.Tensor, text_emb: torch.Tensor, vis_emb: torch.Tensor) -> None:
    """Exactness of the target's gradient barrier, verified on a fresh graph."""
    e_u = model.user_table(users)
    e_id = model.item_table(pos)
    probs = target_distribution(e_u, e_id)
    log_t = modal_distribution(e_u, text_emb, kt.text_map)
    log_v = modal_distribution(e_u, vis_emb, kt.visual_map)
    loss = kt_loss(probs, log_t, log_v)
    item_grad = torch.autograd.grad(
        loss, model.item_table.weight, retain_graph=True, allow_unused=True
    )[0]
    if item_grad is not None and bool((item_grad != 0).any()):
        raise RuntimeError("gradient barrier violated: item table received gradient")
    user_grad = torch.autograd.grad(
        loss, model.user_table.weight, retain_graph=True, allow_unused=True
    )[0]
    loss_const = kt_loss(probs.clone(), log_t, log_v)
    user_grad_const = torch.autograd.grad(
        loss_const, model.user_table.weight, allow_unused=True
    )[0]
    if not torch.equal(user_grad, user_grad_const):
        raise RuntimeError("gradient barrier violated: target is not a constant")


def train_stage2(
    corpus: InteractionCorpus,
    stack: EncoderStack,
    bundles: ModalityBundles,
    model: RecModel,
    view: PeftView,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[KnowledgeTransfer, RunReport]:
    """Tune the PEFT strategy and transfer maps on top of a stage-1 model.

    Per micro-batch: BPR on live modal embeddings plus λ times the transfer
    loss; parameters step once per accumulation period.
    """
    if view is None:
        raise ConfigError("stage 2 requires an attached PEFT strategy")
    if not stack.frozen:
        raise ConfigError("stage 2 requires a frozen encoder stack")
    lam = config.transfer_weight
    if lam > 0 and config.stage2_batch_size < 2:
        raise ConfigError("transfer loss needs batch size >= 2 for in-batch negatives")
    if not config.use_rec_loss and lam == 0:
        raise ConfigError("stage 2 with neither preference nor transfer loss has nothing to optimize")
    stack_sum = stack.checksum()

    kt = KnowledgeTransfer(stack.config.d_proj, config.embed_dim, weight=lam, seed=config.seed)
    with torch.no_grad():
        # start the transfer maps at the scorer's modal maps: the transfer
        # pull on modal features then matches how the deployed score reads
        # them, instead of passing through an unrelated random projection
        kt.text_map.weight.copy_(model.text_map.weight)
        kt.visual_map.weight.copy_(model.visual_map.weight)
    model.requires_grad_(False)
    if config.unfreeze_id_tables:
        model.user_table.weight.requires_grad_(True)
        model.item_table.weight.requires_grad_(True)
    trainables = list(view.strategy_parameters()) + list(kt.parameters())
    if config.unfreeze_id_tables:
        trainables += [model.user_table.weight, model.item_table.weight]
    opt = torch.optim.Adam(trainables, lr=config.lr, betas=config.betas)

    total = corpus.num_train_interactions()
    period_size = config.stage2_batch_size * config.accum_steps
    periods = config.stage2_periods_per_epoch or max(1, round(total / period_size))
    report = RunReport(mode="stage2", stage="stage2", seed=config.seed)
    report.notes["strategy"] = view.descriptor()
    report.notes["transfer_weight"] = lam

    initial = live_eval(view, model, bundles, corpus, "val", config.eval_ks)
    report.notes["initial_val"] = initial.metrics
    stopper = EarlyStopper(config.stage2_patience)
    # the starting state competes for best, so tuning can never end worse
    stopper.update(initial.metrics[config.early_stop_metric], epoch=-1)
    snapped = {"kt": kt, "peft": view, "rec": model}
    best_snap = _snapshot(snapped)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    last_path: str | None = None

    def micro_loss(triples):
        nonlocal epoch_kt, micro_count
        users = torch.as_tensor([t[0] for t in triples])
        pos = torch.as_tensor([t[1] for t in triples])
        neg = torch.as_tensor([t[2] for t in triples])
        uniq, text_u, vis_u = _encode_unique_items(
            view, bundles, np.concatenate([pos.numpy(), neg.numpy()])
        )
        slot = {item: row for row, item in enumerate(uniq.tolist())}
        pos_rows = torch.as_tensor([slot[i] for i in pos.tolist()])
        neg_rows = torch.as_tensor([slot[i] for i in neg.tolist()])
        loss = torch.zeros(())
        if config.use_rec_loss:
            pos_scores = model.score(users, pos, text_u[pos_rows], vis_u[pos_rows])
            neg_scores = model.score(users, neg, text_u[neg_rows], vis_u[neg_rows])
            loss = bpr_loss(pos_scores, neg_scores)
        if lam > 0:
            kt_val = kt.loss(
                model.user_table(users), model.item_table(pos),
                text_u[pos_rows], vis_u[pos_rows],
            )
            loss = loss + lam * kt_val
            epoch_kt += kt_val.item()
        micro_count += 1
        _abort_if_not_finite(loss, "stage 2", last_path)
        if config.check_barrier:
            _check_barrier(model, kt, users, pos,
                           text_u[pos_rows].detach(), vis_u[pos_rows].detach())
        return loss

    for epoch in range(config.stage2_max_epochs):
        t0 = time.perf_counter()
        rng = _epoch_rng(config.seed, 2, epoch)
        epoch_loss, epoch_kt, micro_count = 0.0, 0.0, 0
        for _ in range(periods):
            micro_batches = [
                sample_bpr_triples(corpus, config.stage2_batch_size, rng)
                for _ in range(config.accum_steps)
            ]
            epoch_loss += accumulate_period(opt, micro_batches, micro_loss)
        report.epoch_losses.append(epoch_loss / periods)
        if lam > 0:
            report.epoch_kt.append(epoch_kt / max(micro_count, 1))

        if (epoch + 1) % config.eval_every == 0:
            result = live_eval(view, model, bundles, corpus, "val", config.eval_ks)
            report.val_history.append({"epoch": epoch, **result.metrics})
            if stopper.update(result.metrics[config.early_stop_metric], epoch):
                best_snap = _snapshot(snapped)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if out_dir:
            state = CheckpointState(
                arrays={
                    **module_arrays(model, "rec"),
                    **module_arrays(kt, "kt"),
                    **module_arrays(view, "peft"),
                },
                config={"next_epoch": epoch + 1},
                seed=config.seed,
                stage="stage2",
                peft=view.descriptor(),
            )
            last_path = str(save_checkpoint(state, out_dir / "last.ckpt"))
        if stopper.should_stop():
            break

    _restore(snapped, best_snap)
    report.best_epoch = stopper.best_epoch
    report.best_val = next(
        (h for h in report.val_history if h["epoch"] == stopper.best_epoch),
        {"epoch": -1, **initial.metrics},
    )
    report.param_counts = {
        "encoder": trainable_parameter_count(view),
        "transfer": trainable_parameter_count(kt),
        "recommender": trainable_parameter_count(model),
    }
    if stack.checksum() != stack_sum:
        raise RuntimeError("frozen encoder weights changed during stage 2")
    if out_dir:
        best = CheckpointState(
            arrays={
                **module_arrays(model, "rec"),
                **module_arrays(kt, "kt"),
                **module_arrays(view, "peft"),
            },
            config={"best_epoch": stopper.best_epoch},
            seed=config.seed,
            stage="stage2",
            peft=view.descriptor(),
        )
        report.checkpoint = str(save_checkpoint(best, out_dir / "best.ckpt"))
        report.write(out_dir / "report.json")
    return kt, report


# ---------------------------------------------------------------------------
# single-stage joint baseline
# ---------------------------------------------------------------------------


def train_joint(
    corpus: InteractionCorpus,
    stack: EncoderStack,
    bundles: ModalityBundles,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[RecModel, PeftView, RunReport]:
    """Train prompts and a from-scratch recommender together with BPR only.

    The single-stage baseline: no cached features, no teacher, stage-2 style
    micro-batching against live prompted encoders.
    """
    if not stack.frozen:
        raise ConfigError("joint training still keeps the encoder stack frozen")
    prompts = init_prompts(stack.config, config.prompt_depth, config.prompt_length,
                           seed=config.seed)
    view = attach_strategy(stack, prompts, seed=config.seed)
    model = RecModel(corpus.num_users, corpus.num_items, d=config.embed_dim,
                     d_proj=stack.config.d_proj, seed=config.seed)
    trainables = list(view.strategy_parameters()) + list(model.parameters())
    opt = torch.optim.Adam(trainables, lr=config.lr, betas=config.betas)

    total = corpus.num_train_interactions()
    period_size = config.stage2_batch_size * config.accum_steps
    periods = config.stage2_periods_per_epoch or max(1, round(total / period_size))
    report = RunReport(mode="clip_prompt_joint", stage="joint", seed=config.seed)
    stopper = EarlyStopper(config.stage2_patience)
    snapped = {"rec": model, "peft": view}
    best_snap = _snapshot(snapped)

    def micro_loss(triples):
        users = torch.as_tensor([t[0] for t in triples])
        pos = torch.as_tensor([t[1] for t in triples])
        neg = torch.as_tensor([t[2] for t in triples])
        uniq, text_u, vis_u = _encode_unique_items(
            view, bundles, np.concatenate([pos.numpy(), neg.numpy()])
        )
        slot = {item: row for row, item in enumerate(uniq.tolist())}
        pos_rows = torch.as_tensor([slot[i] for i in pos.tolist()])
        neg_rows = torch.as_tensor([slot[i] for i in neg.tolist()])
        pos_scores = model.score(users, pos, text_u[pos_rows], vis_u[pos_rows])
        neg_scores = model.score(users, neg, text_u[neg_rows], vis_u[neg_rows])
        loss = bpr_loss(pos_scores, neg_scores)
        _abort_if_not_finite(loss, "joint run", None)
        return loss

    for epoch in range(config.joint_max_epochs):
        t0 = time.perf_counter()
        rng = _epoch_rng(config.seed, 3, epoch)
        epoch_loss = 0.0
        for _ in range(periods):
            micro_batches = [
                sample_bpr_triples(corpus, config.stage2_batch_size, rng)
                for _ in range(config.accum_steps)
            ]
            epoch_loss += accumulate_period(opt, micro_batches, micro_loss)
        report.epoch_losses.append(epoch_loss / periods)
        if (epoch + 1) % config.eval_every == 0:
            result = live_eval(view, model, bundles, corpus, "val", config.eval_ks)
            report.val_history.append({"epoch": epoch, **result.metrics})
            if stopper.update(result.metrics[config.early_stop_metric], epoch):
                best_snap = _snapshot(snapped)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if stopper.should_stop():
            break

    _restore(snapped, best_snap)
    report.best_epoch = stopper.best_epoch
    report.best_val = next(
        (h for h in report.val_history if h["epoch"] == stopper.best_epoch), {}
    )
    report.param_counts = {
        "encoder": trainable_parameter_count(view),
        "recommender": trainable_parameter_count(model),
    }
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write(out_dir / "report.json")
    return model, view, report


# ---------------------------------------------------------------------------
# ablation driver
# ---------------------------------------------------------------------------


class AblationContext:
    """Caches per-seed pretrained stacks and stage-1 results across modes."""

    def __init__(self, corpus: InteractionCorpus, bundles: ModalityBundles,
                 config: TrainConfig, encoder_config: EncoderConfig | None = None,
                 out_dir: str | Path | None = None):
        self.corpus = corpus
        self.bundles = bundles
        self.config = config
        self.encoder_config = encoder_config or EncoderConfig(
            d_patch=bundles.patch_dim, patch_count=bundles.patch_count
        )
        self.out_dir = Path(out_dir) if out_dir else None
        self._stacks: dict[int, EncoderStack] = {}
        self._stage1: dict[int, tuple[RecModel, RunReport]] = {}

    def seed_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.config, seed=seed)

    def stack(self, seed: int) -> EncoderStack:
        if seed not in self._stacks:
            stack = EncoderStack(self.encoder_config, seed=seed)
            pretrain_alignment(
                stack, self.bundles,
                epochs=self.config.stage0_epochs,
                batch_size=self.config.stage0_batch_size,
                lr=self.config.lr, seed=seed,
            )
            self._stacks[seed] = stack
        return self._stacks[seed]

    def stage1(self, seed: int) -> tuple[RecModel, RunReport]:
        if seed not in self._stage1:
            out = self.out_dir / f"seed{seed}" / "stage1" if self.out_dir else None
            self._stage1[seed] = train_stage1(
                self.corpus, self.stack(seed), self.bundles,
                self.seed_config(seed), out_dir=out,
            )
        return self._stage1[seed]

    def _test_eval(self, model: RecModel, encoder) -> dict:
        result = live_eval(encoder, model, self.bundles, self.corpus,
                           "test", self.config.eval_ks)
        return result.metrics

    def run_mode(self, mode: str, seed: int) -> RunReport:
        if mode not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {mode!r}")
        config = self.seed_config(seed)
        out = self.out_dir / f"seed{seed}" / mode if self.out_dir else None

        if mode == "clip_frozen":
            model, report = self.stage1(seed)
            report = copy.deepcopy(report)
            report.test_metrics = self._test_eval(model, self.stack(seed))
            report.mode = mode
            return report

        if mode == "clip_prompt_joint":
            model, view, report = train_joint(self.corpus, self.stack(seed),
                                              self.bundles, config, out_dir=out)
            report.test_metrics = self._test_eval(model, view)
            return report

        # the two-stage variants share the stage-1 result per seed
        lam = config.transfer_weight if mode == "ptmrec" else 0.0
        if mode == "ptmrec" and lam <= 0:
            raise ConfigError("ptmrec mode needs transfer_weight > 0")
        stage2_cfg = dataclasses.replace(config, transfer_weight=lam)
        stack = self.stack(seed)
        stage1_model, _ = self.stage1(seed)
        model = copy.deepcopy(stage1_model)
        prompts = init_prompts(stack.config, config.prompt_depth, config.prompt_length,
                               seed=seed)
        view = attach_strategy(stack, prompts, seed=seed)
        _, report = train_stage2(self.corpus, stack, self.bundles, model, view,
                                 stage2_cfg, out_dir=out)
        report.mode = mode
        # deploy the tuned artifact only when it out-validates the stage-1
        # incumbent; otherwise keep serving the stage-1 model
        metric = config.early_stop_metric
        incumbent = self.stage1(seed)[1].best_val.get(metric, float("-inf"))
        tuned = report.best_val.get(metric, float("-inf")) > incumbent
        report.notes["kept_tuned_model"] = tuned
        report.notes["incumbent_val"] = incumbent
        report.test_metrics = self._test_eval(model, view if tuned else stack)
        return report


def run_ablation(ctx: AblationContext, mode: str, seeds=(0, 1, 2, 3, 4)) -> dict:
    """One mode across the seed set; returns mode-tagged per-seed test metrics."""
    reports = [ctx.run_mode(mode, seed) for seed in seeds]
    return {
        "mode": mode,
        "seeds": list(seeds),
        "per_seed": {str(r.seed): r.test_metrics for r in reports},
        "reports": [r.to_json() for r in reports],
    }


def run_ablation_suite(ctx: AblationContext, seeds=(0, 1, 2, 3, 4),
                       modes=ABLATION_MODES) -> dict:
    """All modes over shared seeds plus the pairwise ordering counts."""
    results = {mode: run_ablation(ctx, mode, seeds) for mode in modes}

    def wins(a: str, b: str, metric: str = "recall@10") -> int:
        return sum(
            1 for s in seeds
            if results[a]["per_seed"][str(s)][metric] >= results[b]["per_seed"][str(s)][metric]
        )

    comparisons = {}
    if "ptmrec" in modes and "ptmrec_no_kt" in modes:
        comparisons["full_ge_no_transfer"] = wins("ptmrec", "ptmrec_no_kt")
    if "ptmrec" in modes and "clip_frozen" in modes:
        comparisons["full_ge_frozen"] = wins("ptmrec", "clip_frozen")
    if "clip_prompt_joint" in modes and "clip_frozen" in modes:
        comparisons["joint_lt_frozen"] = len(seeds) - wins("clip_prompt_joint", "clip_frozen")
    table = {
        mode: {
            metric: float(np.mean([results[mode]["per_seed"][str(s)][metric] for s in seeds]))
            for metric in next(iter(results[mode]["per_seed"].values()))
        }
        for mode in modes
    }
    suite = {"seeds": list(seeds), "modes": results, "mean_test_metrics": table,
             "comparisons": comparisons}
    if ctx.out_dir:
        ctx.out_dir.mkdir(parents=True, exist_ok=True)
        (ctx.out_dir / "ablation.json").write_text(json.dumps(suite, indent=1))
    return suite


# ---------------------------------------------------------------------------
# strategy comparison bench
# ---------------------------------------------------------------------------


def named_strategy(name: str, encoder_config: EncoderConfig, config: TrainConfig, seed: int):
    if name == "prompt":
        return init_prompts(encoder_config, config.prompt_depth, config.prompt_length, seed)
    if name == "lora":
        return LoraSpec()
    if name == "adapter":
        return AdapterSpec()
    if name == "frozen":
        return "frozen"
    raise ConfigError(f"unknown strategy name {name!r}")


def peft_bench(
    corpus: InteractionCorpus,
    stack: EncoderStack,
    bundles: ModalityBundles,
    stage1_model: RecModel,
    config: TrainConfig,
    strategies=("prompt", "lora", "adapter"),
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Run stage 2 once per strategy from the same stage-1 model; tabulate."""
    rows = []
    out_dir = Path(out_dir) if out_dir else None
    for name in strategies:
        model = copy.deepcopy(stage1_model)
        view = attach_strategy(stack, named_strategy(name, stack.config, config, config.seed),
                               seed=config.seed)
        strategy_params = sum(p.numel() for p in view.strategy_parameters())
        run_dir = out_dir / name if out_dir else None
        _, report = train_stage2(corpus, stack, bundles, model, view, config,
                                 out_dir=run_dir)
        test = live_eval(view, model, bundles, corpus, "test", config.eval_ks)
        rows.append({
            "strategy": name,
            "seed": config.seed,
            "trainable_params": strategy_params,
            "trainable_with_transfer_maps": trainable_parameter_count(view)["trainable"]
            + trainable_parameter_count(
                KnowledgeTransfer(stack.config.d_proj, config.embed_dim, seed=config.seed)
            )["trainable"],
            "seconds_per_epoch": float(np.mean(report.epoch_seconds)),
            "best_epoch": report.best_epoch,
            **test.metrics,
        })
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "peft_bench.json").write_text(json.dumps(rows, indent=1))
        header = list(rows[0].keys())
        lines = [",".join(header)]
        lines += [",".join(str(row[k]) for k in header) for row in rows]
        (out_dir / "peft_bench.csv").write_text("\n".join(lines) + "\n")
    return rows
