"""Optimization loop: Adam with linear warmup/decay and gradient clipping.

Pretraining samples batches of corpus contexts, assembles per-example
candidate sets extended with in-batch negatives, optionally noises the
inputs, and optimizes the summed linking + mention-detection loss.
Fine-tuning reuses the loop with per-mention alias-table candidates or a
full-vocabulary softmax. All randomness is derived from config seeds, so
identical configs produce bytewise-identical checkpoints and logs.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import model as M
from .aliastable import AliasTable
from .candidates import CandidateConfig, PageLinks, PhraseTable, assemble_candidates, batch_negatives
from .corpus import Context, TokenVocab
from .model import MentionTarget, ModelConfig, ModelParams, build_batch, save_checkpoint
from .noising import NoiseConfig, apply_noise
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

FINETUNE_MODES = ("alias_candidates", "all_entities")
SOFTMAX_MODES = ("candidates", "all_entities")


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last good checkpoint (if any) is retained."""

    def __init__(self, step: int, last_checkpoint: str | None):
        at = f"step {step}"
        where = last_checkpoint or "none"
        super().__init__(f"non-finite loss at {at}; last good checkpoint: {where}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    total_steps: int = 1000
    warmup_frac: float = 0.10
    batch_size: int = 32
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_entity_embeddings: bool = False
    link_weight: float = 1.0
    bio_weight: float = 1.0
    softmax_mode: str = "candidates"
    log_interval: int = 50
    checkpoint_interval: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in (0, 1)")
        if self.total_steps <= 0 or self.batch_size <= 0 or self.base_lr <= 0:
            raise ValueError("total_steps, batch_size, and base_lr must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.softmax_mode not in SOFTMAX_MODES:
            raise ValueError(f"softmax_mode must be one of {SOFTMAX_MODES}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


@dataclass
class LogRow:
    step: int
    lr: float
    loss: float
    linking_acc: float

    def tsv(self) -> str:
        return f"{self.step}\t{self.lr!r}\t{self.loss!r}\t{self.linking_acc!r}"


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear 0 -> base_lr over the warmup fraction, then linear to 0."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warmup = cfg.warmup_frac * cfg.total_steps
    if step <= warmup:
        return cfg.base_lr * step / warmup
    return cfg.base_lr * (cfg.total_steps - step) / (cfg.total_steps - warmup)


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients so the global L2 norm is at most clip_norm."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    sq = 0.0
    for g in grads.values():
        sq += float((g * g).sum())
    norm = np.sqrt(sq)
    if not np.isfinite(norm):
        raise ValueError("non-finite gradient norm")
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return grads


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> OptimizerState:
    """One bias-corrected Adam update in place; frozen groups are skipped."""
    state.step += 1
    t = state.step
    frozen = {"ent_emb"} if cfg.freeze_entity_embeddings else set()
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, tensor in params.items():
        if name in frozen:
            continue
        g = grads[name]
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        update = lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if not np.isfinite(update).all():
            raise ValueError(f"non-finite Adam update for parameter group {name!r}")
        tensor.data -= update
    return state


def _epoch_batches(n: int, batch_size: int, total_steps: int, rng) -> list[np.ndarray]:
    """Batch index lists covering total_steps, reshuffled each epoch."""
    batches = []
    while len(batches) < total_steps:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            batches.append(order[i : i + batch_size])
            if len(batches) == total_steps:
                break
    return batches


class _RunLogger:
    def __init__(self, out_dir: str | None):
        self.rows: list[LogRow] = []
        self.out_dir = out_dir
        self._fh = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self._fh = open(os.path.join(out_dir, "train_log.tsv"), "w", encoding="utf-8")
            self._fh.write("step\tlr\tloss\tlinking_acc\n")

    def log(self, row: LogRow):
        self.rows.append(row)
        log.info("step %d lr %.3g loss %.4f acc %.3f", row.step, row.lr, row.loss, row.linking_acc)
        if self._fh is not None:
            self._fh.write(row.tsv() + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def _run_loop(params, batches_fn, train_cfg, out_dir) -> tuple[ModelParams, list[LogRow]]:
    """Shared optimizer loop: forward, backward, clip, Adam, logs, checkpoints."""
    state = OptimizerState.for_params(params)
    logger = _RunLogger(out_dir)
    last_ckpt = None
    try:
        for step in range(1, train_cfg.total_steps + 1):
            batch = batches_fn(step)
            loss, metrics = M.total_loss(
                params, batch, train_cfg.link_weight, train_cfg.bio_weight
            )
            if not np.isfinite(loss.data):
                raise TrainingDiverged(step, last_ckpt)
            grads = M.backward(loss, params)
            clip_gradients(grads, train_cfg.clip_norm)
            lr = lr_schedule(step, train_cfg)
            adam_step(params, grads, state, lr, train_cfg)
            if step % train_cfg.log_interval == 0 or step == train_cfg.total_steps:
                acc = metrics.get("linking_acc", float("nan"))
                logger.log(LogRow(step=step, lr=lr, loss=float(loss.data), linking_acc=acc))
            if (
                out_dir is not None
                and train_cfg.checkpoint_interval > 0
                and step % train_cfg.checkpoint_interval == 0
            ):
                last_ckpt = os.path.join(out_dir, f"ckpt_step{step}.elck")
                save_checkpoint(last_ckpt, params)
    finally:
        logger.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint.elck"), params)
    return params, logger.rows


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def pretrain(
    contexts: list[Context],
    vocab: TokenVocab,
    n_entities: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    cand_cfg: CandidateConfig,
    noise_cfg: NoiseConfig,
    page_links: PageLinks | None = None,
    phrase_table: PhraseTable | None = None,
    params: ModelParams | None = None,
    out_dir: str | None = None,
) -> tuple[ModelParams, list[LogRow]]:
    """Train from scratch on corpus contexts with sampled-softmax candidates.

    Each step: sample a batch, assemble per-example candidates, extend with
    in-batch negatives, noise the inputs, and take one clipped Adam step on
    the summed linking + detection loss.
    """
    if not contexts:
        raise ValueError("pretraining corpus is empty")
    if params is None:
        params = ModelParams.initialize(model_cfg, derive_seed(train_cfg.rng_seed, "init"))
    batch_rng = derive_rng(train_cfg.rng_seed, "batch-order")
    batches = _epoch_batches(len(contexts), train_cfg.batch_size, train_cfg.total_steps, batch_rng)
    full_softmax = train_cfg.softmax_mode == "all_entities"

    def make_batch(step: int) -> M.ModelBatch:
        idxs = batches[step - 1]
        batch_ctx = [contexts[i] for i in idxs]
        noise_rng = derive_rng(noise_cfg.rng_seed, "noise", step)
        tokens_override = None
        if noise_cfg.enabled:
            tokens_override = [
                apply_noise(c.tokens, noise_cfg, vocab, noise_rng)[0] for c in batch_ctx
            ]
        if full_softmax:
            targets = [
                [
                    MentionTarget(span=l.span, gold=l.entity)
                    for l in c.labels
                    if l.entity is not None
                ]
                for c in batch_ctx
            ]
            return build_batch(batch_ctx, vocab.pad_index, targets, None, tokens_override)

        cand_rng = derive_rng(cand_cfg.rng_seed, "candidates", step)
        sets = [
            assemble_candidates(
                c.labels,
                [l.surface for l in c.labels],
                c.doc_id,
                cand_cfg,
                page_links,
                phrase_table,
                n_entities,
                cand_rng,
            )
            for c in batch_ctx
        ]
        sets = batch_negatives(sets)
        union = np.asarray(sets[0].entities if sets else [], dtype=np.int64)
        targets = []
        for c, cs in zip(batch_ctx, sets):
            targets.append(
                [
                    MentionTarget(span=l.span, gold=pos)
                    for l, pos in zip(c.labels, cs.gold_positions)
                    if pos is not None
                ]
            )
        return build_batch(batch_ctx, vocab.pad_index, targets, union, tokens_override)

    return _run_loop(params, make_batch, train_cfg, out_dir)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneReport:
    skipped_mentions: int = 0


def finetune(
    params: ModelParams,
    contexts: list[Context],
    mode: str,
    vocab: TokenVocab,
    train_cfg: TrainConfig,
    alias_table: AliasTable | None = None,
    out_dir: str | None = None,
) -> tuple[ModelParams, list[LogRow], FinetuneReport]:
    """Continue training on a labeled dataset.

    mode "alias_candidates": each mention's softmax runs over the alias
    table lookup of its surface; mentions whose gold is absent from the
    lookup are skipped and counted. mode "all_entities": the softmax spans
    the whole entity vocabulary and no table is needed.
    """
    if mode not in FINETUNE_MODES:
        raise ValueError(f"mode must be one of {FINETUNE_MODES}")
    if mode == "alias_candidates" and alias_table is None:
        raise ValueError("alias_candidates mode requires an alias table")
    if not contexts:
        raise ValueError("fine-tuning dataset is empty")

    report = FinetuneReport()
    prepared: list[list[MentionTarget]] = []
    for c in contexts:
        targets = []
        for l in c.labels:
            if l.entity is None:
                continue
            if mode == "all_entities":
                targets.append(MentionTarget(span=l.span, gold=l.entity))
                continue
            cands = alias_table.lookup(l.surface or "")
            if l.entity not in cands:
                report.skipped_mentions += 1
                continue
            targets.append(
                MentionTarget(
                    span=l.span,
                    gold=cands.index(l.entity),
                    candidates=np.asarray(cands, dtype=np.int64),
                )
            )
        prepared.append(targets)
    if report.skipped_mentions:
        log.warning(
            "finetune: skipped %d mentions whose gold is missing from alias candidates",
            report.skipped_mentions,
        )

    batch_rng = derive_rng(train_cfg.rng_seed, "batch-order")
    batches = _epoch_batches(len(contexts), train_cfg.batch_size, train_cfg.total_steps, batch_rng)

    def make_batch(step: int) -> M.ModelBatch:
        idxs = batches[step - 1]
        return build_batch(
            [contexts[i] for i in idxs],
            vocab.pad_index,
            [prepared[i] for i in idxs],
        )

    params, rows = _run_loop(params, make_batch, train_cfg, out_dir)
    return params, rows, report
