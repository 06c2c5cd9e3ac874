"""Schedule, clipping, Adam, and the pretrain/finetune loops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import all_entity_accuracy, make_world

from elink.aliastable import AliasTable
from elink.candidates import CandidateConfig
from elink.model import ModelConfig, ModelParams, load_checkpoint
from elink.noising import NoiseConfig
from elink.training import (
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    clip_gradients,
    finetune,
    lr_schedule,
    pretrain,
)

SMALL_MODEL = dict(d_model=16, n_layers=1, n_heads=2, d_ff=32, d_entity=16, max_len=32)


# ---------------------------------------------------------------------------
# lr schedule
# ---------------------------------------------------------------------------


def test_warmup_midpoint():
    cfg = TrainConfig(base_lr=2.0, total_steps=1000)
    assert lr_schedule(50, cfg) == pytest.approx(1.0)


def test_peak_at_warmup_boundary():
    cfg = TrainConfig(base_lr=2.0, total_steps=1000)
    assert lr_schedule(100, cfg) == pytest.approx(2.0)


def test_linear_decay_midpoint():
    cfg = TrainConfig(base_lr=2.0, total_steps=1000)
    assert lr_schedule(550, cfg) == pytest.approx(1.0)


def test_schedule_endpoints_zero():
    cfg = TrainConfig(base_lr=3.0, total_steps=400)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(400, cfg) == 0.0


def test_schedule_continuous_and_peaked():
    cfg = TrainConfig(base_lr=1.0, total_steps=200)
    values = [lr_schedule(s, cfg) for s in range(201)]
    assert max(values) == pytest.approx(1.0)
    assert values.index(max(values)) == 20
    diffs = np.abs(np.diff(values))
    assert diffs.max() <= 1.0 / 20 + 1e-12  # no jumps beyond the warmup slope


def test_schedule_rejects_out_of_range():
    cfg = TrainConfig(total_steps=10)
    with pytest.raises(ValueError):
        lr_schedule(11, cfg)


# ---------------------------------------------------------------------------
# clipping
# ---------------------------------------------------------------------------


def test_clip_halves_at_double_norm():
    grads = {"a": np.array([2.0]), "b": np.zeros(1)}
    # global norm 2.0 with clip 1.0: every gradient halved
    out = clip_gradients(grads, 1.0)
    assert out["a"][0] == pytest.approx(1.0)


def test_clip_leaves_small_gradients():
    grads = {"a": np.array([0.3]), "b": np.array([0.4])}
    out = clip_gradients(grads, 1.0)
    assert out["a"][0] == 0.3 and out["b"][0] == 0.4


def test_clip_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        clip_gradients({"a": np.array([np.nan])}, 1.0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20),
       st.floats(0.1, 10))
@settings(max_examples=200, deadline=None)
def test_clip_contract(values, clip_norm):
    grads = {"g": np.array(values)}
    clip_gradients(grads, clip_norm)
    assert np.linalg.norm(grads["g"]) <= clip_norm + 1e-9


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------


def tiny_params():
    cfg = ModelConfig(vocab_size=6, n_entities=3, d_model=4, n_layers=0,
                      n_heads=1, d_ff=4, d_entity=4, max_len=4)
    return ModelParams.initialize(cfg, seed=0)


def test_adam_zero_gradients_leave_params():
    params = tiny_params()
    before = {k: t.data.copy() for k, t in params.items()}
    grads = {k: np.zeros_like(t.data) for k, t in params.items()}
    adam_step(params, grads, OptimizerState.for_params(params), lr=1e-3, cfg=TrainConfig())
    for k, t in params.items():
        assert np.array_equal(t.data, before[k])


def test_adam_first_step_update_value():
    # scalar parameter, g=1, lr=1e-3: bias-corrected update is
    # -lr * 1 / (1 + eps) ~= -9.99999990e-4
    params = tiny_params()
    grads = {k: np.zeros_like(t.data) for k, t in params.items()}
    grads["bio_b"] = np.zeros(3)
    grads["bio_b"][0] = 1.0
    before = params["bio_b"].data[0]
    adam_step(params, grads, OptimizerState.for_params(params), lr=1e-3, cfg=TrainConfig())
    delta = params["bio_b"].data[0] - before
    assert delta == pytest.approx(-1e-3 / (1.0 + 1e-8), abs=1e-15)


def test_adam_freeze_entity_embeddings():
    params = tiny_params()
    frozen_before = params["ent_emb"].data.tobytes()
    grads = {k: np.ones_like(t.data) for k, t in params.items()}
    cfg = TrainConfig(freeze_entity_embeddings=True)
    adam_step(params, grads, OptimizerState.for_params(params), lr=1e-2, cfg=cfg)
    assert params["ent_emb"].data.tobytes() == frozen_before
    assert not np.array_equal(params["bio_b"].data, np.zeros(3))


def test_adam_rejects_nonfinite_update():
    params = tiny_params()
    grads = {k: np.zeros_like(t.data) for k, t in params.items()}
    grads["bio_b"] = np.array([np.inf, 0.0, 0.0])
    with np.errstate(invalid="ignore"):
        with pytest.raises(ValueError, match="non-finite"):
            adam_step(params, grads, OptimizerState.for_params(params), lr=1e-3,
                      cfg=TrainConfig())


# ---------------------------------------------------------------------------
# pretrain loop
# ---------------------------------------------------------------------------


def small_setup(seed=0, n_contexts=12, n_entities=20):
    vocab, contexts, phrase, pages = make_world(
        n_entities=n_entities, n_contexts=n_contexts, seed=seed
    )
    mcfg = ModelConfig(vocab_size=len(vocab), n_entities=n_entities, **SMALL_MODEL)
    ccfg = CandidateConfig(k=8, max_page=2, max_phrase=2, min_random=2, rng_seed=5)
    ncfg = NoiseConfig(rng_seed=11)
    return vocab, contexts, phrase, pages, mcfg, ccfg, ncfg


def test_pretrain_deterministic_logs_and_checkpoints(tmp_path):
    vocab, contexts, phrase, pages, mcfg, ccfg, ncfg = small_setup()
    tcfg = TrainConfig(base_lr=1e-3, total_steps=6, batch_size=4, log_interval=2, rng_seed=42)
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        pretrain(contexts, vocab, 20, mcfg, tcfg, ccfg, ncfg, pages, phrase, out_dir=str(out))
        outs.append(out)
    for name in ("checkpoint.elck", "train_log.tsv", "checkpoint.elck.manifest.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_pretrain_loss_decreases_on_overfit_fixture():
    vocab, contexts, phrase, pages, mcfg, ccfg, ncfg = small_setup(n_contexts=8)
    tcfg = TrainConfig(base_lr=3e-3, total_steps=120, batch_size=8, log_interval=1, rng_seed=1)
    _, rows = pretrain(contexts, vocab, 20, mcfg, tcfg, ccfg, ncfg, pages, phrase)
    first = np.mean([r.loss for r in rows[:20]])
    last = np.mean([r.loss for r in rows[-20:]])
    assert last < first


def test_noise_toggle_changes_inputs_never_targets():
    vocab, contexts, phrase, pages, mcfg, ccfg, _ = small_setup()
    import elink.training as tr
    import elink.model as M

    captured = []
    orig = M.build_batch

    def capture(contexts_, pad, targets, shared=None, tokens_override=None):
        batch = orig(contexts_, pad, targets, shared, tokens_override)
        captured.append(batch)
        return batch

    tcfg = TrainConfig(base_lr=1e-3, total_steps=1, batch_size=12, log_interval=1, rng_seed=2)
    M_build, tr_build = M.build_batch, tr.build_batch
    tr.build_batch = capture
    try:
        pretrain(contexts, vocab, 20, mcfg, tcfg, ccfg, NoiseConfig(enabled=True, rng_seed=3),
                 pages, phrase)
        pretrain(contexts, vocab, 20, mcfg, tcfg, ccfg, NoiseConfig(enabled=False, rng_seed=3),
                 pages, phrase)
    finally:
        tr.build_batch = tr_build
        M.build_batch = M_build
    noised, clean = captured
    assert (noised.tokens != clean.tokens).any()          # inputs differ
    assert (noised.bio_targets == clean.bio_targets).all()  # targets identical
    assert (noised.gold_pos == clean.gold_pos).all()
    assert (noised.ment_start == clean.ment_start).all()


def test_pretrain_empty_corpus_rejected():
    vocab, _, phrase, pages, mcfg, ccfg, ncfg = small_setup()
    with pytest.raises(ValueError, match="empty"):
        pretrain([], vocab, 20, mcfg, TrainConfig(), ccfg, ncfg, pages, phrase)


def test_pretrain_diverging_loss_aborts(tmp_path):
    vocab, contexts, phrase, pages, mcfg, ccfg, ncfg = small_setup()
    # an absurd learning rate overflows float64 on the next forward pass
    tcfg = TrainConfig(base_lr=1e300, total_steps=50, batch_size=8, log_interval=1,
                       clip_norm=1e18, rng_seed=3, checkpoint_interval=1)
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDiverged, match="last good checkpoint"):
            pretrain(contexts, vocab, 20, mcfg, tcfg, ccfg, ncfg, pages, phrase,
                     out_dir=str(tmp_path))
    # periodic checkpoints from before the divergence survive
    assert any(p.name.startswith("ckpt_step") for p in tmp_path.iterdir())
    assert not (tmp_path / "checkpoint.elck").exists()


def test_pretrain_full_softmax_mode():
    vocab, contexts, phrase, pages, mcfg, ccfg, ncfg = small_setup()
    tcfg = TrainConfig(base_lr=1e-3, total_steps=3, batch_size=4, log_interval=1,
                       softmax_mode="all_entities", rng_seed=4)
    _, rows = pretrain(contexts, vocab, 20, mcfg, tcfg, ccfg, ncfg, None, None)
    assert len(rows) == 3
    assert np.isfinite([r.loss for r in rows]).all()


def test_periodic_checkpoints_written(tmp_path):
    vocab, contexts, phrase, pages, mcfg, ccfg, ncfg = small_setup()
    tcfg = TrainConfig(base_lr=1e-3, total_steps=4, batch_size=4, log_interval=2,
                       checkpoint_interval=2, rng_seed=5)
    pretrain(contexts, vocab, 20, mcfg, tcfg, ccfg, ncfg, pages, phrase, out_dir=str(tmp_path))
    assert (tmp_path / "ckpt_step2.elck").exists()
    assert (tmp_path / "ckpt_step4.elck").exists()
    assert (tmp_path / "checkpoint.elck").exists()
    loaded = load_checkpoint(tmp_path / "ckpt_step2.elck")
    assert loaded.config.vocab_size == len(vocab)


# ---------------------------------------------------------------------------
# finetune loop
# ---------------------------------------------------------------------------


def test_finetune_all_entities_runs_without_table():
    vocab, contexts, phrase, pages, mcfg, ccfg, ncfg = small_setup()
    params = ModelParams.initialize(mcfg, seed=1)
    tcfg = TrainConfig(base_lr=1e-3, total_steps=4, batch_size=4, log_interval=2, rng_seed=6)
    _, rows, report = finetune(params, contexts, "all_entities", vocab, tcfg)
    assert report.skipped_mentions == 0
    assert len(rows) == 2


def test_finetune_skips_mentions_missing_from_alias(tmp_path):
    vocab, contexts, phrase, pages, mcfg, ccfg, ncfg = small_setup()
    params = ModelParams.initialize(mcfg, seed=1)
    # table resolves only name "n0" (entities 0 and 1); everything else skips
    table = AliasTable({"n0": [0, 1]})
    tcfg = TrainConfig(base_lr=1e-3, total_steps=2, batch_size=4, log_interval=1, rng_seed=7)
    _, _, report = finetune(params, contexts, "alias_candidates", vocab, tcfg, table)
    total_mentions = sum(1 for c in contexts for l in c.labels if l.entity is not None)
    found = sum(
        1 for c in contexts for l in c.labels
        if l.entity is not None and l.entity in table.lookup(l.surface or "")
    )
    assert report.skipped_mentions == total_mentions - found


def test_finetune_freeze_entity_embeddings():
    vocab, contexts, phrase, pages, mcfg, ccfg, ncfg = small_setup()
    params = ModelParams.initialize(mcfg, seed=1)
    frozen_before = params["ent_emb"].data.tobytes()
    tcfg = TrainConfig(base_lr=1e-2, total_steps=5, batch_size=4, log_interval=5,
                       freeze_entity_embeddings=True, rng_seed=8)
    finetune(params, contexts, "all_entities", vocab, tcfg)
    assert params["ent_emb"].data.tobytes() == frozen_before


def test_finetune_requires_table_in_alias_mode():
    vocab, contexts, phrase, pages, mcfg, ccfg, ncfg = small_setup()
    params = ModelParams.initialize(mcfg, seed=1)
    with pytest.raises(ValueError, match="alias table"):
        finetune(params, contexts, "alias_candidates", vocab, TrainConfig())


def test_finetune_improves_training_accuracy():
    vocab, contexts, phrase, pages, mcfg, ccfg, ncfg = small_setup(n_contexts=10)
    params = ModelParams.initialize(mcfg, seed=2)
    before = all_entity_accuracy(params, contexts)
    tcfg = TrainConfig(base_lr=3e-3, total_steps=150, batch_size=10, log_interval=150,
                       bio_weight=0.0, rng_seed=9)
    params, _, _ = finetune(params, contexts, "all_entities", vocab, tcfg)
    after = all_entity_accuracy(params, contexts)
    assert after > before
