"""Tests for optimization plumbing, training loops, and checkpoints."""

import dataclasses
import json
import shutil

import pytest
import torch
from torch import nn

from radprogress.config import ExperimentConfig, ModelConfig, TrainConfig
from radprogress.constants import NO_FINDING, OBSERVATIONS
from radprogress.corpus import CorpusSplit, Vocabulary
from radprogress.graph import build_progression_graph, graph_to_json, sha256_of_text
from radprogress.stage1 import Stage1Model, predict_progressions
from radprogress.synthetic import SyntheticSpec, generate_synthetic_corpus
from radprogress.trainer import (
    CHECKPOINT_FORMAT_VERSION,
    CheckpointError,
    TrainerError,
    ablation_flags,
    augment_images,
    check_graph_vocabulary,
    linear_decay_scheduler,
    load_images,
    load_stage1_checkpoint,
    load_stage2_checkpoint,
    make_optimizer,
    set_dropout,
    stage1_macro_f1,
    train_stage1,
    train_stage2,
)

MC = ModelConfig(
    hidden_size=16,
    num_heads=4,
    visual_layers=1,
    encoder_layers=1,
    decoder_layers=1,
    rgcn_layers=1,
    dropout=0.0,
    min_count=1,
    max_steps=78,
    max_positions=128,
)


def train_config(stage, **kwargs):
    base = dict(
        stage=stage,
        epochs=2,
        batch_size=8,
        lr_encoder=1e-3,
        lr_rest=1e-3,
        dropout=0.0,
        augment=False,
        eval_batch_size=8,
        seed=0,
    )
    base.update(kwargs)
    if stage == 2:
        base.setdefault("checkpoint_metric", "bleu4")
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(SyntheticSpec(n_records=12, seed=5))


@pytest.fixture(scope="module")
def graph(corpus):
    vocab = Vocabulary.from_corpus(corpus.train, min_count=1)
    return build_progression_graph(corpus.train, vocab, k=5)


@pytest.fixture(scope="module")
def stage1_dir(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "s1"
    cfg = ExperimentConfig(model=MC, stage1=train_config(1))
    result = train_stage1(corpus, cfg, out)
    return out, result


@pytest.fixture(scope="module")
def stage2_dir(corpus, graph, stage1_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "s2"
    cfg = ExperimentConfig(model=MC, stage1=train_config(1), stage2=train_config(2))
    result = train_stage2(corpus, graph, cfg, out, stage1_dir=stage1_dir[0])
    return out, result


class TestAblationFlags:
    @pytest.mark.parametrize(
        "name,expected",
        [
            ("none", (True, True, True)),
            ("no-obs", (False, True, True)),
            ("no-pro", (True, False, True)),
            ("no-op", (False, False, True)),
            ("no-prr", (True, True, False)),
        ],
    )
    def test_mapping(self, name, expected):
        assert ablation_flags(name) == expected

    def test_unknown_name_rejected(self):
        with pytest.raises(TrainerError, match="unknown ablation"):
            ablation_flags("no-everything")


class TestSetDropout:
    def test_overrides_every_dropout_module(self):
        vocab_records = generate_synthetic_corpus(
            SyntheticSpec(n_records=4, seed=1)
        ).train
        vocab = Vocabulary.from_corpus(vocab_records, min_count=1)
        from radprogress.stage2 import ReportGenerator

        cfg = dataclasses.replace(MC, dropout=0.3)
        model = ReportGenerator(cfg, vocab)
        set_dropout(model, 0.0)
        for module in model.modules():
            if isinstance(module, nn.Dropout):
                assert module.p == 0.0
            elif isinstance(module, nn.MultiheadAttention):
                assert module.dropout == 0.0


class TestMakeOptimizer:
    def test_two_groups_split_by_encoder(self):
        model = Stage1Model(MC)
        optimizer = make_optimizer(model, model.encoder, 1e-4, 3e-4, 0.01)
        assert len(optimizer.param_groups) == 2
        enc_group, rest_group = optimizer.param_groups
        assert enc_group["lr"] == 1e-4
        assert rest_group["lr"] == 3e-4
        assert enc_group["weight_decay"] == 0.01
        assert rest_group["weight_decay"] == 0.01
        encoder_ids = {id(p) for p in model.encoder.parameters()}
        assert {id(p) for p in enc_group["params"]} == encoder_ids
        group_ids = {id(p) for g in optimizer.param_groups for p in g["params"]}
        assert group_ids == {id(p) for p in model.parameters()}
        assert not encoder_ids & {id(p) for p in rest_group["params"]}

    def test_no_encoder_gives_single_group(self):
        model = nn.Linear(4, 2)
        optimizer = make_optimizer(model, None, 1e-4, 5e-4, 0.0)
        assert len(optimizer.param_groups) == 1
        assert optimizer.param_groups[0]["lr"] == 5e-4

    def test_empty_model_rejected(self):
        with pytest.raises(TrainerError, match="no parameters"):
            make_optimizer(nn.Module(), None, 1e-4, 1e-4, 0.0)


class TestLinearDecayScheduler:
    def test_exact_decay_factors(self):
        param = nn.Parameter(torch.zeros(1))
        lr0 = 0.25
        total = 5
        optimizer = torch.optim.AdamW([param], lr=lr0)
        scheduler = linear_decay_scheduler(optimizer, total)
        for step in range(total):
            expected = lr0 * (1.0 - step / total)
            assert abs(optimizer.param_groups[0]["lr"] - expected) < 1e-12
            optimizer.step()
            scheduler.step()
        assert abs(optimizer.param_groups[0]["lr"]) < 1e-12

    def test_rejects_non_positive_total(self):
        param = nn.Parameter(torch.zeros(1))
        optimizer = torch.optim.AdamW([param], lr=0.1)
        with pytest.raises(TrainerError, match="total_steps"):
            linear_decay_scheduler(optimizer, 0)


class TestLoadImages:
    def test_shapes_and_range(self, corpus):
        images = load_images(corpus.train)
        assert images.shape == (len(corpus.train), MC.image_height, MC.image_width)
        assert images.dtype == torch.float32
        assert 0.0 <= images.min() and images.max() <= 1.0

    def test_parallel_matches_sequential(self, corpus):
        sequential = load_images(corpus.train, num_workers=0)
        parallel = load_images(corpus.train, num_workers=3)
        assert torch.equal(sequential, parallel)


class TestAugmentImages:
    def test_same_seed_is_deterministic(self, corpus):
        images = load_images(corpus.train)
        a = augment_images(images, torch.Generator().manual_seed(42))
        b = augment_images(images, torch.Generator().manual_seed(42))
        assert torch.equal(a, b)
        assert a.shape == images.shape

    def test_different_seed_differs(self, corpus):
        images = load_images(corpus.train)
        a = augment_images(images, torch.Generator().manual_seed(42))
        b = augment_images(images, torch.Generator().manual_seed(43))
        assert not torch.equal(a, b)


class TestStage1MacroF1:
    @staticmethod
    def clean_records(corpus):
        """Records whose only positive label is No Finding."""
        return [
            r
            for r in corpus.train
            if all(l == NO_FINDING for l, _ in r.positive_observations())
        ]

    def test_vacuous_labels_score_one(self, corpus):
        torch.manual_seed(0)
        model = Stage1Model(MC)
        # A threshold above 1 predicts nothing anywhere; scoring records with
        # no positive abnormal labels must then be vacuously perfect.
        clean = self.clean_records(corpus)
        assert clean
        score = stage1_macro_f1(model, clean, threshold=1.1)
        assert score == 1.0

    def test_no_finding_column_only_counts_when_asked(self, corpus):
        torch.manual_seed(0)
        model = Stage1Model(MC)
        clean = self.clean_records(corpus)
        full = stage1_macro_f1(model, clean, abnormal_only=False, threshold=1.1)
        n = len(OBSERVATIONS)
        assert full == pytest.approx((n - 1) / n)

    def test_empty_records_rejected(self):
        model = Stage1Model(MC)
        with pytest.raises(TrainerError, match="empty"):
            stage1_macro_f1(model, [])


class TestStage1Training:
    def test_result_and_history(self, stage1_dir):
        out, result = stage1_dir
        assert result.checkpoint_dir == out
        assert len(result.history) == 2
        for entry in result.history:
            assert {"epoch", "train_loss", "lr", "val_macro_f1_abnormal"} <= set(
                entry
            )
        assert result.best_metric == max(
            e["val_macro_f1_abnormal"] for e in result.history
        )
        assert (out / "config.json").is_file()
        assert (out / "params.pt").is_file()

    def test_checkpoint_round_trip(self, corpus, stage1_dir):
        out, result = stage1_dir
        model, cfg, meta = load_stage1_checkpoint(out)
        assert not model.training
        assert cfg.model == MC
        assert meta["best"]["epoch"] == result.best_epoch
        val_records = list(corpus.validation) or list(corpus.train)
        recomputed = stage1_macro_f1(model, val_records, abnormal_only=True)
        assert recomputed == pytest.approx(result.best_metric, abs=1e-9)

    def test_wrong_stage_config_rejected(self, corpus, tmp_path):
        cfg = ExperimentConfig(model=MC, stage1=train_config(2))
        with pytest.raises(TrainerError, match="stage-2 config"):
            train_stage1(corpus, cfg, tmp_path / "bad")

    def test_empty_train_split_rejected(self, tmp_path):
        cfg = ExperimentConfig(model=MC, stage1=train_config(1))
        empty = CorpusSplit(train=(), validation=(), test=())
        with pytest.raises(TrainerError, match="train split is empty"):
            train_stage1(empty, cfg, tmp_path / "bad")


class TestOptimizerIsolation:
    def test_progression_step_leaves_encoder_untouched(self, corpus):
        torch.manual_seed(0)
        model = Stage1Model(MC)
        optimizer = make_optimizer(model, model.encoder, 1e-2, 1e-2, 0.01)
        images = load_images(corpus.train)
        before = {
            name: p.detach().clone()
            for name, p in model.named_parameters()
        }
        cls_p = model.encode(images).cls
        cls_c = model.encode(images).cls
        p_prog = predict_progressions(cls_p, cls_c, model.progression_head)
        loss = nn.functional.binary_cross_entropy(
            p_prog, torch.ones_like(p_prog)
        )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        for name, p in model.named_parameters():
            if name.startswith("progression_head"):
                assert not torch.equal(p, before[name]), name
            else:
                assert torch.equal(p, before[name]), name


class TestStage2Training:
    def test_observation_context_needs_stage1(self, corpus, graph, tmp_path):
        cfg = ExperimentConfig(
            model=MC, stage1=train_config(1), stage2=train_config(2)
        )
        with pytest.raises(TrainerError, match="stage-1 checkpoint"):
            train_stage2(corpus, graph, cfg, tmp_path / "bad")

    def test_result_and_history(self, stage2_dir):
        out, result = stage2_dir
        assert len(result.history) == 2
        for entry in result.history:
            assert "train_nll_per_token" in entry
            assert "val_bleu4" in entry
        assert result.best_metric == max(e["val_bleu4"] for e in result.history)
        assert (out / "vocab.json").is_file()

    def test_checkpoint_round_trip(self, corpus, graph, stage2_dir):
        out, result = stage2_dir
        bundle = load_stage2_checkpoint(out, graph)
        assert not bundle.generator.training
        assert bundle.stage1_model is not None
        assert not bundle.stage1_model.training
        assert bundle.config.model == MC
        assert bundle.graph_sha256 == sha256_of_text(graph_to_json(graph))
        expected_vocab = Vocabulary.from_corpus(corpus.train, min_count=1)
        assert bundle.vocab.tokens == expected_vocab.tokens
        assert bundle.meta["best"]["epoch"] == result.best_epoch

    def test_graph_hash_mismatch_refused(self, corpus, graph, stage2_dir):
        out, _ = stage2_dir
        vocab = Vocabulary.from_corpus(corpus.train, min_count=1)
        other = build_progression_graph(corpus.train, vocab, k=1)
        assert graph_to_json(other) != graph_to_json(graph)
        with pytest.raises(CheckpointError, match="graph hash"):
            load_stage2_checkpoint(out, other)

    def test_kind_mismatch_refused(self, stage1_dir, stage2_dir):
        with pytest.raises(CheckpointError, match="kind"):
            load_stage2_checkpoint(stage1_dir[0])
        with pytest.raises(CheckpointError, match="kind"):
            load_stage1_checkpoint(stage2_dir[0])

    def test_format_version_mismatch_refused(self, stage2_dir, tmp_path):
        out, _ = stage2_dir
        copy = tmp_path / "tampered"
        shutil.copytree(out, copy)
        meta = json.loads((copy / "config.json").read_text())
        assert meta["format_version"] == CHECKPOINT_FORMAT_VERSION
        meta["format_version"] = 99
        (copy / "config.json").write_text(json.dumps(meta))
        with pytest.raises(CheckpointError, match="format"):
            load_stage2_checkpoint(copy)

    def test_missing_params_refused(self, stage2_dir, tmp_path):
        out, _ = stage2_dir
        copy = tmp_path / "partial"
        shutil.copytree(out, copy)
        (copy / "params.pt").unlink()
        with pytest.raises(CheckpointError, match="params"):
            load_stage2_checkpoint(copy)

    def test_noop_ablation_trains_without_stage1(self, corpus, graph, tmp_path):
        cfg = ExperimentConfig(
            model=MC,
            stage1=train_config(1),
            stage2=train_config(2, ablation="no-op", validate_every=2),
        )
        out = tmp_path / "noop"
        result = train_stage2(corpus, graph, cfg, out)
        assert "val_bleu4" not in result.history[0]
        assert "val_bleu4" in result.history[1]
        bundle = load_stage2_checkpoint(out, graph)
        assert bundle.stage1_model is None
        assert bundle.generator.use_obs is False
        assert bundle.generator.use_prior is False
        assert bundle.generator.use_graph is True

    def test_model_config_mismatch_refused(self, corpus, graph, stage1_dir, tmp_path):
        other_mc = dataclasses.replace(MC, gamma=3.0)
        cfg = ExperimentConfig(
            model=other_mc, stage1=train_config(1), stage2=train_config(2)
        )
        with pytest.raises(TrainerError, match="different model config"):
            train_stage2(
                corpus, graph, cfg, tmp_path / "bad", stage1_dir=stage1_dir[0]
            )


class TestCheckGraphVocabulary:
    def test_matching_graph_passes(self, corpus, graph):
        vocab = Vocabulary.from_corpus(corpus.train, min_count=1)
        check_graph_vocabulary(graph, vocab)

    def test_entity_id_drift_refused(self, corpus, graph):
        vocab = Vocabulary.from_corpus(corpus.train, min_count=1)
        entity_pos = graph.entity_indices()[0]
        nodes = list(graph.nodes)
        nodes[entity_pos] = dataclasses.replace(
            nodes[entity_pos], token_id=nodes[entity_pos].token_id + 1
        )
        tampered = dataclasses.replace(graph, nodes=tuple(nodes))
        with pytest.raises(TrainerError, match="rebuild"):
            check_graph_vocabulary(tampered, vocab)

    def test_observation_id_drift_refused(self, corpus, graph):
        vocab = Vocabulary.from_corpus(corpus.train, min_count=1)
        obs_pos = graph.observation_indices()[0]
        nodes = list(graph.nodes)
        nodes[obs_pos] = dataclasses.replace(
            nodes[obs_pos], token_id=nodes[obs_pos].token_id + 1
        )
        tampered = dataclasses.replace(graph, nodes=tuple(nodes))
        with pytest.raises(TrainerError, match="vocabulary says"):
            check_graph_vocabulary(tampered, vocab)
