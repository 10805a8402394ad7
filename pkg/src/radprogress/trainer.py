"""Two-stage training loops with checkpoint selection and persistence.

Both stages use decoupled-weight-decay Adam with two learning-rate groups
(visual encoder vs everything else) and a linear decay schedule: the rate at
step s is lr0 * (1 - s / S) for S total steps. Gradients are cleared with
set_to_none so parameters outside a loss's compute graph are never touched
by the optimizer, which is what makes the progression head's detached input
verifiable end to end.

Stage 1 selects its checkpoint by abnormal-observation macro-F1 on the
validation split; stage 2 decodes the validation split each epoch and
selects by BLEU-4. Checkpoints are directories holding parameters plus
optimizer state, a config snapshot, the metric history, and for stage 2 the
vocabulary and the hash of the graph artifact; loading refuses version or
graph-hash mismatches rather than silently running against the wrong
inputs.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .config import (
    ABLATIONS,
    ExperimentConfig,
    experiment_config_from_obj,
    experiment_config_to_obj,
    resolve_num_workers,
)
from .constants import NO_FINDING, OBSERVATIONS, STATUS_POSITIVE
from .corpus import CorpusSplit, VisitRecord, Vocabulary, decode_image_ref
from .evaluator import bleu, decode_reports
from .graph import ProgressionGraph, graph_to_json, sha256_of_text
from .stage1 import (
    Stage1Model,
    build_stage1_labels,
    predict_observations,
    predict_progressions,
    stage1_loss,
)
from .stage2 import (
    ReportGenerator,
    build_stage2_example,
    collate_stage2,
    stage2_batch_loss,
)

CHECKPOINT_FORMAT_VERSION = 1
_CONFIG_FILE = "config.json"
_PARAMS_FILE = "params.pt"
_VOCAB_FILE = "vocab.json"


class TrainerError(ValueError):
    """Invalid training setup (empty split, mismatched artifacts)."""


class CheckpointError(RuntimeError):
    """Unreadable, incomplete, or mismatched checkpoint directory."""


@dataclass
class TrainResult:
    checkpoint_dir: Path
    history: list[dict]
    best_epoch: int
    best_metric: float


def ablation_flags(ablation: str) -> tuple[bool, bool, bool]:
    """Map an ablation name to (use_obs, use_prior, use_graph)."""
    if ablation not in ABLATIONS:
        raise TrainerError(f"unknown ablation {ablation!r}, expected one of {ABLATIONS}")
    use_obs = ablation not in ("no-obs", "no-op")
    use_prior = ablation not in ("no-pro", "no-op")
    use_graph = ablation != "no-prr"
    return use_obs, use_prior, use_graph


def set_dropout(module: nn.Module, p: float) -> None:
    for m in module.modules():
        if isinstance(m, nn.Dropout):
            m.p = p
        elif isinstance(m, nn.MultiheadAttention):
            m.dropout = p


def make_optimizer(
    model: nn.Module,
    encoder: nn.Module | None,
    lr_encoder: float,
    lr_rest: float,
    weight_decay: float,
) -> torch.optim.AdamW:
    """AdamW with the visual encoder in its own learning-rate group."""
    encoder_ids = (
        {id(p) for p in encoder.parameters()} if encoder is not None else set()
    )
    enc_params = [p for p in model.parameters() if id(p) in encoder_ids]
    rest_params = [p for p in model.parameters() if id(p) not in encoder_ids]
    groups = []
    if enc_params:
        groups.append({"params": enc_params, "lr": lr_encoder})
    if rest_params:
        groups.append({"params": rest_params, "lr": lr_rest})
    if not groups:
        raise TrainerError("model has no parameters")
    return torch.optim.AdamW(groups, weight_decay=weight_decay)


def linear_decay_scheduler(
    optimizer: torch.optim.Optimizer, total_steps: int
) -> torch.optim.lr_scheduler.LambdaLR:
    """lr(s) = lr0 * (1 - s / total_steps); the final step runs at lr0/S."""
    if total_steps < 1:
        raise TrainerError(f"total_steps must be >= 1, got {total_steps}")
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: 1.0 - step / total_steps
    )


def load_images(
    records: Sequence[VisitRecord],
    image_root=None,
    num_workers: int | None = None,
) -> Tensor:
    """Decode every record's current image into one (B, H, W) tensor."""
    workers = resolve_num_workers() if num_workers is None else num_workers
    refs = [r.image_ref for r in records]
    if workers > 1 and len(refs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            arrays = list(pool.map(lambda ref: decode_image_ref(ref, image_root), refs))
    else:
        arrays = [decode_image_ref(ref, image_root) for ref in refs]
    return torch.from_numpy(np.stack(arrays))


def augment_images(images: Tensor, generator: torch.Generator) -> Tensor:
    """Upscale by 256/224, random-crop back to the input size, flip p=0.5."""
    batch, height, width = images.shape
    up_h = round(height * 256 / 224)
    up_w = round(width * 256 / 224)
    up = torch.nn.functional.interpolate(
        images.unsqueeze(1),
        size=(up_h, up_w),
        mode="bilinear",
        align_corners=False,
    ).squeeze(1)
    tops = torch.randint(0, up_h - height + 1, (batch,), generator=generator)
    lefts = torch.randint(0, up_w - width + 1, (batch,), generator=generator)
    flips = torch.rand(batch, generator=generator) < 0.5
    out = torch.empty_like(images)
    for i in range(batch):
        crop = up[i, tops[i] : tops[i] + height, lefts[i] : lefts[i] + width]
        out[i] = torch.flip(crop, dims=(1,)) if flips[i] else crop
    return out


def _positive_targets(records: Sequence[VisitRecord]) -> Tensor:
    out = torch.zeros(len(records), len(OBSERVATIONS), dtype=torch.bool)
    for row, record in enumerate(records):
        for col, label in enumerate(OBSERVATIONS):
            out[row, col] = record.status_of(label) == STATUS_POSITIVE
    return out


def stage1_observation_probs(
    model: Stage1Model,
    records: Sequence[VisitRecord],
    image_root=None,
    batch_size: int = 64,
) -> Tensor:
    """Batched no-grad p = p_d * p_c for a record list, shape (B, 14)."""
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start : start + batch_size]
            images = load_images(batch, image_root)
            _, _, p = model.observation_probs(images)
            chunks.append(p)
    if was_training:
        model.train()
    return torch.cat(chunks) if chunks else torch.zeros(0, len(OBSERVATIONS))


def stage1_macro_f1(
    model: Stage1Model,
    records: Sequence[VisitRecord],
    image_root=None,
    abnormal_only: bool = True,
    threshold: float = 0.5,
    batch_size: int = 64,
) -> float:
    """Macro-F1 of positive observations at a fixed probability threshold.

    ``abnormal_only`` drops the No Finding column (checkpoint-selection
    convention); a label absent from both predictions and references scores
    a vacuous 1.0.
    """
    if not records:
        raise TrainerError("cannot score an empty record list")
    probs = stage1_observation_probs(model, records, image_root, batch_size)
    predicted = probs >= threshold
    gold = _positive_targets(records)
    labels = [
        (i, label)
        for i, label in enumerate(OBSERVATIONS)
        if not (abnormal_only and label == NO_FINDING)
    ]
    f1s = []
    for col, _ in labels:
        tp = int((predicted[:, col] & gold[:, col]).sum())
        fp = int((predicted[:, col] & ~gold[:, col]).sum())
        fn = int((~predicted[:, col] & gold[:, col]).sum())
        if tp == fp == fn == 0:
            f1s.append(1.0)
            continue
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(
            2 * precision * recall / (precision + recall) if precision + recall else 0.0
        )
    return sum(f1s) / len(f1s)


def _clone_state(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _write_checkpoint(
    out_dir: Path,
    kind: str,
    cfg: ExperimentConfig,
    params: dict,
    history: list[dict],
    best_epoch: int,
    best_metric: float,
    metric_name: str,
    vocab: Vocabulary | None = None,
    graph_sha256: str | None = None,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "experiment": experiment_config_to_obj(cfg),
        "history": history,
        "best": {"epoch": best_epoch, "metric": best_metric, "name": metric_name},
        "graph_sha256": graph_sha256,
    }
    (out_dir / _CONFIG_FILE).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if vocab is not None:
        (out_dir / _VOCAB_FILE).write_text(vocab.to_json() + "\n", encoding="utf-8")
    torch.save(params, out_dir / _PARAMS_FILE)


def _read_checkpoint_meta(ckpt_dir: Path, kind: str) -> dict:
    config_path = ckpt_dir / _CONFIG_FILE
    params_path = ckpt_dir / _PARAMS_FILE
    if not config_path.is_file():
        raise CheckpointError(f"missing {config_path}")
    if not params_path.is_file():
        raise CheckpointError(f"missing {params_path}")
    meta = json.loads(config_path.read_text(encoding="utf-8"))
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {version!r} unsupported, expected "
            f"{CHECKPOINT_FORMAT_VERSION}"
        )
    if meta.get("kind") != kind:
        raise CheckpointError(
            f"checkpoint kind {meta.get('kind')!r} does not match {kind!r}"
        )
    return meta


def train_stage1(
    split: CorpusSplit,
    cfg: ExperimentConfig,
    out_dir: str | Path,
    image_root=None,
    num_workers: int | None = None,
) -> TrainResult:
    """Observation/progression training with macro-F1 checkpoint selection.

    ``stop_at_train_f1`` short-circuits the epoch loop once the train-split
    macro-F1 over all 14 observations reaches the target, keeping that
    epoch's weights (overfit runs); otherwise the best validation epoch
    wins.
    """
    tc, mc = cfg.stage1, cfg.model
    if tc.stage != 1:
        raise TrainerError(f"stage-1 trainer got a stage-{tc.stage} config")
    if not split.train:
        raise TrainerError("train split is empty")
    out_dir = Path(out_dir)
    records = list(split.train)
    val_records = list(split.validation) or records

    torch.manual_seed(tc.seed)
    model = Stage1Model(mc)
    set_dropout(model, tc.dropout)
    labels = build_stage1_labels(records)
    images = load_images(records, image_root, num_workers)
    prior_images = torch.zeros_like(images)
    has_prior = torch.zeros(len(records), dtype=torch.bool)
    prior_refs = [
        (i, r.prior.image_ref) for i, r in enumerate(records) if r.prior is not None
    ]
    for i, ref in prior_refs:
        prior_images[i] = torch.from_numpy(decode_image_ref(ref, image_root))
        has_prior[i] = True

    optimizer = make_optimizer(
        model, model.encoder, tc.lr_encoder, tc.lr_rest, tc.weight_decay
    )
    n = len(records)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    scheduler = linear_decay_scheduler(optimizer, steps_per_epoch * tc.epochs)
    shuffler = torch.Generator().manual_seed(tc.seed)

    history: list[dict] = []
    best_epoch, best_metric = -1, -math.inf
    best_state: dict | None = None
    for epoch in range(tc.epochs):
        model.train()
        if tc.augment:
            epoch_images = augment_images(images, shuffler)
            epoch_priors = augment_images(prior_images, shuffler)
        else:
            epoch_images, epoch_priors = images, prior_images
        perm = torch.randperm(n, generator=shuffler)
        loss_sum = 0.0
        for start in range(0, n, tc.batch_size):
            idx = perm[start : start + tc.batch_size]
            cls_c = model.encode(epoch_images[idx]).cls
            p_d, p_c, _ = predict_observations(cls_c, model.heads)
            follow = has_prior[idx]
            p_prog = torch.zeros(len(idx), labels.progression.shape[1])
            if bool(follow.any()):
                cls_p = model.encode(epoch_priors[idx][follow]).cls
                p_prog = p_prog.index_put(
                    (torch.nonzero(follow).squeeze(1),),
                    predict_progressions(cls_p, cls_c[follow], model.progression_head),
                )
            batch_labels = replace(
                labels,
                detect=labels.detect[idx],
                classify=labels.classify[idx],
                progression=labels.progression[idx],
                follow_up=labels.follow_up[idx],
            )
            loss = stage1_loss(p_d, p_c, p_prog, batch_labels, tc.alpha_d)
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            optimizer.step()
            scheduler.step()
            loss_sum += float(loss.total.detach())
        entry = {
            "epoch": epoch,
            "train_loss": loss_sum / steps_per_epoch,
            "lr": scheduler.get_last_lr()[0],
        }
        metric = stage1_macro_f1(model, val_records, image_root, abnormal_only=True)
        entry["val_macro_f1_abnormal"] = metric
        stop = False
        if tc.stop_at_train_f1 is not None:
            train_f1 = stage1_macro_f1(
                model, records, image_root, abnormal_only=False
            )
            entry["train_macro_f1"] = train_f1
            stop = train_f1 >= tc.stop_at_train_f1
        history.append(entry)
        if stop or metric > best_metric:
            best_epoch, best_metric = epoch, metric
            best_state = _clone_state(model)
        if stop:
            entry["stopped_early"] = True
            break

    assert best_state is not None
    model.load_state_dict(best_state)
    _write_checkpoint(
        out_dir,
        "stage1",
        cfg,
        {"model": best_state, "optimizer": optimizer.state_dict()},
        history,
        best_epoch,
        best_metric,
        "macro_f1_abnormal",
    )
    return TrainResult(out_dir, history, best_epoch, best_metric)


def load_stage1_checkpoint(
    ckpt_dir: str | Path,
) -> tuple[Stage1Model, ExperimentConfig, dict]:
    """Rebuild a stage-1 model in eval mode; returns (model, config, meta)."""
    ckpt_dir = Path(ckpt_dir)
    meta = _read_checkpoint_meta(ckpt_dir, "stage1")
    cfg = experiment_config_from_obj(meta["experiment"])
    model = Stage1Model(cfg.model)
    params = torch.load(ckpt_dir / _PARAMS_FILE, weights_only=True)
    model.load_state_dict(params["model"])
    model.eval()
    return model, cfg, meta


def check_graph_vocabulary(graph: ProgressionGraph, vocab: Vocabulary) -> None:
    """Every node's token id must match the vocabulary's id for its surface
    token; a graph built against a different vocabulary is refused."""
    for node in graph.nodes:
        if node.is_entity:
            expected = vocab.encode([node.label])[0]
            if expected == vocab.unk_id or expected != node.token_id:
                raise TrainerError(
                    f"graph entity {node.label!r} has token id {node.token_id}, "
                    f"vocabulary says {expected}; rebuild the graph from this corpus"
                )
        else:
            expected = vocab.observation_token_id(node.label)
            if expected != node.token_id:
                raise TrainerError(
                    f"graph observation {node.label!r} has token id "
                    f"{node.token_id}, vocabulary says {expected}"
                )


@dataclass
class Stage2Bundle:
    """Everything needed to decode: generator, optional stage-1 model,
    vocabulary, config, and the graph hash the model was trained against."""

    generator: ReportGenerator
    stage1_model: Stage1Model | None
    vocab: Vocabulary
    config: ExperimentConfig
    graph_sha256: str
    meta: dict


def train_stage2(
    split: CorpusSplit,
    graph: ProgressionGraph,
    cfg: ExperimentConfig,
    out_dir: str | Path,
    stage1_dir: str | Path | None = None,
    image_root=None,
    num_workers: int | None = None,
) -> TrainResult:
    """Report-generator training with validation BLEU-4 checkpoint selection.

    The visual encoder warm-starts from the stage-1 checkpoint, which is
    also bundled into the output directory so decoding can rebuild the
    observation predictor. Ablations that drop the observation context
    (no-obs, no-op) may omit ``stage1_dir``.
    """
    tc, mc = cfg.stage2, cfg.model
    if tc.stage != 2:
        raise TrainerError(f"stage-2 trainer got a stage-{tc.stage} config")
    if not split.train:
        raise TrainerError("train split is empty")
    use_obs, use_prior, use_graph = ablation_flags(tc.ablation)
    if stage1_dir is None and use_obs:
        raise TrainerError(
            f"ablation {tc.ablation!r} keeps the observation context and needs "
            "a stage-1 checkpoint"
        )
    out_dir = Path(out_dir)
    records = list(split.train)
    val_records = list(split.validation) or records

    vocab = Vocabulary.from_corpus(records, min_count=mc.min_count)
    check_graph_vocabulary(graph, vocab)
    graph_sha = sha256_of_text(graph_to_json(graph))

    torch.manual_seed(tc.seed)
    model = ReportGenerator(
        mc, vocab, use_obs=use_obs, use_prior=use_prior, use_graph=use_graph
    )
    set_dropout(model, tc.dropout)

    stage1_model: Stage1Model | None = None
    if stage1_dir is not None:
        stage1_model, s1_cfg, _ = load_stage1_checkpoint(stage1_dir)
        if s1_cfg.model != mc:
            raise TrainerError(
                "stage-1 checkpoint was trained with a different model config"
            )
        model.visual_encoder.load_state_dict(stage1_model.encoder.state_dict())

    # Teacher forcing: the observation context and subgraph query use the
    # gold equivalents of exactly the signals decoding will have. Perfect
    # predictions can only pass positive observations through the selection
    # threshold, so the gold context is the positive subset; without a
    # stage-1 model decoding has no predicted query, so training uses none
    # either.
    examples = [
        build_stage2_example(
            r,
            vocab,
            mc,
            graph,
            r.positive_observations() if stage1_model is not None else (),
            r.progressions if stage1_model is not None else (),
            image_root,
            True,
        )
        for r in records
    ]

    optimizer = make_optimizer(
        model, model.visual_encoder, tc.lr_encoder, tc.lr_rest, tc.weight_decay
    )
    n = len(examples)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    scheduler = linear_decay_scheduler(optimizer, steps_per_epoch * tc.epochs)
    shuffler = torch.Generator().manual_seed(tc.seed)

    history: list[dict] = []
    best_epoch, best_metric = -1, -math.inf
    best_state: dict | None = None
    for epoch in range(tc.epochs):
        model.train()
        perm = torch.randperm(n, generator=shuffler).tolist()
        loss_sum = 0.0
        nll_sum = 0.0
        token_count = 0
        for start in range(0, n, tc.batch_size):
            batch = collate_stage2(
                [examples[i] for i in perm[start : start + tc.batch_size]],
                vocab.pad_id,
            )
            output = model(batch)
            sums, per_token = stage2_batch_loss(output, tc.lambda_gate)
            optimizer.zero_grad(set_to_none=True)
            per_token.backward()
            optimizer.step()
            scheduler.step()
            loss_sum += float(per_token.detach())
            nll_sum += float(sums.nll.detach())
            token_count += int(output.step_mask.sum())
        train_nll = nll_sum / max(token_count, 1)
        entry = {
            "epoch": epoch,
            "train_loss_per_token": loss_sum / steps_per_epoch,
            "train_nll_per_token": train_nll,
            "lr": scheduler.get_last_lr()[0],
        }
        stop = tc.stop_at_train_nll is not None and train_nll < tc.stop_at_train_nll
        # Validation decoding is the expensive part of an epoch; skip it on
        # off epochs when validate_every > 1 (the last epoch always runs).
        run_validation = (
            (epoch + 1) % tc.validate_every == 0 or epoch == tc.epochs - 1 or stop
        )
        metric = -math.inf
        if run_validation:
            model.eval()
            generated = decode_reports(
                model,
                val_records,
                graph,
                stage1_model=stage1_model,
                max_steps=mc.max_steps,
                batch_size=tc.eval_batch_size,
                image_root=image_root,
            )
            references = [r.report for r in val_records]
            metric = bleu([" ".join(toks) for toks in generated], references, n=4)
            entry["val_bleu4"] = metric
        history.append(entry)
        if stop or (run_validation and metric > best_metric):
            best_epoch, best_metric = epoch, metric
            best_state = _clone_state(model)
        if stop:
            entry["stopped_early"] = True
            break

    assert best_state is not None
    model.load_state_dict(best_state)
    params = {
        "model": best_state,
        "optimizer": optimizer.state_dict(),
        "stage1_model": (
            stage1_model.state_dict() if stage1_model is not None else None
        ),
    }
    _write_checkpoint(
        out_dir,
        "stage2",
        cfg,
        params,
        history,
        best_epoch,
        best_metric,
        "bleu4",
        vocab=vocab,
        graph_sha256=graph_sha,
    )
    return TrainResult(out_dir, history, best_epoch, best_metric)


def load_stage2_checkpoint(
    ckpt_dir: str | Path, graph: ProgressionGraph | None = None
) -> Stage2Bundle:
    """Rebuild the generator (and bundled stage-1 model) in eval mode.

    When ``graph`` is given its canonical-serialization hash must equal the
    hash recorded at training time; a mismatch is refused.
    """
    ckpt_dir = Path(ckpt_dir)
    meta = _read_checkpoint_meta(ckpt_dir, "stage2")
    vocab_path = ckpt_dir / _VOCAB_FILE
    if not vocab_path.is_file():
        raise CheckpointError(f"missing {vocab_path}")
    stored_sha = meta.get("graph_sha256")
    if graph is not None:
        actual = sha256_of_text(graph_to_json(graph))
        if actual != stored_sha:
            raise CheckpointError(
                f"graph hash {actual} does not match the checkpoint's "
                f"{stored_sha}; refusing to decode against a different graph"
            )
    cfg = experiment_config_from_obj(meta["experiment"])
    vocab = Vocabulary.from_json(vocab_path.read_text(encoding="utf-8"))
    use_obs, use_prior, use_graph = ablation_flags(cfg.stage2.ablation)
    model = ReportGenerator(
        cfg.model, vocab, use_obs=use_obs, use_prior=use_prior, use_graph=use_graph
    )
    params = torch.load(ckpt_dir / _PARAMS_FILE, weights_only=True)
    model.load_state_dict(params["model"])
    model.eval()
    stage1_model: Stage1Model | None = None
    if params.get("stage1_model") is not None:
        stage1_model = Stage1Model(cfg.model)
        stage1_model.load_state_dict(params["stage1_model"])
        stage1_model.eval()
    return Stage2Bundle(
        generator=model,
        stage1_model=stage1_model,
        vocab=vocab,
        config=cfg,
        graph_sha256=stored_sha,
        meta=meta,
    )


__all__ = [
    "CHECKPOINT_FORMAT_VERSION",
    "CheckpointError",
    "Stage2Bundle",
    "TrainResult",
    "TrainerError",
    "ablation_flags",
    "augment_images",
    "check_graph_vocabulary",
    "linear_decay_scheduler",
    "load_images",
    "load_stage1_checkpoint",
    "load_stage2_checkpoint",
    "make_optimizer",
    "set_dropout",
    "stage1_macro_f1",
    "stage1_observation_probs",
    "train_stage1",
    "train_stage2",
]
