"""First stage: observation detection/classification and progression prediction.

Observations follow a detect-then-classify factorization off the current
image's class vector: p_d is the probability the observation is mentioned,
p_c the probability it is positive given mentioned, and the final score is
their product. No Finding is treated as always mentioned, so its detection
probability is pinned to 1 and its final score equals p_c.

Progression prediction concatenates the prior and current class vectors. The
concatenation is detached, so progression-loss gradients never reach the
visual encoder; that contract is load-bearing and tested.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .backbone import VisualEncoder, VisualSequence
from .config import ModelConfig
from .constants import (
    NO_FINDING,
    NO_FINDING_INDEX,
    OBSERVATIONS,
    PROGRESSIONS,
    STATUS_NEGATIVE,
    STATUS_POSITIVE,
)
from .corpus import VisitRecord

_LOG_EPS = 1e-12


class ObservationHeads(nn.Module):
    """One (detection, classification) linear pair per canonical observation."""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.detect = nn.Linear(hidden_size, len(OBSERVATIONS))
        self.classify = nn.Linear(hidden_size, len(OBSERVATIONS))


class ProgressionHead(nn.Module):
    """Linear scorer over [cls_prior; cls_current] for Better/Stable/Worse."""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.score = nn.Linear(2 * hidden_size, len(PROGRESSIONS))


def predict_observations(
    cls_c: Tensor, heads: ObservationHeads
) -> tuple[Tensor, Tensor, Tensor]:
    """Return (p_d, p_c, p) with the No Finding detection column pinned to 1."""
    p_d = torch.sigmoid(heads.detect(cls_c))
    p_c = torch.sigmoid(heads.classify(cls_c))
    ones = torch.ones_like(p_d[..., NO_FINDING_INDEX])
    p_d = torch.cat(
        [
            p_d[..., :NO_FINDING_INDEX],
            ones.unsqueeze(-1),
            p_d[..., NO_FINDING_INDEX + 1 :],
        ],
        dim=-1,
    )
    return p_d, p_c, p_d * p_c


def predict_progressions(
    cls_p: Tensor, cls_c: Tensor, head: ProgressionHead
) -> Tensor:
    """Multi-label progression probabilities from detached class vectors."""
    joint = torch.cat([cls_p, cls_c], dim=-1).detach()
    return torch.sigmoid(head.score(joint))


class Stage1Model(nn.Module):
    """Visual encoder plus both stage-1 head groups."""

    def __init__(self, cfg: ModelConfig, encoder: VisualEncoder | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = encoder if encoder is not None else VisualEncoder(cfg)
        self.heads = ObservationHeads(cfg.hidden_size)
        self.progression_head = ProgressionHead(cfg.hidden_size)

    def encode(self, images: Tensor) -> VisualSequence:
        return self.encoder(images)

    def observation_probs(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return predict_observations(self.encode(images).cls, self.heads)

    def progression_probs(self, prior_images: Tensor, images: Tensor) -> Tensor:
        cls_p = self.encode(prior_images).cls
        cls_c = self.encode(images).cls
        return predict_progressions(cls_p, cls_c, self.progression_head)


@dataclass
class Stage1Labels:
    """Batched binary targets. ``classify`` is only meaningful where
    ``detect`` is 1; ``progression`` only where ``follow_up`` is 1."""

    detect: Tensor
    classify: Tensor
    progression: Tensor
    follow_up: Tensor


def build_stage1_labels(
    records: Sequence[VisitRecord],
    dtype: torch.dtype = torch.float32,
) -> Stage1Labels:
    n, n_obs, n_prog = len(records), len(OBSERVATIONS), len(PROGRESSIONS)
    detect = torch.zeros(n, n_obs, dtype=dtype)
    classify = torch.zeros(n, n_obs, dtype=dtype)
    progression = torch.zeros(n, n_prog, dtype=dtype)
    follow_up = torch.zeros(n, dtype=dtype)
    for row, record in enumerate(records):
        mentioned = dict(record.observations)
        any_pos = any(
            status == STATUS_POSITIVE
            for label, status in record.observations
            if label != NO_FINDING
        )
        for col, label in enumerate(OBSERVATIONS):
            status = mentioned.get(label)
            if label == NO_FINDING:
                # Always detected; derive the status when the record omits it.
                detect[row, col] = 1.0
                if status is None:
                    status = STATUS_POSITIVE if not any_pos else None
            if status is None:
                continue
            detect[row, col] = 1.0
            classify[row, col] = 1.0 if status == STATUS_POSITIVE else 0.0
        if record.is_follow_up:
            follow_up[row] = 1.0
            for col, prog in enumerate(PROGRESSIONS):
                progression[row, col] = 1.0 if prog in record.progressions else 0.0
    return Stage1Labels(detect, classify, progression, follow_up)


@dataclass
class Stage1Loss:
    detection: Tensor
    classification: Tensor
    progression: Tensor
    total: Tensor


def _log(p: Tensor) -> Tensor:
    return torch.log(p.clamp(min=_LOG_EPS))


def stage1_loss(
    p_d: Tensor,
    p_c: Tensor,
    p_prog: Tensor,
    labels: Stage1Labels,
    alpha_d: float,
) -> Stage1Loss:
    """Weighted detection BCE + masked classification BCE + progression BCE.

    Detection scales only the positive term by ``alpha_d`` and averages over
    all observations. Classification averages over detected observations
    only. Progression averages over follow-up rows only and is zero for a
    batch without any.
    """
    if alpha_d <= 0:
        raise ValueError(f"alpha_d must be > 0, got {alpha_d}")
    l_d, l_c = labels.detect, labels.classify
    detection = -(alpha_d * l_d * _log(p_d) + (1.0 - l_d) * _log(1.0 - p_d))
    detection = detection.mean(dim=-1).mean()

    classify_terms = -(l_c * _log(p_c) + (1.0 - l_c) * _log(1.0 - p_c))
    detected = l_d.sum(dim=-1).clamp(min=1.0)
    classification = ((classify_terms * l_d).sum(dim=-1) / detected).mean()

    l_p = labels.progression
    prog_terms = -(l_p * _log(p_prog) + (1.0 - l_p) * _log(1.0 - p_prog))
    per_row = prog_terms.mean(dim=-1) * labels.follow_up
    n_follow_ups = labels.follow_up.sum()
    if n_follow_ups.item() > 0:
        progression = per_row.sum() / n_follow_ups
    else:
        progression = p_prog.sum() * 0.0
    total = detection + classification + progression
    return Stage1Loss(detection, classification, progression, total)


def select_predicted_context(
    p: Tensor, p_c: Tensor, threshold: float = 0.5
) -> list[tuple[str, str]]:
    """Observations crossing the threshold, in canonical order, with status.

    Falls back to the single highest-scoring observation when nothing
    crosses. Status is POS when the classification probability is >= 0.5.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if p.dim() != 1 or p.shape[0] != len(OBSERVATIONS):
        raise ValueError(f"expected a ({len(OBSERVATIONS)},) score vector")
    keep = [i for i in range(len(OBSERVATIONS)) if p[i].item() >= threshold]
    if not keep:
        keep = [int(torch.argmax(p).item())]
    return [
        (
            OBSERVATIONS[i],
            STATUS_POSITIVE if p_c[i].item() >= 0.5 else STATUS_NEGATIVE,
        )
        for i in keep
    ]


def select_predicted_progressions(
    p_prog: Tensor, threshold: float = 0.5
) -> tuple[str, ...]:
    """Progression labels whose probability crosses the threshold."""
    return tuple(
        prog for i, prog in enumerate(PROGRESSIONS) if p_prog[i].item() >= threshold
    )


__all__ = [
    "ObservationHeads",
    "ProgressionHead",
    "Stage1Labels",
    "Stage1Loss",
    "Stage1Model",
    "build_stage1_labels",
    "predict_observations",
    "predict_progressions",
    "select_predicted_context",
    "select_predicted_progressions",
    "stage1_loss",
]
