"""Decoding and report-quality metrics.

BLEU follows the corpus-level MS-COCO convention: clipped n-gram precision
totals pooled over the corpus, uniform weights on the geometric mean, brevity
penalty exp(1 - r/c) when the candidate corpus is shorter than the reference
corpus. ROUGE-L is the LCS F-measure with beta = 1.2, averaged over samples.
Clinical efficacy labels generated and reference reports with a pluggable
labeler and compares per-observation positives; the temporal score compares
the sets of change-lexicon words per sample.

Metric tokenization is deliberately dumber than model tokenization:
lowercase whitespace tokens with edge punctuation stripped.

Greedy decoding takes the argmax at every step; ties break toward the lowest
token id, so decoding is deterministic given parameters. Beam search keeps
``beam_size`` running prefixes ranked by total log-probability (ties broken
by token sequence), expanding until [EOS] or the step limit.
"""

from __future__ import annotations

import json
import math
import string
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .config import ModelConfig
from .constants import (
    NO_FINDING,
    OBSERVATIONS,
    STATUS_POSITIVE,
    TEMPORAL_LEXICON,
)
from .corpus import VisitRecord, Vocabulary, decode_image_ref
from .graph import ProgressionGraph
from .stage1 import (
    Stage1Model,
    select_predicted_context,
    select_predicted_progressions,
)
from .stage2 import (
    ReportGenerator,
    Stage2Example,
    build_stage2_example,
    collate_stage2,
    mix_distributions,
)

_STRIP = string.punctuation + string.whitespace


def metric_tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokens with edge punctuation stripped."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP)
        if tok:
            tokens.append(tok)
    return tokens


def _as_token_lists(reports: Sequence) -> list[list[str]]:
    out = []
    for item in reports:
        if isinstance(item, str):
            out.append(metric_tokenize(item))
        else:
            out.append(list(item))
    return out


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence, references: Sequence, n: int = 4) -> float:
    """Corpus BLEU-n with uniform weights and brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError(f"n must lie in 1..4, got {n}")
    if len(references) == 0:
        raise ValueError("reference set is empty")
    if len(candidates) != len(references):
        raise ValueError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    cands = _as_token_lists(candidates)
    refs = _as_token_lists(references)
    clipped = [0] * n
    totals = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(cands, refs):
        cand_len += len(cand)
        ref_len += len(ref)
        for k in range(1, n + 1):
            cand_counts = _ngram_counts(cand, k)
            ref_counts = _ngram_counts(ref, k)
            totals[k - 1] += max(len(cand) - k + 1, 0)
            clipped[k - 1] += sum(
                min(count, ref_counts[gram]) for gram, count in cand_counts.items()
            )
    if any(t == 0 for t in totals) or any(c == 0 for c in clipped):
        return 0.0
    log_precision = sum(math.log(c / t) for c, t in zip(clipped, totals)) / n
    if cand_len > ref_len:
        brevity = 1.0
    else:
        brevity = math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidates: Sequence, references: Sequence, beta: float = 1.2) -> float:
    """Mean LCS-based F-measure over samples."""
    if len(references) == 0:
        raise ValueError("reference set is empty")
    if len(candidates) != len(references):
        raise ValueError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    cands = _as_token_lists(candidates)
    refs = _as_token_lists(references)
    scores = []
    for cand, ref in zip(cands, refs):
        lcs = _lcs_length(cand, ref)
        if lcs == 0:
            scores.append(0.0)
            continue
        precision = lcs / len(cand)
        recall = lcs / len(ref)
        scores.append(
            (1 + beta**2) * precision * recall / (recall + beta**2 * precision)
        )
    return sum(scores) / len(scores)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # A class that never occurs and is never predicted is vacuously perfect.
    if tp == fp == fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (
        2 * precision * recall / (precision + recall) if precision + recall else 0.0
    )
    return precision, recall, f1


@dataclass
class CEResult:
    per_observation: dict[str, tuple[float, float, float]]
    macro: tuple[float, float, float]
    n_skipped: int


def ce_f1(
    generated: Sequence[str],
    references: Sequence[str],
    labeler: Callable[[str], Sequence[tuple[str, str]]],
) -> CEResult:
    """Clinical efficacy: positive-observation P/R/F1 via a report labeler.

    Samples where the labeler raises on either report are skipped and
    counted. Macro values are the plain mean over the 14 observations.
    """
    if len(candidates := list(generated)) != len(references):
        raise ValueError(
            f"{len(candidates)} generated reports vs {len(references)} references"
        )
    tp = Counter()
    fp = Counter()
    fn = Counter()
    skipped = 0
    for gen, ref in zip(candidates, references):
        try:
            gen_pos = {
                label for label, status in labeler(gen) if status == STATUS_POSITIVE
            }
            ref_pos = {
                label for label, status in labeler(ref) if status == STATUS_POSITIVE
            }
        except Exception:
            skipped += 1
            continue
        for label in OBSERVATIONS:
            in_gen, in_ref = label in gen_pos, label in ref_pos
            if in_gen and in_ref:
                tp[label] += 1
            elif in_gen:
                fp[label] += 1
            elif in_ref:
                fn[label] += 1
    per_obs = {
        label: _prf(tp[label], fp[label], fn[label]) for label in OBSERVATIONS
    }
    macro = tuple(
        sum(values[i] for values in per_obs.values()) / len(OBSERVATIONS)
        for i in range(3)
    )
    return CEResult(per_observation=per_obs, macro=macro, n_skipped=skipped)


def tem(
    generated: Sequence[str],
    references: Sequence[str],
    temporal_lexicon: Sequence[str] = TEMPORAL_LEXICON,
) -> tuple[float, float, float]:
    """Temporal-set precision/recall/F1, averaged over samples whose
    reference mentions at least one lexicon word."""
    if len(temporal_lexicon) == 0:
        raise ValueError("temporal lexicon is empty")
    if len(generated) != len(references):
        raise ValueError(
            f"{len(generated)} generated reports vs {len(references)} references"
        )
    lexicon = set(temporal_lexicon)
    precisions: list[float] = []
    recalls: list[float] = []
    f1s: list[float] = []
    for gen, ref in zip(generated, references):
        gen_set = set(metric_tokenize(gen) if isinstance(gen, str) else gen) & lexicon
        ref_set = set(metric_tokenize(ref) if isinstance(ref, str) else ref) & lexicon
        if not ref_set:
            continue
        overlap = len(gen_set & ref_set)
        precision = overlap / len(gen_set) if gen_set else 0.0
        recall = overlap / len(ref_set)
        f1 = (
            2 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    if not recalls:
        return 0.0, 0.0, 0.0
    n = len(recalls)
    return sum(precisions) / n, sum(recalls) / n, sum(f1s) / n


@dataclass
class MetricsReport:
    bleu: tuple[float, float, float, float]
    rouge_l: float
    ce: CEResult
    tem: tuple[float, float, float]
    n_samples: int

    def to_obj(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "bleu": {f"bleu{i + 1}": v for i, v in enumerate(self.bleu)},
            "rouge_l": self.rouge_l,
            "ce": {
                "macro": {
                    "precision": self.ce.macro[0],
                    "recall": self.ce.macro[1],
                    "f1": self.ce.macro[2],
                },
                "per_observation": {
                    label: {"precision": p, "recall": r, "f1": f}
                    for label, (p, r, f) in self.ce.per_observation.items()
                },
                "skipped": self.ce.n_skipped,
            },
            "tem": {
                "precision": self.tem[0],
                "recall": self.tem[1],
                "f1": self.tem[2],
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("BLEU-1", self.bleu[0]),
            ("BLEU-2", self.bleu[1]),
            ("BLEU-3", self.bleu[2]),
            ("BLEU-4", self.bleu[3]),
            ("ROUGE-L", self.rouge_l),
            ("CE precision", self.ce.macro[0]),
            ("CE recall", self.ce.macro[1]),
            ("CE F1", self.ce.macro[2]),
            ("TEM precision", self.tem[0]),
            ("TEM recall", self.tem[1]),
            ("TEM F1", self.tem[2]),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"samples: {self.n_samples}"]
        lines += [f"{name.ljust(width)}  {value:.4f}" for name, value in rows]
        return "\n".join(lines)


def compute_metrics(
    generated: Sequence[str],
    references: Sequence[str],
    labeler: Callable[[str], Sequence[tuple[str, str]]],
    temporal_lexicon: Sequence[str] = TEMPORAL_LEXICON,
) -> MetricsReport:
    return MetricsReport(
        bleu=tuple(bleu(generated, references, n) for n in (1, 2, 3, 4)),
        rouge_l=rouge_l(generated, references),
        ce=ce_f1(generated, references, labeler),
        tem=tem(generated, references, temporal_lexicon),
        n_samples=len(references),
    )


def predict_record_context(
    stage1_model: Stage1Model | None,
    record: VisitRecord,
    cfg: ModelConfig,
    image_root=None,
) -> tuple[list[tuple[str, str]], tuple[str, ...]]:
    """Stage-1 predictions for one record: (observation pairs, progressions).

    Without a stage-1 model both come back empty (ablations that train
    without stage 1).
    """
    if stage1_model is None:
        return [], ()
    was_training = stage1_model.training
    stage1_model.eval()
    try:
        with torch.no_grad():
            image = torch.from_numpy(decode_image_ref(record.image_ref, image_root))
            _, p_c, p = stage1_model.observation_probs(image.unsqueeze(0))
            obs_pairs = select_predicted_context(
                p[0], p_c[0], threshold=cfg.obs_threshold
            )
            progressions: tuple[str, ...] = ()
            if record.prior is not None:
                prior_image = torch.from_numpy(
                    decode_image_ref(record.prior.image_ref, image_root)
                )
                p_prog = stage1_model.progression_probs(
                    prior_image.unsqueeze(0), image.unsqueeze(0)
                )
                progressions = select_predicted_progressions(
                    p_prog[0], threshold=cfg.prog_threshold
                )
    finally:
        if was_training:
            stage1_model.train()
    return obs_pairs, progressions


def build_inference_example(
    record: VisitRecord,
    generator: ReportGenerator,
    stage1_model: Stage1Model | None,
    graph: ProgressionGraph,
    image_root=None,
) -> Stage2Example:
    obs_pairs, progressions = predict_record_context(
        stage1_model, record, generator.cfg, image_root
    )
    return build_stage2_example(
        record,
        generator.vocab,
        generator.cfg,
        graph,
        obs_pairs,
        progressions,
        image_root=image_root,
        include_target=False,
    )


@dataclass
class _GraphCache:
    node_emb: torch.Tensor | None
    entity_pos: list[int]
    entity_ids: list[int]


def _prepare_graph_cache(
    generator: ReportGenerator, example: Stage2Example
) -> _GraphCache:
    subgraph = example.subgraph
    if not generator.use_graph or not subgraph.entity_indices():
        return _GraphCache(None, [], [])
    node_emb = generator.rgcn(subgraph, generator.node_embeddings(subgraph))
    entity_pos = subgraph.entity_indices()
    entity_ids = [subgraph.nodes[i].token_id for i in entity_pos]
    return _GraphCache(node_emb, entity_pos, entity_ids)


def _mixed_step_distribution(
    generator: ReportGenerator,
    hidden_last: torch.Tensor,
    p_v_last: torch.Tensor,
    example: Stage2Example,
    cache: _GraphCache,
) -> torch.Tensor:
    if cache.node_emb is None:
        p, _ = mix_distributions(
            p_v_last, p_v_last.new_zeros(0), hidden_last, generator.mixture_gate, []
        )
        return p
    p_g, _ = generator.reasoner(hidden_last, cache.node_emb, example.subgraph)
    p, _ = mix_distributions(
        p_v_last, p_g, hidden_last, generator.mixture_gate, cache.entity_ids
    )
    return p


def greedy_decode(
    generator: ReportGenerator,
    examples: Sequence[Stage2Example],
    max_steps: int,
) -> list[list[int]]:
    """Batched greedy decoding; returns generated ids without [BOS]/[EOS]."""
    vocab = generator.vocab
    batch = collate_stage2(examples, vocab.pad_id)
    with torch.no_grad():
        h_c, c_mask, h_p, p_mask = generator.encode_contexts(batch)
        caches = [_prepare_graph_cache(generator, e) for e in examples]
        n = len(examples)
        prefix = torch.full((n, 1), vocab.bos_id, dtype=torch.long)
        finished = torch.zeros(n, dtype=torch.bool)
        outputs: list[list[int]] = [[] for _ in range(n)]
        for _ in range(max_steps):
            hidden, logits, _ = generator.decoder(
                prefix, None, h_c, c_mask, h_p, p_mask
            )
            p_v = torch.softmax(logits[:, -1], dim=-1)
            next_ids = []
            for b in range(n):
                if finished[b]:
                    next_ids.append(vocab.pad_id)
                    continue
                p = _mixed_step_distribution(
                    generator, hidden[b, -1], p_v[b], examples[b], caches[b]
                )
                token = int(torch.argmax(p).item())
                next_ids.append(token)
                if token == vocab.eos_id:
                    finished[b] = True
                else:
                    outputs[b].append(token)
            prefix = torch.cat(
                [prefix, torch.tensor(next_ids, dtype=torch.long).unsqueeze(1)], dim=1
            )
            if bool(finished.all()):
                break
    return outputs


def beam_decode(
    generator: ReportGenerator,
    example: Stage2Example,
    max_steps: int,
    beam_size: int,
) -> list[int]:
    """Beam search for one example; returns generated ids without framing."""
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    vocab = generator.vocab
    batch = collate_stage2([example], vocab.pad_id)
    with torch.no_grad():
        h_c, c_mask, h_p, p_mask = generator.encode_contexts(batch)
        cache = _prepare_graph_cache(generator, example)
        beams: list[tuple[float, list[int], bool]] = [(0.0, [vocab.bos_id], False)]
        for _ in range(max_steps):
            if all(done for _, _, done in beams):
                break
            expanded: list[tuple[float, list[int], bool]] = []
            for score, ids, done in beams:
                if done:
                    expanded.append((score, ids, done))
                    continue
                prefix = torch.tensor(ids, dtype=torch.long).unsqueeze(0)
                hidden, logits, _ = generator.decoder(
                    prefix, None, h_c, c_mask, h_p, p_mask
                )
                p_v = torch.softmax(logits[0, -1], dim=-1)
                p = _mixed_step_distribution(
                    generator, hidden[0, -1], p_v, example, cache
                )
                log_p = torch.log(p.clamp(min=1e-12))
                top = torch.topk(log_p, min(beam_size, log_p.shape[-1]))
                for value, token in zip(top.values.tolist(), top.indices.tolist()):
                    expanded.append(
                        (score + value, ids + [token], token == vocab.eos_id)
                    )
            expanded.sort(key=lambda item: (-item[0], item[1]))
            beams = expanded[:beam_size]
        best = beams[0]
    ids = best[1][1:]
    if ids and ids[-1] == vocab.eos_id:
        ids = ids[:-1]
    return ids


def decode_report(
    generator: ReportGenerator,
    record: VisitRecord,
    graph: ProgressionGraph,
    stage1_model: Stage1Model | None = None,
    max_steps: int | None = None,
    mode: str = "greedy",
    beam_size: int = 4,
    image_root=None,
) -> list[str]:
    """Generate one report as a token list (special tokens stripped)."""
    if mode not in ("greedy", "beam"):
        raise ValueError(f"mode must be 'greedy' or 'beam', got {mode!r}")
    generator.eval()
    steps = generator.cfg.max_steps if max_steps is None else max_steps
    example = build_inference_example(
        record, generator, stage1_model, graph, image_root
    )
    if mode == "greedy":
        ids = greedy_decode(generator, [example], steps)[0]
    else:
        ids = beam_decode(generator, example, steps, beam_size)
    return generator.vocab.decode(ids, strip_special=True)


def decode_reports(
    generator: ReportGenerator,
    records: Sequence[VisitRecord],
    graph: ProgressionGraph,
    stage1_model: Stage1Model | None = None,
    max_steps: int | None = None,
    mode: str = "greedy",
    beam_size: int = 4,
    batch_size: int = 16,
    image_root=None,
) -> list[list[str]]:
    """Generate reports for many records (greedy runs batched)."""
    generator.eval()
    steps = generator.cfg.max_steps if max_steps is None else max_steps
    vocab = generator.vocab
    outputs: list[list[str]] = []
    if mode == "beam":
        for record in records:
            outputs.append(
                decode_report(
                    generator,
                    record,
                    graph,
                    stage1_model,
                    steps,
                    "beam",
                    beam_size,
                    image_root,
                )
            )
        return outputs
    examples = [
        build_inference_example(record, generator, stage1_model, graph, image_root)
        for record in records
    ]
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        for ids in greedy_decode(generator, chunk, steps):
            outputs.append(vocab.decode(ids, strip_special=True))
    return outputs


def evaluate_records(
    generator: ReportGenerator,
    records: Sequence[VisitRecord],
    graph: ProgressionGraph,
    labeler: Callable[[str], Sequence[tuple[str, str]]],
    stage1_model: Stage1Model | None = None,
    max_steps: int | None = None,
    mode: str = "greedy",
    beam_size: int = 4,
    batch_size: int = 16,
    image_root=None,
    temporal_lexicon: Sequence[str] = TEMPORAL_LEXICON,
) -> tuple[MetricsReport, list[str]]:
    """Decode a record list and score it; returns (report, generated texts)."""
    generated_tokens = decode_reports(
        generator,
        records,
        graph,
        stage1_model=stage1_model,
        max_steps=max_steps,
        mode=mode,
        beam_size=beam_size,
        batch_size=batch_size,
        image_root=image_root,
    )
    generated = [" ".join(tokens) for tokens in generated_tokens]
    references = [record.report for record in records]
    report = compute_metrics(generated, references, labeler, temporal_lexicon)
    return report, generated


__all__ = [
    "CEResult",
    "MetricsReport",
    "beam_decode",
    "bleu",
    "build_inference_example",
    "ce_f1",
    "compute_metrics",
    "decode_report",
    "decode_reports",
    "evaluate_records",
    "greedy_decode",
    "metric_tokenize",
    "predict_record_context",
    "rouge_l",
    "tem",
]
