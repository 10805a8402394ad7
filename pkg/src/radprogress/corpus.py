"""Corpus ingest, visit linking, tokenization, and vocabulary.

The on-disk corpus is JSONL, one visit per line::

    {"subject_id": "s0007", "study_id": "s0007-e02", "study_order": 2,
     "split": "train", "image": "grid64:48x32:...", "report": "...",
     "observations": [{"label": "Edema", "status": "POS"}, ...],
     "progressions": ["Worse"]}

``image`` is either an inline grayscale grid (``grid64:HxW:<base64>``) or a
path to an image file, resolved relative to the corpus file. Statuses accept
both normalized (``POS``/``NEG``) and raw (``Positive``/``Negative``/
``Uncertain``/``Blank``) spellings; ``Uncertain`` maps to positive and
``Blank`` drops the mention.

Prior visits are never stored in the file; :func:`link_prior_visits` resolves
them from ``(subject_id, study_order)`` after the split-leakage check.
"""

from __future__ import annotations

import base64
import dataclasses
import io
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .constants import (
    BOS_TOKEN,
    CLS_TOKEN,
    EOS_TOKEN,
    FIRST_VISIT_TOKEN,
    FOLLOW_UP_TOKEN,
    NEG_TOKEN,
    OBSERVATIONS,
    OBSERVATION_TOKENS,
    PAD_TOKEN,
    POS_TOKEN,
    PROGRESSIONS,
    RAW_STATUS_MAP,
    SPECIAL_TOKENS,
    STATUSES,
    STATUS_POSITIVE,
    UNK_TOKEN,
)

PARTITIONS = ("train", "validation", "test")

_TOKEN_RE = re.compile(r"[\w']+|[.,!?;:]")
_GRID_RE = re.compile(r"^grid64:(\d+)x(\d+):(.*)$", re.DOTALL)


class CorpusFormatError(ValueError):
    """Structurally broken input: bad JSON, missing keys, wrong types."""


class CorpusValidationError(ValueError):
    """Well-formed input with illegal content: unknown labels, leakage, ties."""


def normalize_observation_status(raw: str) -> str | None:
    """Map a raw status spelling to POS/NEG, or None when the mention drops.

    Raises :class:`CorpusValidationError` for spellings outside the accepted
    set.
    """
    if raw not in RAW_STATUS_MAP:
        raise CorpusValidationError(
            f"unknown observation status {raw!r}; expected one of "
            f"{sorted(RAW_STATUS_MAP)}"
        )
    return RAW_STATUS_MAP[raw]


def tokenize_report(text: str) -> list[str]:
    """Lowercase and split a report into word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class VisitRecord:
    """One imaging visit: image reference, report, labels, optional prior."""

    subject_id: str
    study_id: str
    study_order: int
    split: str
    image_ref: str
    report: str
    observations: tuple[tuple[str, str], ...]
    progressions: tuple[str, ...]
    prior: "VisitRecord | None" = None

    @property
    def is_follow_up(self) -> bool:
        return self.prior is not None

    def status_of(self, label: str) -> str | None:
        for obs_label, status in self.observations:
            if obs_label == label:
                return status
        return None

    def positive_observations(self) -> tuple[tuple[str, str], ...]:
        """Positive-status subset of the mentions.

        This is what observation selection yields from perfect predictions
        (a thresholded p = p_d * p_c can only pass positives), so it is also
        the gold-side observation context for teacher forcing.
        """
        return tuple(
            (label, status)
            for label, status in self.observations
            if status == STATUS_POSITIVE
        )

    def report_tokens(self) -> list[str]:
        return tokenize_report(self.report)


@dataclass(frozen=True)
class CorpusSplit:
    """Train/validation/test partitions of visit records."""

    train: tuple[VisitRecord, ...]
    validation: tuple[VisitRecord, ...]
    test: tuple[VisitRecord, ...]

    def partition(self, name: str) -> tuple[VisitRecord, ...]:
        if name not in PARTITIONS:
            raise KeyError(f"unknown partition {name!r}")
        return getattr(self, name)

    def all_records(self) -> Iterator[VisitRecord]:
        yield from self.train
        yield from self.validation
        yield from self.test

    def __len__(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)


def _canonical_observations(
    raw_obs: Iterable[dict], where: str
) -> tuple[tuple[str, str], ...]:
    seen: dict[str, str] = {}
    for entry in raw_obs:
        if not isinstance(entry, dict) or "label" not in entry or "status" not in entry:
            raise CorpusFormatError(
                f"{where}: each observation needs 'label' and 'status' keys"
            )
        label, raw_status = entry["label"], entry["status"]
        if label not in OBSERVATIONS:
            raise CorpusValidationError(
                f"{where}: unknown observation label {label!r}; expected one of "
                f"{list(OBSERVATIONS)}"
            )
        status = normalize_observation_status(raw_status)
        if status is None:
            continue
        if label in seen:
            raise CorpusValidationError(f"{where}: duplicate observation label {label!r}")
        seen[label] = status
    return tuple((label, seen[label]) for label in OBSERVATIONS if label in seen)


def _canonical_progressions(raw: Iterable, where: str) -> tuple[str, ...]:
    items = list(raw)
    for p in items:
        if p not in PROGRESSIONS:
            raise CorpusValidationError(
                f"{where}: unknown progression {p!r}; expected subset of "
                f"{list(PROGRESSIONS)}"
            )
    if len(set(items)) != len(items):
        raise CorpusValidationError(f"{where}: duplicate progression labels")
    return tuple(p for p in PROGRESSIONS if p in items)


def parse_record(obj: dict, where: str = "record") -> VisitRecord:
    """Validate one decoded JSON object and build an unlinked VisitRecord."""
    required = {
        "subject_id": str,
        "study_id": str,
        "study_order": int,
        "split": str,
        "image": str,
        "report": str,
        "observations": list,
        "progressions": list,
    }
    for key, typ in required.items():
        if key not in obj:
            raise CorpusFormatError(f"{where}: missing key {key!r}")
        if not isinstance(obj[key], typ) or isinstance(obj[key], bool):
            raise CorpusFormatError(
                f"{where}: key {key!r} must be {typ.__name__}, got "
                f"{type(obj[key]).__name__}"
            )
    if obj["split"] not in PARTITIONS:
        raise CorpusValidationError(
            f"{where}: unknown split {obj['split']!r}; expected one of {list(PARTITIONS)}"
        )
    return VisitRecord(
        subject_id=obj["subject_id"],
        study_id=obj["study_id"],
        study_order=obj["study_order"],
        split=obj["split"],
        image_ref=obj["image"],
        report=obj["report"],
        observations=_canonical_observations(obj["observations"], where),
        progressions=_canonical_progressions(obj["progressions"], where),
    )


def ingest_corpus(path: str | Path) -> CorpusSplit:
    """Read a JSONL corpus into partitions. Priors stay unresolved.

    Raises :class:`CorpusFormatError` with a 1-based line number for broken
    lines and :class:`CorpusValidationError` for illegal content.
    """
    parts: dict[str, list[VisitRecord]] = {p: [] for p in PARTITIONS}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{where}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise CorpusFormatError(f"{where}: expected a JSON object")
            record = parse_record(obj, where=where)
            parts[record.split].append(record)
    return CorpusSplit(
        train=tuple(parts["train"]),
        validation=tuple(parts["validation"]),
        test=tuple(parts["test"]),
    )


def link_prior_visits(split: CorpusSplit) -> CorpusSplit:
    """Resolve each record's prior visit within its subject.

    Enforces: subjects never span partitions (no leakage), ``(subject_id,
    study_order)`` is unique, and the earliest visit of a subject carries no
    progression labels.
    """
    subject_partition: dict[str, str] = {}
    for part in PARTITIONS:
        for record in split.partition(part):
            prev = subject_partition.get(record.subject_id)
            if prev is not None and prev != part:
                raise CorpusValidationError(
                    f"subject {record.subject_id!r} appears in both {prev!r} and "
                    f"{part!r} partitions"
                )
            subject_partition[record.subject_id] = part

    def link_partition(records: tuple[VisitRecord, ...]) -> tuple[VisitRecord, ...]:
        by_subject: dict[str, list[VisitRecord]] = {}
        for record in records:
            by_subject.setdefault(record.subject_id, []).append(record)
        linked: dict[str, VisitRecord] = {}
        for subject, visits in by_subject.items():
            orders = [v.study_order for v in visits]
            if len(set(orders)) != len(orders):
                dupes = sorted({o for o in orders if orders.count(o) > 1})
                raise CorpusValidationError(
                    f"subject {subject!r} has duplicate study_order values {dupes}"
                )
            prior: VisitRecord | None = None
            for visit in sorted(visits, key=lambda v: v.study_order):
                if prior is None and visit.progressions:
                    raise CorpusValidationError(
                        f"first visit {visit.study_id!r} of subject {subject!r} "
                        "carries progression labels"
                    )
                current = dataclasses.replace(visit, prior=prior)
                linked[visit.study_id] = current
                prior = current
        # Preserve corpus order within the partition.
        return tuple(linked[record.study_id] for record in records)

    return CorpusSplit(
        train=link_partition(split.train),
        validation=link_partition(split.validation),
        test=link_partition(split.test),
    )


def record_to_obj(record: VisitRecord) -> dict:
    """Serialize one record to the JSONL schema (prior link not stored)."""
    return {
        "subject_id": record.subject_id,
        "study_id": record.study_id,
        "study_order": record.study_order,
        "split": record.split,
        "image": record.image_ref,
        "report": record.report,
        "observations": [
            {"label": label, "status": status} for label, status in record.observations
        ],
        "progressions": list(record.progressions),
    }


def write_corpus_jsonl(split: CorpusSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in split.all_records():
            fh.write(json.dumps(record_to_obj(record), sort_keys=False))
            fh.write("\n")


def encode_image_grid(pixels: np.ndarray) -> str:
    """Pack a uint8 grayscale image into an inline ``grid64:HxW:...`` string."""
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-d grayscale array, got shape {pixels.shape}")
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    payload = base64.b64encode(arr.tobytes()).decode("ascii")
    return f"grid64:{arr.shape[0]}x{arr.shape[1]}:{payload}"


def decode_image_ref(image_ref: str, base_dir: str | Path | None = None) -> np.ndarray:
    """Resolve an image reference to a float32 array in [0, 1], shape (H, W).

    Inline ``grid64:`` strings decode directly; anything else is treated as a
    file path (grayscale-converted), resolved against ``base_dir`` when given.
    """
    match = _GRID_RE.match(image_ref)
    if match is not None:
        height, width = int(match.group(1)), int(match.group(2))
        try:
            raw = base64.b64decode(match.group(3), validate=True)
        except Exception as exc:
            raise CorpusFormatError(f"invalid grid64 payload: {exc}") from exc
        if len(raw) != height * width:
            raise CorpusFormatError(
                f"grid64 payload holds {len(raw)} bytes, expected {height * width}"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
        return arr.astype(np.float32) / 255.0
    path = Path(image_ref)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


class Vocabulary:
    """Token/id table with a fixed reserved block.

    Ids 0..8 are the special tokens ([PAD], [BOS], [EOS], [UNK], [FiV],
    [FoV], [CLS], [POS], [NEG]); the next 14 are the observation surface
    tokens; corpus tokens follow, ordered by (count desc, token asc) at build
    time. Unknown tokens encode to [UNK].
    """

    RESERVED: tuple[str, ...] = SPECIAL_TOKENS + tuple(
        OBSERVATION_TOKENS[label] for label in OBSERVATIONS
    )

    def __init__(self, corpus_tokens: Sequence[str] = ()):
        tokens = list(self.RESERVED)
        for tok in corpus_tokens:
            if tok in self.RESERVED:
                continue
            tokens.append(tok)
        if len(set(tokens)) != len(tokens):
            raise CorpusValidationError("vocabulary holds duplicate tokens")
        self._tokens: tuple[str, ...] = tuple(tokens)
        self._ids: dict[str, int] = {tok: i for i, tok in enumerate(self._tokens)}

    @classmethod
    def build(
        cls, token_sequences: Iterable[Sequence[str]], min_count: int = 1
    ) -> "Vocabulary":
        if min_count < 1:
            raise ValueError(f"min_count must be >= 1, got {min_count}")
        counts: Counter[str] = Counter()
        for seq in token_sequences:
            counts.update(seq)
        kept = [
            tok
            for tok, cnt in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
            if cnt >= min_count and tok not in cls.RESERVED
        ]
        return cls(kept)

    @classmethod
    def from_corpus(cls, records: Iterable[VisitRecord], min_count: int = 1) -> "Vocabulary":
        return cls.build((r.report_tokens() for r in records), min_count=min_count)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and other._tokens == self._tokens

    def id_of(self, token: str) -> int:
        if token not in self._ids:
            raise KeyError(f"token {token!r} not in vocabulary")
        return self._ids[token]

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise IndexError(f"token id {token_id} out of range 0..{len(self._tokens) - 1}")
        return self._tokens[token_id]

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    @property
    def pad_id(self) -> int:
        return self._ids[PAD_TOKEN]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS_TOKEN]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS_TOKEN]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK_TOKEN]

    @property
    def first_visit_id(self) -> int:
        return self._ids[FIRST_VISIT_TOKEN]

    @property
    def follow_up_id(self) -> int:
        return self._ids[FOLLOW_UP_TOKEN]

    @property
    def cls_id(self) -> int:
        return self._ids[CLS_TOKEN]

    @property
    def pos_id(self) -> int:
        return self._ids[POS_TOKEN]

    @property
    def neg_id(self) -> int:
        return self._ids[NEG_TOKEN]

    def observation_token_id(self, label: str) -> int:
        return self._ids[OBSERVATION_TOKENS[label]]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.unk_id
        return [self._ids.get(tok, unk) for tok in tokens]

    def decode(self, ids: Sequence[int], strip_special: bool = False) -> list[str]:
        toks = [self.token_of(i) for i in ids]
        if strip_special:
            drop = {PAD_TOKEN, BOS_TOKEN, EOS_TOKEN}
            toks = [t for t in toks if t not in drop]
        return toks

    def encode_report(self, text: str) -> list[int]:
        """Encode a raw report with [BOS]/[EOS] framing."""
        return [self.bos_id, *self.encode(tokenize_report(text)), self.eos_id]

    def to_json(self) -> str:
        n_reserved = len(self.RESERVED)
        return json.dumps({"corpus_tokens": list(self._tokens[n_reserved:])})

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        obj = json.loads(payload)
        if not isinstance(obj, dict) or "corpus_tokens" not in obj:
            raise CorpusFormatError("vocabulary JSON needs a 'corpus_tokens' key")
        return cls(obj["corpus_tokens"])


__all__ = [
    "PARTITIONS",
    "CorpusFormatError",
    "CorpusValidationError",
    "CorpusSplit",
    "VisitRecord",
    "Vocabulary",
    "decode_image_ref",
    "encode_image_grid",
    "ingest_corpus",
    "link_prior_visits",
    "normalize_observation_status",
    "parse_record",
    "record_to_obj",
    "tokenize_report",
    "write_corpus_jsonl",
]
