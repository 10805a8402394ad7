"""Synthetic desk-scale corpus generator with an exact oracle labeler.

Records mimic longitudinal chest X-ray studies. Images are small grayscale
grids: one 8x8 cell per observation (background / negative / positive
intensity plus pixel jitter) and three change bands that flip intensity
between consecutive visits exactly when the matching progression label
(Better/Stable/Worse) is present. A band's absolute value is randomized on
the first visit, so a single image says nothing about progression; the flip
is only visible when prior and current images are compared.

Reports are templated, one sentence per mentioned observation in canonical
order. Negative mentions use a "no <token>" pattern, positive mentions pick a
location word from a per-observation slice of the spatial lexicon, and
positive mentions on follow-up visits usually append a change word drawn from
a per-(observation, progression) slice of that progression's word pool. The
slices give (observation, progression, word) co-occurrence real structure to
mine, and make change wording unpredictable without the prior visit.

``label_report_observations`` inverts the templates exactly: an observation
token preceded by "no" is negative, any other mention is positive.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .constants import (
    NO_FINDING,
    OBSERVATIONS,
    OBSERVATION_TOKENS,
    PROGRESSIONS,
    SPATIAL_LEXICON,
    STATUS_NEGATIVE,
    STATUS_POSITIVE,
    TOKEN_TO_OBSERVATION,
)
from .corpus import (
    CorpusSplit,
    VisitRecord,
    encode_image_grid,
    link_prior_visits,
    tokenize_report,
)

SUPPORT_DEVICES = "Support Devices"
DISEASE_LABELS: tuple[str, ...] = tuple(
    label for label in OBSERVATIONS if label not in (NO_FINDING, SUPPORT_DEVICES)
)

# (presence rate, positive-given-present rate) per sampled label. No Finding
# is derived: positive exactly when no disease label is positive.
DEFAULT_OBSERVATION_MARGINALS: dict[str, tuple[float, float]] = {
    "Enlarged Cardiomediastinum": (0.662, 0.278),
    "Cardiomegaly": (0.576, 0.452),
    "Lung Lesion": (0.051, 0.856),
    "Lung Opacity": (0.280, 0.893),
    "Edema": (0.313, 0.390),
    "Consolidation": (0.412, 0.129),
    "Pneumonia": (0.170, 0.521),
    "Atelectasis": (0.254, 0.992),
    "Pneumothorax": (0.735, 0.044),
    "Pleural Effusion": (0.842, 0.250),
    "Pleural Other": (0.027, 0.991),
    "Fracture": (0.076, 0.535),
    "Support Devices": (0.227, 0.982),
}

# Per-label rates on follow-up visits; an empty draw falls back to Stable.
DEFAULT_PROGRESSION_RATES: dict[str, float] = {
    "Better": 0.229,
    "Stable": 0.647,
    "Worse": 0.280,
}

PROGRESSION_WORD_POOLS: dict[str, tuple[str, ...]] = {
    "Better": (
        "improved", "improving", "decreased", "decreasing", "resolving",
        "cleared", "resolved", "smaller", "reduced", "improvement",
        "resolution", "decrease",
    ),
    "Stable": (
        "stable", "unchanged", "constant", "persistent", "stably",
        "stability", "persisting", "persistence", "unaltered",
    ),
    "Worse": (
        "worse", "worsened", "worsening", "increased", "increasing",
        "enlarging", "larger", "bigger", "greater", "new", "progression",
        "progressive", "enlarged", "growing",
    ),
}

BACKGROUND_VALUE = 40
NEGATIVE_VALUE = 110
POSITIVE_VALUE = 210
BAND_OFF_VALUE = 40
BAND_ON_VALUE = 210


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for one generated corpus. Same spec + seed -> identical bytes."""

    n_records: int
    follow_up_ratio: float = 0.24
    seed: int = 0
    image_height: int = 48
    image_width: int = 32
    cell_size: int = 8
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    pixel_noise: int = 12
    band_noise: int = 5
    temporal_mention_rate: float = 0.9
    observation_marginals: dict[str, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_OBSERVATION_MARGINALS)
    )
    progression_rates: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_PROGRESSION_RATES)
    )

    def validate(self) -> None:
        if self.n_records < 1:
            raise ValueError(f"n_records must be >= 1, got {self.n_records}")
        if not 0.0 <= self.follow_up_ratio < 1.0:
            raise ValueError(
                f"follow_up_ratio must lie in [0, 1), got {self.follow_up_ratio}"
            )
        if round(self.follow_up_ratio * self.n_records) >= self.n_records:
            raise ValueError("follow_up_ratio leaves no room for first visits")
        if any(f < 0 for f in self.split_fractions) or not np.isclose(
            sum(self.split_fractions), 1.0
        ):
            raise ValueError(
                f"split_fractions must be non-negative and sum to 1, got "
                f"{self.split_fractions}"
            )
        if self.image_height % self.cell_size or self.image_width % self.cell_size:
            raise ValueError(
                f"image size {self.image_height}x{self.image_width} not divisible "
                f"by cell_size {self.cell_size}"
            )
        n_cells = (self.image_height // self.cell_size) * (
            self.image_width // self.cell_size
        )
        if n_cells < len(OBSERVATIONS) + len(PROGRESSIONS):
            raise ValueError(
                f"grid has {n_cells} cells, needs at least "
                f"{len(OBSERVATIONS) + len(PROGRESSIONS)}"
            )
        unknown = set(self.observation_marginals) - set(OBSERVATIONS)
        if unknown or NO_FINDING in self.observation_marginals:
            raise ValueError(
                "observation_marginals must cover sampled labels only "
                f"(No Finding is derived); offending keys: "
                f"{sorted(unknown | ({NO_FINDING} & set(self.observation_marginals)))}"
            )


def spatial_word_choices(obs_index: int) -> tuple[str, ...]:
    """The 3 location words a given observation prefers in reports."""
    n = len(SPATIAL_LEXICON)
    start = (3 * obs_index) % n
    return tuple(SPATIAL_LEXICON[(start + j) % n] for j in range(3))


def temporal_word_choices(obs_index: int, progression: str) -> tuple[str, ...]:
    """The 3 change words an (observation, progression) pair prefers."""
    pool = PROGRESSION_WORD_POOLS[progression]
    start = (2 * obs_index) % len(pool)
    return tuple(pool[(start + j) % len(pool)] for j in range(3))


def _weighted_choice(rng: random.Random, options: tuple[str, ...]) -> str:
    r = rng.random()
    if r < 0.6:
        return options[0]
    if r < 0.85:
        return options[1]
    return options[2]


def _sample_observations(
    rng: random.Random, marginals: dict[str, tuple[float, float]]
) -> tuple[tuple[str, str], ...]:
    statuses: dict[str, str] = {}
    for label in OBSERVATIONS:
        if label == NO_FINDING or label not in marginals:
            continue
        present_rate, pos_rate = marginals[label]
        if rng.random() < present_rate:
            statuses[label] = (
                STATUS_POSITIVE if rng.random() < pos_rate else STATUS_NEGATIVE
            )
    any_disease_pos = any(
        statuses.get(label) == STATUS_POSITIVE for label in DISEASE_LABELS
    )
    statuses[NO_FINDING] = STATUS_NEGATIVE if any_disease_pos else STATUS_POSITIVE
    return tuple(
        (label, statuses[label]) for label in OBSERVATIONS if label in statuses
    )


def _sample_progressions(
    rng: random.Random, rates: dict[str, float]
) -> tuple[str, ...]:
    chosen = [p for p in PROGRESSIONS if rng.random() < rates.get(p, 0.0)]
    if not chosen:
        chosen = ["Stable"]
    return tuple(chosen)


def _render_report(
    rng: random.Random,
    observations: tuple[tuple[str, str], ...],
    progressions: tuple[str, ...],
    temporal_mention_rate: float,
) -> str:
    sentences: list[str] = []
    for label, status in observations:
        token = OBSERVATION_TOKENS[label]
        obs_index = OBSERVATIONS.index(label)
        if status == STATUS_NEGATIVE:
            if label == NO_FINDING:
                continue
            sentence = (
                f"there is no {token}" if rng.random() < 0.5 else f"no {token} is seen"
            )
        else:
            spatial = _weighted_choice(rng, spatial_word_choices(obs_index))
            temporal = None
            if progressions and rng.random() < temporal_mention_rate:
                progression = progressions[rng.randrange(len(progressions))]
                temporal = _weighted_choice(
                    rng, temporal_word_choices(obs_index, progression)
                )
            if rng.random() < 0.5:
                sentence = f"there is {spatial} {token}"
                if temporal is not None:
                    sentence += f" which is {temporal}"
            else:
                sentence = f"{spatial} {token} is seen"
                if temporal is not None:
                    sentence += f" , {temporal}"
        sentences.append(sentence)
    return " . ".join(sentences) + " ."


def _render_image(
    spec: SyntheticSpec,
    rng: random.Random,
    observations: tuple[tuple[str, str], ...],
    band_states: list[bool],
) -> str:
    cell = spec.cell_size
    cols = spec.image_width // cell
    noise_seed = rng.getrandbits(63)
    noise_rng = np.random.Generator(np.random.PCG64(noise_seed))
    img = np.full(
        (spec.image_height, spec.image_width), BACKGROUND_VALUE, dtype=np.int16
    )
    status_by_label = dict(observations)
    for obs_index, label in enumerate(OBSERVATIONS):
        status = status_by_label.get(label)
        if status is None:
            continue
        value = POSITIVE_VALUE if status == STATUS_POSITIVE else NEGATIVE_VALUE
        r, c = divmod(obs_index, cols)
        img[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell] = value
    for band_index, on in enumerate(band_states):
        cell_index = len(OBSERVATIONS) + band_index
        r, c = divmod(cell_index, cols)
        img[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell] = (
            BAND_ON_VALUE if on else BAND_OFF_VALUE
        )
    noise = noise_rng.integers(
        -spec.pixel_noise, spec.pixel_noise + 1, size=img.shape, dtype=np.int16
    )
    img = np.clip(img + noise, 0, 255).astype(np.uint8)
    return encode_image_grid(img)


def generate_synthetic_corpus(spec: SyntheticSpec) -> CorpusSplit:
    """Generate a linked corpus. Deterministic given a SyntheticSpec."""
    spec.validate()
    rng = random.Random(spec.seed)
    n = spec.n_records
    n_follow_ups = round(spec.follow_up_ratio * n)
    n_subjects = n - n_follow_ups

    visit_counts = [1] * n_subjects
    for _ in range(n_follow_ups):
        visit_counts[rng.randrange(n_subjects)] += 1

    subjects: list[list[dict]] = []
    for subject_index, count in enumerate(visit_counts):
        subject_id = f"p{subject_index:05d}"
        band_states = [rng.random() < 0.5 for _ in PROGRESSIONS]
        visits: list[dict] = []
        for order in range(1, count + 1):
            observations = _sample_observations(rng, spec.observation_marginals)
            if order == 1:
                progressions: tuple[str, ...] = ()
            else:
                progressions = _sample_progressions(rng, spec.progression_rates)
                for band_index, progression in enumerate(PROGRESSIONS):
                    if progression in progressions:
                        band_states[band_index] = not band_states[band_index]
            visits.append(
                dict(
                    subject_id=subject_id,
                    study_id=f"{subject_id}-v{order:02d}",
                    study_order=order,
                    image_ref=_render_image(spec, rng, observations, band_states),
                    report=_render_report(
                        rng, observations, progressions, spec.temporal_mention_rate
                    ),
                    observations=observations,
                    progressions=progressions,
                )
            )
        subjects.append(visits)

    order = list(range(n_subjects))
    rng.shuffle(order)
    train_target = round(spec.split_fractions[0] * n)
    val_target = round(spec.split_fractions[1] * n)
    parts: dict[str, list[VisitRecord]] = {"train": [], "validation": [], "test": []}
    placed = {"train": 0, "validation": 0}
    for subject_index in order:
        visits = subjects[subject_index]
        if placed["train"] < train_target:
            part = "train"
        elif placed["validation"] < val_target:
            part = "validation"
        else:
            part = "test"
        if part in placed:
            placed[part] += len(visits)
        for visit in visits:
            parts[part].append(VisitRecord(split=part, **visit))

    for part in parts:
        parts[part].sort(key=lambda r: (r.subject_id, r.study_order))
    split = CorpusSplit(
        train=tuple(parts["train"]),
        validation=tuple(parts["validation"]),
        test=tuple(parts["test"]),
    )
    return link_prior_visits(split)


def label_report_observations(report: str) -> list[tuple[str, str]]:
    """Recover (label, status) pairs from a templated report, exactly.

    An observation token preceded by the token "no" is negative; any other
    mention is positive. First mention wins. Output follows canonical
    observation order. Works on any text (unknown words are ignored), which
    makes it usable as a clinical-correctness labeler for generated reports.
    """
    tokens = tokenize_report(report)
    found: dict[str, str] = {}
    for i, tok in enumerate(tokens):
        label = TOKEN_TO_OBSERVATION.get(tok)
        if label is None or label in found:
            continue
        negated = i > 0 and tokens[i - 1] == "no"
        found[label] = STATUS_NEGATIVE if negated else STATUS_POSITIVE
    return [(label, found[label]) for label in OBSERVATIONS if label in found]


__all__ = [
    "DEFAULT_OBSERVATION_MARGINALS",
    "DEFAULT_PROGRESSION_RATES",
    "DISEASE_LABELS",
    "PROGRESSION_WORD_POOLS",
    "SyntheticSpec",
    "generate_synthetic_corpus",
    "label_report_observations",
    "spatial_word_choices",
    "temporal_word_choices",
]
