"""Fixed label sets, relation names, and lexicons shared across the package.

Everything here is data, not behavior: the canonical observation list (order
matters, head indices and report sentence order both follow it), the three
progression labels, the typed-edge relation names, reserved vocabulary tokens,
and the temporal/spatial entity lexicons used to mine the knowledge graph.
"""

from __future__ import annotations

# Canonical observation labels. Index in this tuple == head index everywhere.
OBSERVATIONS: tuple[str, ...] = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Lesion",
    "Lung Opacity",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)

NO_FINDING = "No Finding"
NO_FINDING_INDEX = OBSERVATIONS.index(NO_FINDING)

# Single-token surface form of each label, used in reports, vocabulary and
# graph nodes. Single tokens keep observation token blocks unambiguous.
OBSERVATION_TOKENS: dict[str, str] = {
    label: label.lower().replace(" ", "_") for label in OBSERVATIONS
}
TOKEN_TO_OBSERVATION: dict[str, str] = {v: k for k, v in OBSERVATION_TOKENS.items()}

STATUS_POSITIVE = "POS"
STATUS_NEGATIVE = "NEG"
STATUSES: tuple[str, ...] = (STATUS_POSITIVE, STATUS_NEGATIVE)

# Raw status spellings accepted on ingest. Blank means "drop the mention".
RAW_STATUS_MAP: dict[str, str | None] = {
    "POS": STATUS_POSITIVE,
    "NEG": STATUS_NEGATIVE,
    "Positive": STATUS_POSITIVE,
    "Negative": STATUS_NEGATIVE,
    "Uncertain": STATUS_POSITIVE,
    "Blank": None,
}

PROGRESSIONS: tuple[str, ...] = ("Better", "Stable", "Worse")

# Relation names on typed graph edges, in fixed order (message-passing weights
# are indexed by position in this tuple).
REL_STABLE = "S"
REL_BETTER = "B"
REL_WORSE = "W"
REL_SPATIAL = "R_S"
REL_OBS = "R_O"
RELATIONS: tuple[str, ...] = (REL_STABLE, REL_BETTER, REL_WORSE, REL_SPATIAL, REL_OBS)
TEMPORAL_RELATIONS: tuple[str, ...] = (REL_STABLE, REL_BETTER, REL_WORSE)

PROGRESSION_TO_RELATION: dict[str, str] = {
    "Better": REL_BETTER,
    "Stable": REL_STABLE,
    "Worse": REL_WORSE,
}
RELATION_TO_PROGRESSION: dict[str, str] = {v: k for k, v in PROGRESSION_TO_RELATION.items()}

PRIOR_SIDE = "prior"
CURRENT_SIDE = "current"
SIDES: tuple[str, ...] = (PRIOR_SIDE, CURRENT_SIDE)

# Reserved vocabulary tokens, always present at fixed ids.
PAD_TOKEN = "[PAD]"
BOS_TOKEN = "[BOS]"
EOS_TOKEN = "[EOS]"
UNK_TOKEN = "[UNK]"
FIRST_VISIT_TOKEN = "[FiV]"
FOLLOW_UP_TOKEN = "[FoV]"
CLS_TOKEN = "[CLS]"
POS_TOKEN = "[POS]"
NEG_TOKEN = "[NEG]"
SPECIAL_TOKENS: tuple[str, ...] = (
    PAD_TOKEN,
    BOS_TOKEN,
    EOS_TOKEN,
    UNK_TOKEN,
    FIRST_VISIT_TOKEN,
    FOLLOW_UP_TOKEN,
    CLS_TOKEN,
    POS_TOKEN,
    NEG_TOKEN,
)

# Words that describe change over time. Graph temporal-entity candidates.
TEMPORAL_LEXICON: tuple[str, ...] = (
    "bigger",
    "change",
    "cleared",
    "constant",
    "decrease",
    "decreased",
    "decreasing",
    "elevated",
    "elevation",
    "enlarged",
    "enlargement",
    "enlarging",
    "expanded",
    "greater",
    "growing",
    "improved",
    "improvement",
    "improving",
    "increase",
    "increased",
    "increasing",
    "larger",
    "new",
    "persistence",
    "persistent",
    "persisting",
    "progression",
    "progressive",
    "reduced",
    "removal",
    "resolution",
    "resolved",
    "resolving",
    "smaller",
    "stability",
    "stable",
    "stably",
    "unaltered",
    "unchanged",
    "unfolded",
    "worse",
    "worsen",
    "worsened",
    "worsening",
)

# Words that describe appearance or location. Graph spatial-entity candidates.
SPATIAL_LEXICON: tuple[str, ...] = (
    "healed",
    "fractured",
    "healing",
    "nondisplaced",
    "top",
    "size",
    "heart",
    "normal",
    "mediastinum",
    "widening",
    "contour",
    "widened",
    "consolidative",
    "collapse",
    "underlying",
    "developing",
    "fibrosis",
    "thickening",
    "biapical",
    "blunting",
    "indistinctness",
    "asymmetrical",
    "haziness",
    "asymmetric",
    "layering",
    "subpulmonic",
    "thoracentesis",
    "trace",
    "small",
    "adjacent",
    "tiny",
    "atypical",
    "supervening",
    "multifocal",
    "correct",
    "superimposed",
    "patchy",
    "borderline",
)
