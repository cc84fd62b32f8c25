"""Annotation vocabulary shared by the data pipeline and the conditioning encoders."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

NUM_INSTRUMENTS = 6
NUM_VERBS = 10
NUM_TARGETS = 15
NUM_PHASES = 7
MAX_TRIPLETS_PER_FRAME = 3
UNDEFINED = -1

# CholecT50 naming; the last verb and target are the "null" classes.
INSTRUMENTS = ("grasper", "bipolar", "hook", "scissors", "clipper", "irrigator")
VERBS = ("grasp", "retract", "dissect", "coagulate", "clip", "cut", "aspirate", "irrigate", "pack", "null_verb")
TARGETS = (
    "gallbladder", "cystic_plate", "cystic_duct", "cystic_artery", "cystic_pedicle",
    "blood_vessel", "fluid", "abdominal_wall_cavity", "liver", "adhesion",
    "omentum", "peritoneum", "gut", "specimen_bag", "null_target",
)
NO_ACTION_VERBS = frozenset({9})


class ActionTriplet(NamedTuple):
    """(instrument, verb, target) ids.  ``-1`` in any slot marks an undefined element."""

    instrument: int
    verb: int
    target: int

    @property
    def is_defined(self) -> bool:
        return (
            0 <= self.instrument < NUM_INSTRUMENTS
            and 0 <= self.verb < NUM_VERBS
            and 0 <= self.target < NUM_TARGETS
        )

    def validate(self) -> "ActionTriplet":
        if not self.is_defined:
            raise ValueError(
                f"triplet {tuple(self)} out of range "
                f"(instrument<{NUM_INSTRUMENTS}, verb<{NUM_VERBS}, target<{NUM_TARGETS})"
            )
        return self

    @classmethod
    def coerce(cls, value) -> "ActionTriplet":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            value = [int(v) for v in value.replace(" ", "").split(",")]
        i, v, t = (int(x) for x in value)
        return cls(i, v, t)


@dataclass(frozen=True)
class FrameAnnotation:
    triplets: tuple = ()
    phase: int = 0

    def __post_init__(self):
        trips = tuple(ActionTriplet.coerce(t) for t in self.triplets)
        if len(trips) > MAX_TRIPLETS_PER_FRAME:
            raise ValueError(f"a frame carries at most {MAX_TRIPLETS_PER_FRAME} triplets, got {len(trips)}")
        if not 0 <= self.phase < NUM_PHASES:
            raise ValueError(f"phase {self.phase} outside [0, {NUM_PHASES})")
        object.__setattr__(self, "triplets", trips)

    def defined_triplets(self) -> frozenset:
        """Triplets with every element defined; sentinel-bearing entries count as empty."""
        return frozenset(t for t in self.triplets if t.is_defined)

    def to_json(self) -> dict:
        return {"triplets": [list(t) for t in self.triplets], "phase": self.phase}


DEFAULT_LEXICON = {
    "instrument": list(INSTRUMENTS),
    "verb": list(VERBS),
    "target": list(TARGETS),
}


def load_lexicon(path) -> dict:
    """Read an id->word lexicon JSON (lists or ``{"0": word}`` maps per slot)."""
    raw = json.loads(Path(path).read_text())
    lex = {}
    for slot, size in (("instrument", NUM_INSTRUMENTS), ("verb", NUM_VERBS), ("target", NUM_TARGETS)):
        entry = raw.get(slot)
        if entry is None:
            raise KeyError(f"lexicon has no {slot!r} section")
        if isinstance(entry, dict):
            entry = [entry.get(str(i)) for i in range(size)]
        missing = [i for i in range(size) if i >= len(entry) or not entry[i]]
        if missing:
            raise KeyError(f"lexicon {slot!r} lacks words for ids {missing}")
        lex[slot] = list(entry[:size])
    return lex


def save_lexicon(lexicon: dict, path) -> None:
    payload = {slot: {str(i): w for i, w in enumerate(words)} for slot, words in lexicon.items()}
    Path(path).write_text(json.dumps(payload, indent=2))


def caption(triplet: ActionTriplet, lexicon: dict = DEFAULT_LEXICON) -> Sequence[str]:
    """Render ``<instrument> <verb> <target>`` as three word tokens."""
    triplet = ActionTriplet.coerce(triplet).validate()
    try:
        return (
            lexicon["instrument"][triplet.instrument],
            lexicon["verb"][triplet.verb],
            lexicon["target"][triplet.target],
        )
    except (KeyError, IndexError) as exc:
        raise KeyError(f"lexicon has no entry for {tuple(triplet)}") from exc
