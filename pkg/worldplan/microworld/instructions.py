"""Instruction grammar of the microworld: templates, kinds and misleading variants."""

import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

# Route-bound kinds end at a scripted arc length; "stop" ends on the light/standstill.
ROUTE_KINDS = ("follow", "straight", "left", "right")
NOTICE_KINDS = ("stop",)
DISTRACTOR_KINDS = ("lane_left", "lane_right", "uturn")
KINDS = ROUTE_KINDS + NOTICE_KINDS + DISTRACTOR_KINDS

TEMPLATES: Dict[str, Tuple[str, ...]] = {
    "follow": (
        "follow the lane",
        "keep driving along this road",
        "continue along the current road",
    ),
    "straight": (
        "go straight at the next intersection",
        "drive straight through the next intersection",
    ),
    "left": (
        "turn left at the next intersection",
        "take a left turn at the next intersection",
    ),
    "right": (
        "turn right at the next intersection",
        "take a right turn at the next intersection",
    ),
    "stop": (
        "stop at the red light",
        "wait for the green light",
    ),
    "lane_left": ("change to the left lane",),
    "lane_right": ("change to the right lane",),
    "uturn": ("make a u turn here",),
}

PREFIXES = ("", "please", "now")
SUFFIXES = ("", "carefully")


@dataclass(frozen=True)
class Instruction:
    """A natural-language command plus the semantics the simulator checks it by."""

    text: str
    kind: str
    misleading: bool = False
    end_s: Optional[float] = None
    start_s: float = 0.0

    def to_dict(self) -> dict:
        """Return a JSON-ready mapping."""
        return {
            "text": self.text,
            "kind": self.kind,
            "misleading": self.misleading,
            "end_s": self.end_s,
            "start_s": self.start_s,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Instruction":
        """Build an instruction from `to_dict` output."""
        end_s = data.get("end_s")
        return cls(
            text=data["text"],
            kind=data["kind"],
            misleading=bool(data.get("misleading", False)),
            end_s=None if end_s is None else float(end_s),
            start_s=float(data.get("start_s", 0.0)),
        )


def phrase(kind: str, variant: int = 0, prefix: str = "", suffix: str = "") -> str:
    """Return the sentence for `kind` with optional politeness/adverb words."""
    if kind not in TEMPLATES:
        raise ValueError(f"Unknown instruction kind '{kind}'")
    body = TEMPLATES[kind][variant % len(TEMPLATES[kind])]
    return " ".join(part for part in (prefix, body, suffix) if part)


def all_sentences() -> List[str]:
    """Enumerate every sentence the grammar can produce."""
    sentences = []
    for kind in KINDS:
        for body, prefix, suffix in itertools.product(
            TEMPLATES[kind], PREFIXES, SUFFIXES
        ):
            sentences.append(" ".join(part for part in (prefix, body, suffix) if part))
    return sentences


def grammar_words() -> List[str]:
    """Return the sorted set of words used by the grammar."""
    return sorted({word for sentence in all_sentences() for word in sentence.split()})


def kind_of(text: str) -> str:
    """Recover the instruction kind of a grammar sentence."""
    words = [w for w in text.split() if w not in PREFIXES and w not in SUFFIXES]
    core = " ".join(words)
    for kind, bodies in TEMPLATES.items():
        if core in bodies:
            return kind
    raise ValueError(f"'{text}' is not a grammar sentence")
