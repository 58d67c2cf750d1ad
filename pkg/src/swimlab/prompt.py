"""Rule-based prompt refinement: placeholder replacement and noun tagging.

Prompts are whitespace-tokenized strings; one word is one token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

PAD, BOS, REGION, INS_OPEN, INS_CLOSE = "<pad>", "<bos>", "<region>", "<ins>", "</ins>"
RESERVED = (PAD, BOS, REGION, INS_OPEN, INS_CLOSE)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
TEXTURES = ("plain", "striped", "dotted")

DEFAULT_TEMPLATES = (
    "what texture is <region> ?",
    "which pattern does <region> have ?",
    "tell me the texture of <region> .",
)

DEFAULT_SYNONYMS: dict[str, tuple[str, ...]] = {
    "circle": ("disk", "ring"),
    "square": ("box", "block"),
    "triangle": ("wedge", "pyramid"),
}


class Vocabulary:
    """Bijective token <-> id map. Reserved tokens always take ids 0..4."""

    def __init__(self, tokens: Sequence[str] = ()):
        self._tokens: list[str] = []
        self._ids: dict[str, int] = {}
        for tok in RESERVED:
            self._add(tok)
        for tok in tokens:
            if tok not in self._ids:
                self._add(tok)

    def _add(self, tok: str) -> None:
        if not tok or any(ch.isspace() for ch in tok):
            raise ValueError(f"invalid token {tok!r}")
        self._ids[tok] = len(self._tokens)
        self._tokens.append(tok)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self._ids

    def id(self, tok: str) -> int:
        try:
            return self._ids[tok]
        except KeyError:
            raise ValueError(f"out-of-vocabulary word {tok!r}") from None

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    def to_json(self) -> str:
        return json.dumps({tok: i for i, tok in enumerate(self._tokens)})

    @classmethod
    def from_json(cls, text: str) -> Vocabulary:
        mapping = json.loads(text)
        ordered = sorted(mapping.items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(len(ordered))):
            raise ValueError("vocabulary ids must be 0..n-1 without gaps")
        if tuple(tok for tok, _ in ordered[: len(RESERVED)]) != RESERVED:
            raise ValueError("reserved tokens missing or reordered")
        return cls([tok for tok, _ in ordered[len(RESERVED) :]])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens


def default_vocabulary(
    templates: Sequence[str] = DEFAULT_TEMPLATES,
    synonyms: Mapping[str, Sequence[str]] = DEFAULT_SYNONYMS,
) -> Vocabulary:
    words = ["the", *TEXTURES, *COLORS, *SHAPES]
    for syns in synonyms.values():
        for s in syns:
            words.extend(s.split())
    for t in templates:
        words.extend(w for w in t.split() if w not in RESERVED)
    return Vocabulary(words)


@dataclass(frozen=True)
class SynonymTable:
    table: Mapping[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_SYNONYMS))

    def lookup(self, noun: str) -> tuple[str, ...]:
        """Interchangeable alternatives for ``noun``; a synonym also maps back to its head noun."""
        if noun in self.table:
            return tuple(self.table[noun])
        for head, syns in self.table.items():
            if noun in syns:
                return (head, *(s for s in syns if s != noun))
        return ()

    def canonical(self, word: str) -> str:
        """Map a synonym back to the noun it stands for (identity otherwise)."""
        for noun, syns in self.table.items():
            if word == noun or word in syns:
                return noun
        return word


@dataclass(frozen=True)
class PromptRecord:
    raw_human: str
    response: Mapping[str, str]
    referring_expr: str
    noun: str
    refined_human: str
    noun_span: tuple[int, int]


# ---------------------------------------------------------------- NL-Refer-lite

_ATTRIBUTE_ORDER = ("texture", "color")


def _matches(obj: Mapping[str, str], attrs: Mapping[str, str]) -> bool:
    return all(obj[k] == v for k, v in attrs.items())


def nlref_lite(
    response: Mapping[str, str], scene_objects: Sequence[Mapping[str, str]] | None = None
) -> tuple[str, str]:
    """Shortest phrase ``the [texture] [color] shape`` that picks out one object.

    ``scene_objects`` are attribute dicts of every object in the scene, the
    target included. Subsets are tried by size; at equal size color wins
    over texture. Returns ``(expression, noun)`` with the shape as noun.
    """
    if "shape" not in response or "color" not in response:
        raise ValueError("response needs at least shape and color")
    objects = list(scene_objects) if scene_objects is not None else [response]
    candidates = [(), ("color",), ("texture",), ("texture", "color")]
    for extra in candidates:
        if any(k not in response for k in extra):
            continue
        attrs = {k: response[k] for k in ("shape", *extra)}
        if sum(_matches(o, attrs) for o in objects) == 1:
            words = ["the", *(response[k] for k in _ATTRIBUTE_ORDER if k in extra), response["shape"]]
            return " ".join(words), response["shape"]
    raise ValueError("ambiguous referent")


def replace_placeholder(raw_human: str, referring_expr: str) -> tuple[str, tuple[int, int]]:
    """Swap the single ``<region>`` token for the expression.

    Returns the new prompt and the half-open word range the expression
    occupies in it, so the noun can be tagged inside that range only.
    """
    words = raw_human.split()
    hits = [i for i, w in enumerate(words) if w == REGION]
    if len(hits) != 1:
        raise ValueError(f"expected exactly one {REGION}, found {len(hits)}")
    at = hits[0]
    expr = referring_expr.split()
    out = words[:at] + expr + words[at + 1 :]
    return " ".join(out), (at, at + len(expr))


def mark_noun(prompt: str, noun: str, within: tuple[int, int] | None = None) -> str:
    """Wrap the first occurrence of ``noun`` inside ``within`` with ``<ins> ... </ins>``."""
    words = prompt.split()
    target = noun.split()
    if not target:
        raise ValueError("empty noun")
    lo, hi = within if within is not None else (0, len(words))
    n = len(target)
    for i in range(lo, hi - n + 1):
        if words[i : i + n] == target:
            out = words[:i] + [INS_OPEN, *target, INS_CLOSE] + words[i + n :]
            return " ".join(out)
    raise ValueError(f"noun {noun!r} not found in prompt")


def tokenize_and_locate(refined: str, vocab: Vocabulary) -> tuple[list[int], tuple[int, int]]:
    """Token ids with the tag markers stripped, plus the inclusive span of the tagged words."""
    ids: list[int] = []
    start = end = None
    for w in refined.split():
        if w == INS_OPEN:
            if start is not None:
                raise ValueError("unbalanced markers")
            start = len(ids)
        elif w == INS_CLOSE:
            if start is None or end is not None:
                raise ValueError("unbalanced markers")
            end = len(ids) - 1
        else:
            ids.append(vocab.id(w))
    if start is None and end is None:
        raise ValueError("no tagged noun")
    if start is None or end is None or end < start:
        raise ValueError("unbalanced markers")
    return ids, (start, end)


def perturb_synonyms(refined: str, synonyms: SynonymTable, rng) -> tuple[str, bool]:
    """Replace the tagged noun with a random synonym.

    Returns ``(prompt, changed)``; ``changed`` is False when no synonym exists.
    """
    words = refined.split()
    try:
        lo = words.index(INS_OPEN)
        hi = words.index(INS_CLOSE)
    except ValueError:
        raise ValueError("no tagged noun") from None
    noun = " ".join(words[lo + 1 : hi])
    options = synonyms.lookup(noun)
    if not options:
        return refined, False
    pick = options[rng.choice(len(options))]
    out = words[: lo + 1] + pick.split() + words[hi:]
    return " ".join(out), True


def refine(raw_human: str, response: Mapping[str, str], scene_objects, vocab: Vocabulary) -> PromptRecord:
    """Full pipeline: expression, replacement, tagging, tokenization."""
    expr, noun = nlref_lite(response, scene_objects)
    replaced, span = replace_placeholder(raw_human, expr)
    refined = mark_noun(replaced, noun, within=span)
    _, noun_span = tokenize_and_locate(refined, vocab)
    return PromptRecord(raw_human, dict(response), expr, noun, refined, noun_span)
