"""Text supervision: metadata templates and a word-level tokenizer.

Templates turn music metadata into a sentence, e.g. the default
``"a song of {genre}, belongs to {tag}, whose style is {style}"``. A
dataset rarely carries every field, so :func:`restrict_template` removes
the placeholders that are missing and drops any comma-separated clause
left without a placeholder of its own.

Sentences are tokenized into ``[SOS] w1 ... wk [EOS] [PAD]...`` id
sequences over a deterministic word vocabulary.
"""
from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import TemplateError, UsageError

PAD, SOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("[PAD]", "[SOS]", "[EOS]", "[UNK]")

DEFAULT_TEMPLATE = "a song of {genre}, belongs to {tag}, whose style is {style}"
DEFAULT_MAX_LEN = 32

_WHITESPACE_RE = re.compile(r"\s+")
_STRIP_RE = re.compile(r"[^a-z0-9 \-]")


def normalize_text(text: str) -> str:
    """Lowercase, drop characters outside ``[a-z0-9 -]`` and collapse spaces."""
    text = _WHITESPACE_RE.sub(" ", text.lower())
    return " ".join(_STRIP_RE.sub("", text).split())


def words(text: str) -> List[str]:
    return normalize_text(text).split()


@dataclass(frozen=True)
class Vocab:
    """Token to id map; ids 0-3 are the reserved special tokens."""

    tokens: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise UsageError("vocabulary must start with the reserved tokens")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise UsageError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]


def build_vocab(
    corpus: Sequence[str], min_count: int = 1, max_size: Optional[int] = None
) -> Vocab:
    """Word vocabulary ordered by descending frequency, then lexicographically."""
    if not corpus:
        raise UsageError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(words(text))
    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_count and tok not in RESERVED_TOKENS),
        key=lambda tok: (-counts[tok], tok),
    )
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(RESERVED_TOKENS))]
    return Vocab(RESERVED_TOKENS + tuple(ranked))


@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    max_len: int

    @property
    def eos_index(self) -> int:
        return self.ids.index(EOS)

    @property
    def length(self) -> int:
        """Number of non-pad positions, brackets included."""
        return self.eos_index + 1


def tokenize(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    if max_len < 3:
        raise UsageError(f"max_len must be at least 3, got {max_len}")
    body = [vocab.id_of(tok) for tok in words(text)][: max_len - 2]
    ids = [SOS, *body, EOS]
    ids.extend([PAD] * (max_len - len(ids)))
    return TokenSequence(tuple(ids), max_len)


def detokenize(seq: TokenSequence, vocab: Vocab) -> str:
    """Inverse of :func:`tokenize` for in-vocabulary text."""
    body = seq.ids[1 : seq.eos_index]
    return " ".join(vocab.token_of(i) for i in body)


@dataclass(frozen=True)
class TemplateSpec:
    """A text pattern with ``{field}`` placeholders.

    ``raw=True`` is the "no template" variant: the field values are simply
    joined with spaces in the order they are given.
    """

    template: str
    raw: bool = False
    required_fields: FrozenSet[str] = field(init=False, compare=False)
    _pieces: Tuple[Tuple[str, Optional[str]], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        pieces: List[Tuple[str, Optional[str]]] = []
        if not self.raw:
            try:
                parsed = list(string.Formatter().parse(self.template))
            except ValueError as e:
                raise TemplateError(f"malformed template {self.template!r}: {e}") from None
            for literal, name, spec, conversion in parsed:
                if name is not None:
                    if not name.isidentifier():
                        raise TemplateError(
                            f"placeholder {{{name}}} in {self.template!r} is not a field name"
                        )
                    if spec or conversion:
                        raise TemplateError(
                            f"placeholder {{{name}}} may not carry a format spec or conversion"
                        )
                pieces.append((literal, name))
        object.__setattr__(self, "_pieces", tuple(pieces))
        object.__setattr__(
            self, "required_fields", frozenset(n for _lit, n in pieces if n is not None)
        )

    @classmethod
    def no_template(cls) -> "TemplateSpec":
        return cls("", raw=True)

    @property
    def label(self) -> str:
        return "No template" if self.raw else self.template


NO_TEMPLATE = TemplateSpec.no_template()

# The four variants compared in the template study, best one last.
STUDY_TEMPLATES: Dict[str, TemplateSpec] = {
    "no-template": NO_TEMPLATE,
    "tags-for": TemplateSpec("tags for the {genre} music is {tag}"),
    "characterized-by": TemplateSpec("the {genre} music is characterized by {tag}"),
    "default": TemplateSpec(DEFAULT_TEMPLATE),
}


def render_template(spec: TemplateSpec, fields: Mapping[str, str]) -> str:
    """Substitute every placeholder verbatim; all other text is untouched."""
    if spec.raw:
        return " ".join(str(v) for v in fields.values() if str(v))
    missing = sorted(spec.required_fields - set(fields))
    if missing:
        raise TemplateError(f"missing field for placeholder {{{missing[0]}}}")
    out = []
    for literal, name in spec._pieces:
        out.append(literal)
        if name is not None:
            out.append(str(fields[name]))
    return "".join(out)


def _escape(literal: str) -> str:
    return literal.replace("{", "{{").replace("}", "}}")


def restrict_template(spec: TemplateSpec, available: Iterable[str]) -> TemplateSpec:
    """Rewrite ``spec`` so it only needs the ``available`` fields.

    Missing placeholders are removed. A comma-separated clause that loses
    all of its placeholders is dropped as a whole; clauses that never had
    one are kept.
    """
    if spec.raw:
        return spec
    have = set(available)
    if spec.required_fields <= have:
        return spec
    clauses: List[List[Tuple[str, Optional[str]]]] = [[]]
    for literal, name in spec._pieces:
        parts = literal.split(",")
        clauses[-1].append((parts[0], None))
        for part in parts[1:]:
            clauses.append([(part, None)])
        if name is not None:
            clauses[-1].append(("", name))
    kept: List[str] = []
    for clause in clauses:
        names = [n for _lit, n in clause if n is not None]
        present = [n for n in names if n in have]
        if names and not present:
            continue
        text = "".join(
            _escape(lit) if n is None else ("{" + n + "}" if n in have else "")
            for lit, n in clause
        )
        kept.append(text)
    rebuilt = re.sub(r" {2,}", " ", ",".join(kept)).strip(" ,")
    restricted = TemplateSpec(rebuilt)
    if not restricted.required_fields:
        missing = ", ".join(sorted(spec.required_fields - have))
        raise TemplateError(f"template {spec.template!r} has no usable field (missing {missing})")
    return restricted


def render_available(spec: TemplateSpec, fields: Mapping[str, str]) -> str:
    """Render with whatever non-empty fields are present, dropping the rest."""
    present = {k: v for k, v in fields.items() if str(v)}
    if spec.raw:
        return render_template(spec, present)
    return render_template(restrict_template(spec, present), present)


def class_prompts(spec: TemplateSpec, classes: Sequence[Mapping[str, str]]) -> List[str]:
    prompts = []
    for i, fields in enumerate(classes):
        try:
            prompts.append(render_template(spec, fields))
        except TemplateError as e:
            raise TemplateError(f"class {i}: {e}") from None
    return prompts
