"""Unified token space for every task: words, coordinate bins, classes and specials.

Ids are dense. The three specials occupy the lowest ids in the fixed order
``[PAD]=0``, ``[M]=1``, ``[BOS]=2``; words follow, then ``B`` consecutive
coordinate tokens for bins ``0..B-1``, then class tokens.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Union

from diffscene.core.errors import (
    FormatError,
    RangeError,
    TokenKindError,
    VocabularyError,
)
from diffscene.core.logging import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

PAD = "[PAD]"
MASK = "[M]"
BOS = "[BOS]"
SPECIALS: tuple[str, ...] = (PAD, MASK, BOS)
PAD_ID, MASK_ID, BOS_ID = 0, 1, 2

# ---------------------------------------------------------------------------
# Default grammar
# ---------------------------------------------------------------------------

OBJECT_CLASSES: tuple[str, ...] = ("airplane", "ship", "vehicle", "storage-tank", "building")
SCENE_CLASSES: tuple[str, ...] = ("airport", "harbor", "parking-lot", "industrial", "residential")
ATTRIBUTE_WORDS: tuple[str, ...] = ("white", "gray", "red", "yellow", "blue", "green")
COUNT_WORDS: tuple[str, ...] = ("zero", "one", "two", "three", "four", "five", "six")
TASK_WORDS: tuple[str, ...] = ("caption", "detect", "ground", "classify", "count")
EMPTY_WORD = "empty"

DEFAULT_COORD_BINS = 100


class TokenKind(str, Enum):
    WORD = "word"
    COORD = "coord"
    CLASS = "class"
    SPECIAL = "special"


@dataclass(frozen=True)
class Token:
    """One vocabulary entry."""

    id: int
    kind: TokenKind
    surface: str


@dataclass(frozen=True)
class Box:
    """Axis-aligned box normalized to the scene extent."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise RangeError(f"Box coordinate {name}={value} outside [0, 1]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise RangeError(
                f"Box corners inverted: ({self.x1}, {self.y1}, {self.x2}, {self.y2})",
                hint="Boxes are (x1, y1, x2, y2) with x1 <= x2 and y1 <= y2.",
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def _coord_surface(k: int) -> str:
    return f"<c{k}>"


class Vocabulary:
    """Immutable token table with surface lookup and kind queries."""

    def __init__(self, tokens: Sequence[Token], class_names: Sequence[str], coord_bins: int) -> None:
        self._tokens: tuple[Token, ...] = tuple(tokens)
        self.class_names: tuple[str, ...] = tuple(class_names)
        self.coord_bins = coord_bins
        self.word_index: dict[str, int] = {t.surface: t.id for t in self._tokens}
        self._coord_start = next(t.id for t in self._tokens if t.kind is TokenKind.COORD)
        self._class_start = next(
            (t.id for t in self._tokens if t.kind is TokenKind.CLASS), len(self._tokens)
        )

    # -- basic access --------------------------------------------------------

    def __len__(self) -> int:
        return len(self._tokens)

    def __iter__(self):
        return iter(self._tokens)

    @property
    def tokens(self) -> tuple[Token, ...]:
        return self._tokens

    def token(self, token_id: int) -> Token:
        if not 0 <= token_id < len(self._tokens):
            raise VocabularyError(f"Token id {token_id} outside [0, {len(self._tokens)})")
        return self._tokens[token_id]

    def lookup(self, surface: str) -> int:
        try:
            return self.word_index[surface]
        except KeyError:
            raise VocabularyError(f"Out-of-vocabulary word: {surface!r}") from None

    def surface(self, token_id: int) -> str:
        return self.token(token_id).surface

    def kind(self, token_id: int) -> TokenKind:
        return self.token(token_id).kind

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def mask_id(self) -> int:
        return MASK_ID

    @property
    def bos_id(self) -> int:
        return BOS_ID

    # -- coordinate and class tokens ----------------------------------------

    def is_coord(self, token_id: int) -> bool:
        return self._coord_start <= token_id < self._coord_start + self.coord_bins

    def is_class(self, token_id: int) -> bool:
        return self._class_start <= token_id < self._class_start + len(self.class_names)

    def coord_id(self, k: int) -> int:
        if not 0 <= k < self.coord_bins:
            raise RangeError(f"Coordinate bin {k} outside [0, {self.coord_bins})")
        return self._coord_start + k

    def coord_bin(self, token_id: int) -> int:
        if not self.is_coord(token_id):
            raise TokenKindError(
                f"Token {token_id} ({self.surface(token_id)!r}) is {self.kind(token_id).value}, not coord"
            )
        return token_id - self._coord_start

    def class_id(self, index: int) -> int:
        """Token id of the class at *index* in :attr:`class_names`."""
        if not 0 <= index < len(self.class_names):
            raise RangeError(f"Class index {index} outside [0, {len(self.class_names)})")
        return self._class_start + index

    def class_index(self, token_id: int) -> int:
        if not self.is_class(token_id):
            raise TokenKindError(
                f"Token {token_id} ({self.surface(token_id)!r}) is {self.kind(token_id).value}, not class"
            )
        return token_id - self._class_start

    # -- serialization -------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{t.id}\t{t.kind.value}\t{t.surface}\n" for t in self._tokens)

    @cached_property
    def hash(self) -> str:
        """sha256 of the serialized vocabulary file."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.to_text() == other.to_text()

    def __hash__(self) -> int:
        return hash(self.hash)

    def __repr__(self) -> str:
        return (
            f"Vocabulary(size={len(self)}, classes={len(self.class_names)}, "
            f"coord_bins={self.coord_bins})"
        )


def _check_surface(surface: str) -> None:
    if not surface or any(ch.isspace() for ch in surface):
        raise VocabularyError(f"Invalid surface {surface!r}: must be non-empty without whitespace")


def build_vocab(
    class_names: Sequence[str],
    word_list: Sequence[str],
    coord_bins: int = DEFAULT_COORD_BINS,
) -> Vocabulary:
    """Build a vocabulary from class names and a word list.

    Args:
        class_names: Ordered class names; class tokens follow the coord tokens.
        word_list: Ordered plain words.
        coord_bins: Number of coordinate bins ``B``.

    Returns:
        A :class:`Vocabulary` with ``|V| = 3 + len(word_list) + B + len(class_names)``.

    Raises:
        VocabularyError: On an empty list or a duplicate surface (the message
            names the duplicate).
        RangeError: If ``coord_bins < 2``.
    """
    if not class_names or not word_list:
        raise VocabularyError("class_names and word_list must be non-empty")
    if coord_bins < 2:
        raise RangeError(f"coord_bins must be >= 2, got {coord_bins}")

    surfaces: list[tuple[TokenKind, str]] = [(TokenKind.SPECIAL, s) for s in SPECIALS]
    surfaces += [(TokenKind.WORD, w) for w in word_list]
    surfaces += [(TokenKind.COORD, _coord_surface(k)) for k in range(coord_bins)]
    surfaces += [(TokenKind.CLASS, c) for c in class_names]

    seen: set[str] = set()
    tokens: list[Token] = []
    for idx, (kind, surface) in enumerate(surfaces):
        _check_surface(surface)
        if surface in seen:
            raise VocabularyError(f"duplicate: {surface}")
        seen.add(surface)
        tokens.append(Token(id=idx, kind=kind, surface=surface))
    return Vocabulary(tokens, class_names, coord_bins)


def default_words() -> list[str]:
    """The word list of the built-in scene grammar."""
    return [*TASK_WORDS, *COUNT_WORDS, EMPTY_WORD, *ATTRIBUTE_WORDS]


def default_vocab(coord_bins: int = DEFAULT_COORD_BINS) -> Vocabulary:
    """Vocabulary of the built-in scene grammar (object classes, then scene classes)."""
    return build_vocab([*OBJECT_CLASSES, *SCENE_CLASSES], default_words(), coord_bins)


# ---------------------------------------------------------------------------
# Codecs
# ---------------------------------------------------------------------------


def encode_text(v: Vocabulary, phrase: str) -> list[int]:
    """Encode a single-space separated phrase. Specials are never emitted."""
    if phrase == "":
        return []
    ids: list[int] = []
    for surface in phrase.split(" "):
        if surface in SPECIALS or surface not in v.word_index:
            raise VocabularyError(f"Out-of-vocabulary word: {surface!r}")
        ids.append(v.word_index[surface])
    return ids


def decode_text(v: Vocabulary, ids: Iterable[int], *, strip_pad: bool = False) -> str:
    """Join the surfaces of *ids* with single spaces."""
    surfaces = [v.surface(int(i)) for i in ids if not (strip_pad and int(i) == v.pad_id)]
    return " ".join(surfaces)


def encode_box(v: Vocabulary, b: Box) -> list[int]:
    """Quantize a box into four coord tokens ordered x1, y1, x2, y2."""
    bins = v.coord_bins
    out = []
    for c in b.as_tuple():
        if not 0.0 <= c <= 1.0:
            raise RangeError(f"Box coordinate {c} outside [0, 1]")
        out.append(v.coord_id(min(math.floor(c * bins), bins - 1)))
    return out


def decode_box(v: Vocabulary, ids: Sequence[int]) -> Box:
    """Dequantize four coord tokens to bin centers; inverted corners are swapped."""
    if len(ids) != 4:
        raise TokenKindError(f"A box needs exactly 4 coord tokens, got {len(ids)}")
    x1, y1, x2, y2 = ((v.coord_bin(int(i)) + 0.5) / v.coord_bins for i in ids)
    if x1 > x2:
        x1, x2 = x2, x1
    if y1 > y2:
        y1, y2 = y2, y1
    return Box(x1, y1, x2, y2)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def save_vocab(v: Vocabulary, path: PathLike) -> Path:
    """Write *v* as ``<id>\\t<kind>\\t<surface>`` lines (UTF-8)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(v.to_text().encode("utf-8"))
    logger.debug("Vocabulary (%d tokens) written to %s", len(v), path)
    return path


def load_vocab(path: PathLike) -> Vocabulary:
    """Read a vocabulary file, validating density, specials and coord contiguity."""
    path = Path(path)
    if not path.exists():
        raise VocabularyError(f"Vocabulary file not found: {path}")
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"Vocabulary file is not UTF-8: {path}", exc.start) from exc
    tokens: list[Token] = []
    offset = 0
    for line in text.splitlines(keepends=True):
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise FormatError("Expected '<id>\\t<kind>\\t<surface>'", offset)
        try:
            token_id = int(parts[0])
            kind = TokenKind(parts[1])
        except ValueError as exc:
            raise FormatError(f"Bad id or kind in line {line.strip()!r}", offset) from exc
        if token_id != len(tokens):
            raise FormatError(f"Ids must be dense; expected {len(tokens)}, got {token_id}", offset)
        tokens.append(Token(token_id, kind, parts[2]))
        offset += len(line.encode("utf-8"))

    if tuple(t.surface for t in tokens[:3]) != SPECIALS or any(
        t.kind is not TokenKind.SPECIAL for t in tokens[:3]
    ):
        raise VocabularyError("Specials must occupy ids 0..2 as [PAD], [M], [BOS]")

    words = [t.surface for t in tokens if t.kind is TokenKind.WORD]
    coords = [t for t in tokens if t.kind is TokenKind.COORD]
    classes = [t.surface for t in tokens if t.kind is TokenKind.CLASS]
    if [t.surface for t in coords] != [_coord_surface(k) for k in range(len(coords))] or (
        coords and coords[-1].id - coords[0].id != len(coords) - 1
    ):
        raise VocabularyError("Coord tokens must be consecutive bins 0..B-1")
    rebuilt = build_vocab(classes, words, len(coords))
    if rebuilt.to_text() != text:
        raise VocabularyError(
            "Token order does not follow specials, words, coords, classes",
            hint="Regenerate the file with save_vocab().",
        )
    return rebuilt
