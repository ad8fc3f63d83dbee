"""Melody tokens, sequences, vocabularies, and transpositions.

A melody is a stream of tokens on a sixteenth-note grid: a note name marks an
attack, ``HOLD`` sustains the previous note, ``REST`` is silence.  All types
here are immutable and all operations are pure functions, so everything is
safe to share across threads.

Pitch spellings are normalized to a single canonical table on construction
(flats for Eb/Bb, sharps elsewhere), which makes transposition a bijection on
the normalized token set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    CorpusError,
    NoSoundedNote,
    OutOfRange,
    OutOfVocabulary,
    TokenParseError,
)

# Canonical spelling per pitch class; every accepted input spelling is
# normalized to this table so each MIDI number has exactly one token.
_CANONICAL_NAMES = ("C", "C#", "D", "Eb", "E", "F", "F#", "G", "G#", "A", "Bb", "B")

# Accepted input spellings (letter plus optional single accidental).
_LETTER_SEMITONE = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}
_ACCIDENTAL = {"": 0, "#": 1, "b": -1}

HOLD_NAME = "HOLD"
REST_NAME = "REST"

MIDI_MIN = 12   # C0
MIDI_MAX = 119  # B8

_KIND_NOTE = "note"
_KIND_HOLD = "hold"
_KIND_REST = "rest"


@dataclass(frozen=True, slots=True)
class Token:
    """One grid step: a note attack, a sustain, or a rest.

    Note tokens are identified by their MIDI number; the spelling shown by
    ``str()`` always comes from the canonical table.
    """

    kind: str
    midi: int = -1

    def __post_init__(self) -> None:
        if self.kind == _KIND_NOTE:
            if not (MIDI_MIN <= self.midi <= MIDI_MAX):
                raise TokenParseError(
                    f"note MIDI {self.midi} outside [{MIDI_MIN}, {MIDI_MAX}]"
                )
        elif self.kind in (_KIND_HOLD, _KIND_REST):
            if self.midi != -1:
                raise TokenParseError(f"{self.kind} token carries no pitch")
        else:
            raise TokenParseError(f"unknown token kind {self.kind!r}")

    @property
    def is_note(self) -> bool:
        return self.kind == _KIND_NOTE

    def __str__(self) -> str:
        if self.kind == _KIND_HOLD:
            return HOLD_NAME
        if self.kind == _KIND_REST:
            return REST_NAME
        octave, pc = divmod(self.midi, 12)
        return f"{_CANONICAL_NAMES[pc]}{octave - 1}"

    def __repr__(self) -> str:  # compact in test output
        return f"Token({str(self)})"


HOLD = Token(_KIND_HOLD)
REST = Token(_KIND_REST)


def note(midi: int) -> Token:
    """Note token for a MIDI number."""
    return Token(_KIND_NOTE, midi)


def parse_token(text: str) -> Token:
    """Parse ``C4``/``Eb3``/``HOLD``/``REST`` into a Token.

    Any of the seventeen letter+accidental spellings is accepted; the result
    is normalized, so ``D#4`` and ``Eb4`` parse to the same token.
    """
    if text == HOLD_NAME:
        return HOLD
    if text == REST_NAME:
        return REST
    if len(text) < 2:
        raise TokenParseError(f"unparseable token {text!r}")
    letter, rest = text[0], text[1:]
    accidental = ""
    if rest and rest[0] in "#b":
        accidental, rest = rest[0], rest[1:]
    if letter not in _LETTER_SEMITONE or not rest.isdigit():
        raise TokenParseError(f"unparseable token {text!r}")
    octave = int(rest)
    if not 0 <= octave <= 8:
        raise TokenParseError(f"octave {octave} outside [0, 8] in {text!r}")
    midi = 12 * (octave + 1) + _LETTER_SEMITONE[letter] + _ACCIDENTAL[accidental]
    return note(midi)


# A melody (or window) is simply an immutable tuple of tokens; fixed length is
# enforced where it matters, on Corpus construction.
TokenSequence = tuple[Token, ...]


def sequence(tokens: Iterable[Token | str]) -> TokenSequence:
    """Build a TokenSequence, parsing any strings on the way."""
    return tuple(t if isinstance(t, Token) else parse_token(t) for t in tokens)


def sequence_strings(seq: TokenSequence) -> list[str]:
    return [str(t) for t in seq]


@dataclass(frozen=True)
class Vocabulary:
    """Bijection between tokens and integer indices.

    HOLD and REST occupy indices 0 and 1; note tokens follow in ascending
    MIDI order (checkpoints may restore any stored order).
    """

    tokens: tuple[Token, ...]
    index_of: dict[Token, int] = field(repr=False, compare=False)

    @classmethod
    def from_tokens(cls, tokens: Iterable[Token]) -> "Vocabulary":
        notes = sorted({t for t in tokens if t.is_note}, key=lambda t: t.midi)
        ordered = (HOLD, REST, *notes)
        return cls(tokens=ordered, index_of={t: i for i, t in enumerate(ordered)})

    @classmethod
    def from_ordered(cls, tokens: Sequence[Token]) -> "Vocabulary":
        ordered = tuple(tokens)
        if HOLD not in ordered or REST not in ordered:
            raise CorpusError("vocabulary must contain HOLD and REST")
        if len(set(ordered)) != len(ordered):
            raise CorpusError("vocabulary contains duplicate tokens")
        return cls(tokens=ordered, index_of={t: i for i, t in enumerate(ordered)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: Token) -> bool:
        return token in self.index_of

    def index(self, token: Token) -> int:
        try:
            return self.index_of[token]
        except KeyError:
            raise OutOfVocabulary(f"token {token} not in vocabulary") from None

    def token(self, index: int) -> Token:
        return self.tokens[index]

    def indices(self, seq: TokenSequence) -> np.ndarray:
        return np.array([self.index(t) for t in seq], dtype=np.int64)


@dataclass(frozen=True)
class Transposition:
    """A pitch shift, carried both relatively (semitones) and absolutely.

    The absolute label is the first sounded note of the transposed sequence;
    it is what conditions the decoder, so it is always a note token.
    """

    semitones: int
    absolute_label: Token

    def __post_init__(self) -> None:
        if not self.absolute_label.is_note:
            raise NoSoundedNote("absolute label must be a note token")


@dataclass(frozen=True)
class Corpus:
    """Fixed-length training sequences plus the derived vocabulary and range."""

    sequences: tuple[TokenSequence, ...]
    vocabulary: Vocabulary
    voice_range: tuple[int, int]
    ids: tuple[str, ...]

    @classmethod
    def from_sequences(
        cls, seqs: Sequence[TokenSequence], ids: Sequence[str] | None = None
    ) -> "Corpus":
        if not seqs:
            raise CorpusError("corpus must contain at least one sequence")
        length = len(seqs[0])
        for i, s in enumerate(seqs):
            if len(s) != length:
                raise CorpusError(
                    f"sequence {i} has length {len(s)}, expected {length}"
                )
        pitches = [t.midi for s in seqs for t in s if t.is_note]
        if not pitches:
            raise CorpusError("corpus contains no note tokens")
        vocab = Vocabulary.from_tokens(t for s in seqs for t in s)
        if ids is None:
            ids = [f"seq-{i:04d}" for i in range(len(seqs))]
        elif len(ids) != len(seqs):
            raise CorpusError("ids and sequences differ in length")
        return cls(
            sequences=tuple(seqs),
            vocabulary=vocab,
            voice_range=(min(pitches), max(pitches)),
            ids=tuple(ids),
        )

    @property
    def length(self) -> int:
        return len(self.sequences[0])

    def __len__(self) -> int:
        return len(self.sequences)


def transpose(
    seq: TokenSequence,
    semitones: int,
    vocab: Vocabulary | None = None,
    voice_range: tuple[int, int] | None = None,
) -> TokenSequence:
    """Shift every note by `semitones`, leaving HOLD/REST untouched.

    Respelling goes through the canonical table, so shifting up then back
    down restores the input exactly.  When a vocabulary or voice range is
    supplied, the shifted tokens are checked against them.
    """
    out: list[Token] = []
    for tok in seq:
        if not tok.is_note:
            out.append(tok)
            continue
        midi = tok.midi + semitones
        if not MIDI_MIN <= midi <= MIDI_MAX:
            raise OutOfRange(f"{tok} shifted by {semitones} leaves the MIDI gamut")
        if voice_range is not None and not voice_range[0] <= midi <= voice_range[1]:
            raise OutOfRange(
                f"{tok} shifted by {semitones} leaves voice range {voice_range}"
            )
        shifted = note(midi)
        if vocab is not None and shifted not in vocab:
            raise OutOfVocabulary(f"{shifted} not in vocabulary")
        out.append(shifted)
    return tuple(out)


def first_sounded_note(seq: TokenSequence) -> Token:
    for tok in seq:
        if tok.is_note:
            return tok
    raise NoSoundedNote("sequence contains only HOLD/REST tokens")


def equivalence_class(
    seq: TokenSequence, corpus: Corpus
) -> list[tuple[Transposition, TokenSequence]]:
    """All transpositions of `seq` (identity included) that stay inside the
    corpus voice range and vocabulary, sorted by semitone shift."""
    first_sounded_note(seq)  # fail early: class members need an absolute label
    lo, hi = corpus.voice_range
    pitches = [t.midi for t in seq if t.is_note]
    span_lo, span_hi = min(pitches), max(pitches)
    members: list[tuple[Transposition, TokenSequence]] = []
    for shift in range(lo - span_lo, hi - span_hi + 1):
        try:
            shifted = transpose(seq, shift, corpus.vocabulary, corpus.voice_range)
        except (OutOfRange, OutOfVocabulary):
            continue
        label = first_sounded_note(shifted)
        members.append((Transposition(shift, label), shifted))
    return members


def sliding_windows(
    melodies: Iterable[TokenSequence], length: int, hop: int
) -> list[TokenSequence]:
    """All windows of `length` tokens starting at multiples of `hop`.

    Melodies shorter than the window contribute nothing; a window may start
    mid-note, in which case it begins with HOLD tokens.
    """
    if length < 1:
        raise ValueError("window length must be >= 1")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    windows: list[TokenSequence] = []
    for melody in melodies:
        for start in range(0, len(melody) - length + 1, hop):
            windows.append(tuple(melody[start : start + length]))
    return windows


# --- synthetic corpus -------------------------------------------------------

_MAJOR_DEGREES = (0, 2, 4, 5, 7, 9, 11)
_SYNTH_LO = 60  # C4
_SYNTH_HI = 83  # B5; the generated voice range never exceeds two octaves


def generate_synthetic_corpus(seed: int, k: int, length: int) -> Corpus:
    """Deterministic stand-in corpus: diatonic random walks on a sixteenth grid.

    Each melody picks a random major key and walks over that key's scale tones
    within a fixed two-octave compass, moving mostly stepwise.  Durations are
    eighth, quarter, or half notes realized as an attack plus HOLDs, with
    occasional short rests; melodic motion on a sixteenth grid therefore looks
    like a chorale line.  The same seed always produces the identical corpus,
    and across melodies the twelve keys fill in the full chromatic vocabulary
    of the compass.
    """
    if k < 1 or length < 1:
        raise ValueError("k and length must be >= 1")
    rng = np.random.default_rng(seed)
    sequences: list[TokenSequence] = []
    for _ in range(k):
        root = int(rng.integers(0, 12))
        scale = [
            m
            for m in range(_SYNTH_LO, _SYNTH_HI + 1)
            if (m - root) % 12 in _MAJOR_DEGREES
        ]
        pos = int(rng.integers(len(scale) // 3, 2 * len(scale) // 3 + 1))
        tokens: list[Token] = []
        while len(tokens) < length:
            # First event is always an attack so every window has a label.
            if tokens and rng.random() < 0.05:
                tokens.extend([REST] * int(rng.integers(1, 3)))
                continue
            duration = int(rng.choice((2, 4, 8), p=(0.5, 0.35, 0.15)))
            tokens.append(note(scale[pos]))
            tokens.extend([HOLD] * (duration - 1))
            step = int(rng.choice((-2, -1, 0, 1, 2), p=(0.08, 0.37, 0.1, 0.37, 0.08)))
            pos = min(max(pos + step, 0), len(scale) - 1)
        sequences.append(tuple(tokens[:length]))
    ids = [f"syn-{i:04d}" for i in range(k)]
    return Corpus.from_sequences(sequences, ids)


# --- JSONL corpus files -----------------------------------------------------

def write_jsonl(
    path: str | Path, melodies: Iterable[tuple[str, TokenSequence]]
) -> None:
    """Write melodies as JSON Lines: one {"id", "tokens"} object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for melody_id, seq in melodies:
            record = {"id": melody_id, "tokens": sequence_strings(seq)}
            fh.write(json.dumps(record) + "\n")


def read_jsonl(path: str | Path) -> list[tuple[str, TokenSequence]]:
    """Load melodies (any lengths) from a JSON Lines corpus file.

    Spellings are normalized on load; vocabulary and voice range are derived
    later, when a fixed-length Corpus is built.
    """
    melodies: list[tuple[str, TokenSequence]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                melody_id = record["id"]
                tokens = record["tokens"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad corpus record: {exc}")
            try:
                seq = sequence(tokens)
            except TokenParseError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}")
            melodies.append((str(melody_id), seq))
    if not melodies:
        raise CorpusError(f"{path}: corpus file is empty")
    return melodies


def load_corpus(path: str | Path) -> Corpus:
    """Load a JSONL file whose melodies already share one fixed length."""
    melodies = read_jsonl(path)
    return Corpus.from_sequences([seq for _, seq in melodies], [i for i, _ in melodies])


def iter_notes(seq: TokenSequence) -> Iterator[Token]:
    return (t for t in seq if t.is_note)
