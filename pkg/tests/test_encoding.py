"""Tokens, transposition, equivalence classes, windows, and corpus files."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melodist import encoding
from melodist.encoding import (
    HOLD,
    REST,
    Corpus,
    Vocabulary,
    equivalence_class,
    generate_synthetic_corpus,
    load_corpus,
    note,
    parse_token,
    read_jsonl,
    sequence,
    sliding_windows,
    transpose,
    write_jsonl,
)
from melodist.errors import (
    CorpusError,
    NoSoundedNote,
    OutOfRange,
    OutOfVocabulary,
    TokenParseError,
)


def chromatic_corpus(lo: int, hi: int, length: int = 4) -> Corpus:
    """A corpus whose vocabulary covers every pitch in [lo, hi]."""
    seqs = [tuple([note(m)] + [HOLD] * (length - 1)) for m in range(lo, hi + 1)]
    return Corpus.from_sequences(seqs)


class TestToken:
    def test_parse_canonical_and_aliases(self):
        assert parse_token("C4").midi == 60
        assert parse_token("B8").midi == 119
        assert parse_token("C0").midi == 12
        # enharmonic inputs normalize to one token
        assert parse_token("D#4") == parse_token("Eb4")
        assert parse_token("Gb3") == parse_token("F#3")
        assert str(parse_token("D#4")) == "Eb4"

    def test_round_trip_strings(self):
        for name in ["C4", "C#4", "Eb5", "F#2", "Bb7", "HOLD", "REST"]:
            assert str(parse_token(name)) == name

    @pytest.mark.parametrize("bad", ["", "H4", "C9", "Cbb4", "C-1", "hold", "4C"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(TokenParseError):
            parse_token(bad)

    def test_hold_rest_carry_no_pitch(self):
        assert not HOLD.is_note
        assert not REST.is_note


class TestTranspose:
    def test_identity(self):
        s = sequence(["C4", "HOLD", "E4", "REST"])
        assert transpose(s, 0) == s

    def test_minor_third_up_respells_flat(self):
        s = sequence(["C4", "HOLD", "E4", "REST"])
        assert transpose(s, 3) == sequence(["Eb4", "HOLD", "G4", "REST"])

    def test_range_boundary_violation(self):
        s = sequence(["B4"])
        with pytest.raises(OutOfRange):
            transpose(s, 1, voice_range=(60, 71))  # B4 = 71 is the ceiling

    def test_vocabulary_closure_checked(self):
        vocab = Vocabulary.from_tokens([note(60), note(62), HOLD, REST])
        s = sequence(["C4"])
        assert transpose(s, 2, vocab) == sequence(["D4"])
        with pytest.raises(OutOfVocabulary):
            transpose(s, 1, vocab)

    def test_hold_rest_positions_preserved(self):
        s = sequence(["REST", "C4", "HOLD", "REST", "D4", "HOLD"])
        shifted = transpose(s, 5)
        assert [t.is_note for t in shifted] == [t.is_note for t in s]
        assert shifted[0] == REST and shifted[3] == REST

    @given(
        st.lists(
            st.one_of(
                st.integers(min_value=36, max_value=96).map(note),
                st.sampled_from([HOLD, REST]),
            ),
            min_size=1,
            max_size=12,
        ),
        st.integers(min_value=-12, max_value=12),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip_is_exact(self, tokens, shift):
        s = tuple(tokens)
        assert transpose(transpose(s, shift), -shift) == s


class TestEquivalenceClass:
    def test_span_inside_range_enumerates_all_shifts(self):
        corpus = chromatic_corpus(60, 72)
        s = sequence(["D4", "HOLD", "G4", "REST"])  # span [62, 67]
        members = equivalence_class(s, corpus)
        shifts = [t.semitones for t, _ in members]
        assert shifts == list(range(-2, 6))  # 8 members, oracle: span containment
        assert len(members) == 8

    def test_span_equal_to_range_is_identity_only(self):
        corpus = chromatic_corpus(60, 67)
        s = sequence(["C4", "G4", "HOLD", "HOLD"])
        members = equivalence_class(s, corpus)
        assert len(members) == 1
        assert members[0][0].semitones == 0
        assert members[0][1] == s

    def test_all_rests_has_no_label(self):
        corpus = chromatic_corpus(60, 72)
        with pytest.raises(NoSoundedNote):
            equivalence_class((REST, REST, REST, REST), corpus)

    def test_members_are_consistent_transpositions(self):
        corpus = chromatic_corpus(55, 79)
        s = sequence(["E4", "HOLD", "A4", "C4"])
        members = equivalence_class(s, corpus)
        size = len(members)
        for trans, shifted in members:
            assert shifted == transpose(s, trans.semitones)
            assert trans.absolute_label == encoding.first_sounded_note(shifted)
            # equivalence relation: every member sees the same class size
            assert len(equivalence_class(shifted, corpus)) == size


class TestSlidingWindows:
    def test_exact_fit(self):
        melody = tuple([note(60)] * 16)
        assert len(sliding_windows([melody], 16, 1)) == 1

    def test_hop_arithmetic(self):
        melody = tuple([note(60)] * 20)
        starts = sliding_windows([melody], 16, 4)
        assert len(starts) == 2

    def test_too_short_contributes_nothing(self):
        melody = tuple([note(60)] * 10)
        assert sliding_windows([melody], 16, 1) == []

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            sliding_windows([], 0, 1)
        with pytest.raises(ValueError):
            sliding_windows([], 1, 0)


class TestSyntheticCorpus:
    def test_deterministic(self):
        a = generate_synthetic_corpus(1, 10, 16)
        b = generate_synthetic_corpus(1, 10, 16)
        assert a.sequences == b.sequences
        assert a.vocabulary.tokens == b.vocabulary.tokens

    def test_tokens_closed_under_vocabulary(self):
        corpus = generate_synthetic_corpus(7, 25, 16)
        for s in corpus.sequences:
            for tok in s:
                assert tok in corpus.vocabulary

    def test_desk_corpus_regression(self):
        # frozen from one inspection of the generator output
        corpus = generate_synthetic_corpus(1, 500, 16)
        assert corpus.voice_range == (60, 83)
        assert corpus.voice_range[1] - corpus.voice_range[0] <= 24
        assert corpus.vocabulary.size == 26

    def test_every_sequence_has_an_attack(self):
        corpus = generate_synthetic_corpus(3, 200, 16)
        for s in corpus.sequences:
            assert any(t.is_note for t in s)


class TestCorpusFiles:
    def test_jsonl_round_trip(self, tmp_path):
        corpus = generate_synthetic_corpus(5, 8, 12)
        path = tmp_path / "corpus.jsonl"
        write_jsonl(path, zip(corpus.ids, corpus.sequences))
        loaded = load_corpus(path)
        assert loaded.sequences == corpus.sequences
        assert loaded.ids == corpus.ids
        assert loaded.voice_range == corpus.voice_range

    def test_spellings_normalized_on_load(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text(
            json.dumps({"id": "a", "tokens": ["D#4", "HOLD", "Gb4", "REST"]}) + "\n"
        )
        (melody_id, seq), = read_jsonl(path)
        assert encoding.sequence_strings(seq) == ["Eb4", "HOLD", "F#4", "REST"]

    def test_bad_record_reports_line(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text('{"id": "a", "tokens": ["C4"]}\n{"id": "b"}\n')
        with pytest.raises(CorpusError, match=":2"):
            read_jsonl(path)

    def test_mixed_lengths_rejected_for_fixed_corpus(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        records = [
            {"id": "a", "tokens": ["C4", "HOLD"]},
            {"id": "b", "tokens": ["C4"]},
        ]
        path.write_text("".join(json.dumps(r) + "\n" for r in records))
        with pytest.raises(CorpusError):
            load_corpus(path)

    def test_vocabulary_ordering_is_stable(self):
        corpus = generate_synthetic_corpus(2, 20, 8)
        vocab = corpus.vocabulary
        assert vocab.tokens[0] == HOLD and vocab.tokens[1] == REST
        midis = [t.midi for t in vocab.tokens[2:]]
        assert midis == sorted(midis)
