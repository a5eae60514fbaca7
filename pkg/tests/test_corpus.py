import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dataless_intent.corpus import (
    IntentClass,
    IntentSchema,
    description_stats,
    load_dataset,
    load_schema,
    save_schema,
    tokenize_label,
    validate_description,
)
from dataless_intent.exceptions import (
    DuplicateIdError,
    InvalidInputError,
    MalformedRecordError,
    UnknownLabelError,
)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


class TestTokenizeLabel:
    @pytest.mark.parametrize(
        "label, expected",
        [
            ("AddToPlaylist", "Add To Playlist"),
            ("oil_change_how", "Oil Change How"),
            ("flight", "Flight"),
            ("flight_no", "Flight No"),
            ("calendar:set", "Calendar Set"),
            ("play-music.now", "Play Music Now"),
            ("NLU", "NLU"),
            ("getNLUResult", "Get NLUResult"),
            ("Add To Playlist", "Add To Playlist"),
        ],
    )
    def test_examples(self, label, expected):
        assert tokenize_label(label) == expected

    @pytest.mark.parametrize("bad", ["", "   ", "__", "-.:"])
    def test_empty_rejected(self, bad):
        with pytest.raises(InvalidInputError):
            tokenize_label(bad)

    labels = st.text(
        alphabet=st.sampled_from("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-.: "),
        min_size=1,
        max_size=30,
    ).filter(lambda s: any(c.isalnum() for c in s))

    @given(labels)
    def test_idempotent(self, label):
        once = tokenize_label(label)
        assert tokenize_label(once) == once

    @given(labels)
    def test_no_separators_or_double_spaces(self, label):
        out = tokenize_label(label)
        assert not set(out) & set("_-.:")
        assert "  " not in out
        assert out == out.strip()


class TestValidateDescription:
    def test_abbreviation(self):
        v = validate_description(
            IntentClass("abbreviation", "user is asking what an abbreviation stands for or means")
        )
        assert v.prefix_ok
        assert (v.exact_label_tokens_found, v.label_token_total) == (1, 1)
        assert v.warnings == []

    def test_maybe_has_two_warnings(self):
        v = validate_description(IntentClass("maybe", "user is expressing uncertainty"))
        assert not v.prefix_ok
        assert (v.exact_label_tokens_found, v.label_token_total) == (0, 1)
        assert len(v.warnings) == 2

    def test_empty_description(self):
        with pytest.raises(InvalidInputError):
            validate_description(IntentClass("x", ""))

    def test_prefix_case_insensitive(self):
        assert validate_description(IntentClass("car_rental", "User wants to rent a car")).prefix_ok

    def test_whole_word_match_only(self):
        # "plays"/"musicals" must not count as "play"/"music"
        v = validate_description(IntentClass("PlayMusic", "user is asking about plays and musicals"))
        assert (v.exact_label_tokens_found, v.label_token_total) == (0, 2)


class TestDescriptionStats:
    def test_descriptions_equal_tokenized_labels(self):
        schema = IntentSchema(
            IntentClass(label, tokenize_label(label)) for label in ["AddToPlaylist", "oil_change_how", "flight"]
        )
        stats = description_stats(schema)
        assert stats.mean_added_tokens == 0.0
        assert stats.pct_with_label_token == 100.0
        assert stats.pct_label_tokens_preserved == 100.0

    def test_two_class_fixture(self):
        # hand count: (4 - 2) + (5 - 1) over 2 classes
        schema = IntentSchema([IntentClass("a_b", "user wants a b"), IntentClass("c", "user is asking about c")])
        assert description_stats(schema).mean_added_tokens == 3.0

    def test_snips_schema_runs(self, snips_schema):
        stats = description_stats(snips_schema)
        assert stats.n_classes == 7
        assert stats.mean_added_tokens > 0


class TestSchemaIO:
    def test_snips_has_seven_classes(self, snips_schema):
        assert len(snips_schema) == 7
        assert snips_schema.position("PlayMusic") == 3

    def test_round_trip_preserves_order(self, tmp_path, snips_schema):
        path = tmp_path / "schema.jsonl"
        save_schema(snips_schema, path)
        again = load_schema(path)
        assert again == snips_schema
        assert again.labels == snips_schema.labels

    def test_entities_normalized(self, tmp_path):
        path = write_jsonl(tmp_path / "s.jsonl", [
            {"label": "a", "description": "user wants a", "entities": ["  Song ", "PLAYLIST"]},
            {"label": "b", "description": "user wants b", "entities": []},
        ])
        schema = load_schema(path)
        assert schema[0].entities == {"song", "playlist"}
        assert schema[1].entities == frozenset()

    def test_empty_entity_rejected(self, tmp_path):
        path = write_jsonl(tmp_path / "s.jsonl", [
            {"label": "a", "description": "d", "entities": [" "]},
            {"label": "b", "description": "d"},
        ])
        with pytest.raises(MalformedRecordError) as err:
            load_schema(path)
        assert err.value.line == 1

    def test_needs_two_classes(self, tmp_path):
        path = write_jsonl(tmp_path / "s.jsonl", [{"label": "a", "description": "d"}])
        with pytest.raises(InvalidInputError):
            load_schema(path)

    def test_duplicate_label(self, tmp_path):
        path = write_jsonl(tmp_path / "s.jsonl", [{"label": "a"}, {"label": "a"}])
        with pytest.raises(MalformedRecordError) as err:
            load_schema(path)
        assert err.value.line == 2


class TestDatasetIO:
    def test_three_lines(self, tmp_path, snips_schema):
        path = write_jsonl(tmp_path / "d.jsonl", [
            {"id": "1", "text": "play music", "label": "PlayMusic"},
            {"id": "2", "text": "rate it", "label": "RateBook"},
            {"id": "3", "text": "book it", "label": "BookRestaurant"},
        ])
        data = load_dataset(path, snips_schema)
        assert [u.id for u in data] == ["1", "2", "3"]
        assert data[1].gold_label == "RateBook"

    def test_unknown_label(self, tmp_path, snips_schema):
        path = write_jsonl(tmp_path / "d.jsonl", [
            {"id": "1", "text": "play music", "label": "PlayMusic"},
            {"id": "2", "text": "fly me", "label": "BookFlight"},
        ])
        with pytest.raises(UnknownLabelError) as err:
            load_dataset(path, snips_schema)
        assert err.value.label == "BookFlight"
        assert err.value.line == 2
        assert "BookFlight" in str(err.value)

    def test_duplicate_id(self, tmp_path):
        path = write_jsonl(tmp_path / "d.jsonl", [
            {"id": "1", "text": "a", "label": "x"},
            {"id": "1", "text": "b", "label": "x"},
        ])
        with pytest.raises(DuplicateIdError) as err:
            load_dataset(path)
        assert err.value.line == 2

    def test_malformed(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id": "1", "text": "a", "label": "x"}\n{not json\n')
        with pytest.raises(MalformedRecordError) as err:
            load_dataset(path)
        assert err.value.line == 2

    def test_missing_text(self, tmp_path):
        path = write_jsonl(tmp_path / "d.jsonl", [{"id": "1", "label": "x"}])
        with pytest.raises(MalformedRecordError):
            load_dataset(path)

    def test_error_kinds_distinct(self):
        assert not issubclass(UnknownLabelError, DuplicateIdError)
        assert not issubclass(MalformedRecordError, UnknownLabelError)
