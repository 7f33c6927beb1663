import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from natfeed.corpus import (
    SCHEMA_PRESETS,
    Conversation,
    FilterPolicy,
    IngestError,
    Message,
    RejectReason,
    apply_filters,
    conversation_from_canonical,
    index_conversations,
    ingest_jsonl,
    load_corpus,
    load_schema_map,
    to_canonical_dict,
)

from conftest import conv_from_texts


class TestConversationModel:
    def test_alternation_enforced(self):
        with pytest.raises(ValueError):
            Conversation(id="x", messages=(Message("assistant", "hi"),))
        with pytest.raises(ValueError):
            Conversation(id="x", messages=(Message("user", "a"), Message("user", "b")))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            Conversation(id="x", messages=())

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError):
            Message("system", "hello")

    def test_complete_turns(self):
        assert conv_from_texts("a", ["u", "a"]).complete_turns == 1
        assert conv_from_texts("b", ["u", "a", "u"]).complete_turns == 1
        assert conv_from_texts("c", ["u", "a", "u", "a"]).complete_turns == 2

    def test_user_ordinal(self):
        conv = conv_from_texts("a", ["u1", "a1", "u2", "a2", "u3"])
        assert conv.user_ordinal(0) == 1
        assert conv.user_ordinal(2) == 2
        assert conv.user_ordinal(4) == 3
        with pytest.raises(ValueError):
            conv.user_ordinal(1)


class TestIngest:
    def write(self, tmp_path, lines):
        path = tmp_path / "corpus.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_canonical_round_trip(self, tmp_path):
        conv = conv_from_texts("rt-1", ["hello", "hi there"], language="english")
        path = self.write(tmp_path, [json.dumps(to_canonical_dict(conv))])
        [loaded] = list(ingest_jsonl(path, SCHEMA_PRESETS["canonical"]))
        assert loaded == conv
        assert to_canonical_dict(loaded) == to_canonical_dict(conv)

    def test_lmsys_layout(self, tmp_path):
        line = {
            "conversation_id": "lm-1",
            "model": "some-model",
            "conversation": [
                {"role": "user", "content": "hi"},
                {"role": "assistant", "content": "hello"},
            ],
            "language": "English",
            "openai_moderation": [{"flagged": False}, {"flagged": True}],
            "redacted": False,
        }
        path = self.write(tmp_path, [json.dumps(line)])
        [loaded] = list(ingest_jsonl(path, SCHEMA_PRESETS["lmsys"]))
        assert loaded.id == "lm-1"
        assert loaded.model_name == "some-model"
        assert loaded.moderation_flagged is True
        assert loaded.redacted is False

    def test_wildchat_layout_role_aliases(self, tmp_path):
        line = {
            "conversation_hash": "wc-1",
            "model": "m",
            "conversation": [
                {"role": "human", "content": "hi"},
                {"role": "gpt", "content": "hello"},
            ],
            "language": "English",
            "toxic": False,
        }
        path = self.write(tmp_path, [json.dumps(line)])
        [loaded] = list(ingest_jsonl(path, SCHEMA_PRESETS["wildchat"]))
        assert loaded.id == "wc-1"
        assert [m.role for m in loaded.messages] == ["user", "assistant"]
        assert loaded.moderation_flagged is False

    def test_malformed_lines_reported_not_fatal(self, tmp_path):
        good = json.dumps(to_canonical_dict(conv_from_texts("ok", ["u", "a"])))
        lines = [
            "{not json",
            good,
            json.dumps({"id": "no-messages"}),
            json.dumps({"id": "bad", "messages": [{"role": "wizard", "content": "x"}]}),
            json.dumps(
                {
                    "id": "order",
                    "messages": [
                        {"role": "assistant", "content": "x"},
                        {"role": "user", "content": "y"},
                    ],
                }
            ),
            json.dumps({"id": "null", "messages": [{"role": "user", "content": None}]}),
            "",
        ]
        path = self.write(tmp_path, lines)
        items = list(ingest_jsonl(path, SCHEMA_PRESETS["canonical"]))
        assert len(items) == 7
        reasons = [i.reason if isinstance(i, IngestError) else "ok" for i in items]
        assert reasons == [
            "invalid-json",
            "ok",
            "missing-field",
            "unknown-role",
            "non-alternating",
            "missing-field",
            "invalid-json",
        ]
        assert [i.line_number for i in items if isinstance(i, IngestError)] == [1, 3, 4, 5, 6, 7]

    def test_conservation_line_count(self, tmp_path, scenarios):
        from conftest import write_corpus

        path = tmp_path / "c.jsonl"
        write_corpus(scenarios, path)
        items = list(ingest_jsonl(path, SCHEMA_PRESETS["canonical"]))
        assert len(items) == len(scenarios)
        assert all(isinstance(i, Conversation) for i in items)

    def test_custom_schema_file(self, tmp_path):
        schema_file = tmp_path / "schema.json"
        schema_file.write_text(
            json.dumps(
                {
                    "id_key": "uid",
                    "messages_key": "turns",
                    "role_key": "who",
                    "content_key": "text",
                    "role_aliases": {"customer": "user", "agent": "assistant"},
                }
            )
        )
        schema = load_schema_map(schema_file)
        line = {
            "uid": "z1",
            "turns": [{"who": "customer", "text": "hi"}, {"who": "agent", "text": "yo"}],
        }
        path = self.write(tmp_path, [json.dumps(line)])
        [loaded] = list(ingest_jsonl(path, schema))
        assert loaded.id == "z1"
        assert [m.role for m in loaded.messages] == ["user", "assistant"]

    def test_preset_lookup(self):
        assert load_schema_map("lmsys") is SCHEMA_PRESETS["lmsys"]


conversation_strategy = st.builds(
    lambda cid, texts, lang: conv_from_texts(cid, texts, language=lang),
    cid=st.text(st.characters(categories=["L", "N"]), min_size=1, max_size=12),
    texts=st.lists(st.text(min_size=0, max_size=40), min_size=1, max_size=8),
    lang=st.sampled_from(["english", "german", "portuguese"]),
)


class TestRoundTripProperty:
    @given(conversation_strategy)
    def test_canonical_round_trip_is_identity(self, conv):
        assert conversation_from_canonical(to_canonical_dict(conv)) == conv

    @given(st.lists(conversation_strategy, min_size=0, max_size=6))
    def test_file_round_trip_preserves_order_and_bytes(self, convs, tmp_path_factory):
        path = tmp_path_factory.mktemp("rt") / "c.jsonl"
        payload = "".join(
            json.dumps(to_canonical_dict(c), ensure_ascii=False) + "\n" for c in convs
        )
        path.write_text(payload, encoding="utf-8")
        loaded = list(ingest_jsonl(path, SCHEMA_PRESETS["canonical"]))
        assert loaded == convs
        rewritten = "".join(
            json.dumps(to_canonical_dict(c), ensure_ascii=False) + "\n" for c in loaded
        )
        assert rewritten == payload


class TestFilters:
    def test_min_turns_boundary(self):
        policy = FilterPolicy(min_turns=2)
        assert apply_filters(conv_from_texts("a", ["u", "a"]), policy) is RejectReason.TOO_FEW_TURNS
        assert apply_filters(conv_from_texts("b", ["u", "a", "u"]), policy) is RejectReason.TOO_FEW_TURNS
        assert apply_filters(conv_from_texts("c", ["u", "a", "u", "a"]), policy) is None

    def test_min_turns_validation(self):
        with pytest.raises(ValueError):
            FilterPolicy(min_turns=0)

    def test_language_case_insensitive(self):
        policy = FilterPolicy(min_turns=1, allowed_languages=frozenset({"English"}))
        assert apply_filters(conv_from_texts("a", ["u", "a"], language="ENGLISH"), policy) is None
        assert (
            apply_filters(conv_from_texts("b", ["u", "a"], language="german"), policy)
            is RejectReason.LANGUAGE
        )
        assert (
            apply_filters(conv_from_texts("c", ["u", "a"], language=None), policy)
            is RejectReason.LANGUAGE
        )

    def test_moderation_and_redaction(self):
        policy = FilterPolicy(min_turns=1, drop_moderation_flagged=True, drop_redacted=True)
        flagged = conv_from_texts("a", ["u", "a"], moderation_flagged=True)
        redacted = conv_from_texts("b", ["u", "a"], redacted=True)
        clean = conv_from_texts("c", ["u", "a"], moderation_flagged=False, redacted=False)
        assert apply_filters(flagged, policy) is RejectReason.MODERATION
        assert apply_filters(redacted, policy) is RejectReason.REDACTED
        assert apply_filters(clean, policy) is None

    def test_check_order_turns_before_language(self):
        policy = FilterPolicy(min_turns=2, allowed_languages=frozenset({"english"}))
        conv = conv_from_texts("a", ["u", "a"], language="german")
        assert apply_filters(conv, policy) is RejectReason.TOO_FEW_TURNS

    def test_load_corpus_counts(self, corpus_file, fixture_policy, scenarios):
        accepted, errors, rejected = load_corpus(corpus_file, SCHEMA_PRESETS["canonical"], fixture_policy)
        assert not errors
        expected_filtered = [s for s in scenarios if s.filtered]
        assert len(accepted) == len(scenarios) - len(expected_filtered)
        assert rejected == {"too_few_turns": 1, "language": 1}

    def test_index_keeps_first_duplicate(self):
        a = conv_from_texts("dup", ["u", "a"])
        b = conv_from_texts("dup", ["x", "y"])
        index = index_conversations([a, b])
        assert index["dup"] is a
