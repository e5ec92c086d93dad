"""Records, event-log IO, chunking, temporal split and impression pairs."""

import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argus.data import (Feedback, Interaction, UserSequence, build_impression_pairs, chunk_sequences,
                        feedback_rank, load_events, read_event_log, temporal_split, write_events)

from conftest import make_log


def _seq_of(n, user="u0", start_ts=0):
    recs = [(user, start_ts + 10 * t, 0, f"i{t % 3}", 0, 0, 0) for t in range(n)]
    return make_log(recs).sequences()[0]


def _impressions(ranks):
    """One user whose impressions carry the given feedback ranks (2 like, 1 plain, 0 skip)."""
    fb = {2: (1, 0), 1: (0, 0), 0: (0, 1)}
    recs = [("u", 10 * t, 2, f"i{t}", *fb[r], 0) for t, r in enumerate(ranks)]
    return make_log(recs).sequences()[0]


class TestRecords:
    def test_feedback_range_checked(self):
        with pytest.raises(ValueError):
            Feedback(like=2, skip=0, listen_bucket=0)
        with pytest.raises(ValueError):
            Feedback(like=0, skip=0, listen_bucket=4)

    def test_impression_iff_recommendation_surface(self):
        fb = Feedback(1, 0, 2)
        Interaction("u", 5, "recommended", "mobile", "i", fb, True)
        with pytest.raises(ValueError):
            Interaction("u", 5, "search", "mobile", "i", fb, True)
        with pytest.raises(ValueError):
            Interaction("u", 5, "recommended", "mobile", "i", fb, False)

    def test_negative_timestamp_rejected(self):
        with pytest.raises(ValueError):
            Interaction("u", -1, "organic", "mobile", "i", Feedback(0, 0, 0), False)

    def test_record_round_trip(self):
        x = Interaction("u7", 123, "recommended", "speaker", "i9", Feedback(0, 1, 3), True)
        assert Interaction.from_record(json.loads(json.dumps(x.to_record()))) == x

    def test_feedback_rank(self):
        assert feedback_rank(1, 1) == 2
        assert feedback_rank(0, 0) == 1
        assert feedback_rank(0, 1) == 0
        assert feedback_rank(0, 0, 3, use_listen=True) > feedback_rank(0, 0, 1, use_listen=True)
        assert feedback_rank(1, 0, 0, use_listen=True) > feedback_rank(0, 0, 3, use_listen=True)


class TestLoadEvents:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert load_events(p) == []

    def test_shuffled_lines_sorted_per_user(self, tmp_path):
        lines = []
        for u in ("a", "b", "c"):
            for t in (30, 10, 20):
                lines.append(json.dumps({"user_id": u, "ts": t, "surface": "organic", "device": "mobile",
                                         "item_id": f"x{t}", "like": 0, "skip": 0, "listen_bucket": 1,
                                         "impression": 0}))
        random.Random(0).shuffle(lines)
        p = tmp_path / "ev.jsonl"
        p.write_text("\n".join(lines) + "\n")
        seqs = load_events(p)
        assert [s.user_id for s in seqs] == ["a", "b", "c"]
        for s in seqs:
            assert list(s.timestamps) == [10, 20, 30]

    def test_round_trip_generated(self, tmp_path, tiny_log):
        p = tmp_path / "gen.jsonl"
        write_events(p, tiny_log, tiny_log.header)
        back = read_event_log(p)
        assert back.user_ids == tiny_log.user_ids and back.item_ids == tiny_log.item_ids
        for col in tiny_log.COLUMNS:
            np.testing.assert_array_equal(getattr(back, col), getattr(tiny_log, col))
        assert json.loads(p.with_name(p.name + ".header.json").read_text())["K"] == 3

    def test_malformed_tolerated_below_one_percent(self, tmp_path, tiny_log):
        p = tmp_path / "bad.jsonl"
        write_events(p, tiny_log)
        with open(p, "a") as fh:
            fh.write("{not json\n")
        assert len(read_event_log(p)) == len(tiny_log)

    def test_malformed_above_one_percent_fails(self, tmp_path):
        good = json.dumps({"user_id": "a", "ts": 1, "surface": "organic", "device": "mobile", "item_id": "x",
                           "like": 0, "skip": 0, "listen_bucket": 0, "impression": 0})
        p = tmp_path / "bad.jsonl"
        p.write_text("\n".join([good] * 50 + ['{"user_id": "a", "ts": -4}']) + "\n")
        with pytest.raises(ValueError, match="malformed"):
            read_event_log(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_events(tmp_path / "nope.jsonl")


class TestChunking:
    def test_sizes(self):
        assert [len(c) for c in chunk_sequences([_seq_of(10)], 4)] == [4, 4, 2]

    def test_singleton_dropped(self):
        assert chunk_sequences([_seq_of(1)], 4) == []
        assert [len(c) for c in chunk_sequences([_seq_of(9)], 4)] == [4, 4]

    def test_chunk_len_validated(self):
        with pytest.raises(ValueError):
            chunk_sequences([_seq_of(5)], 1)

    @given(st.integers(1, 60), st.integers(2, 17))
    @settings(max_examples=60, deadline=None)
    def test_concatenation_oracle(self, n, k):
        seq = _seq_of(n)
        chunks = chunk_sequences([seq], k)
        rows = [r for c in chunks for r in range(c.start, c.stop)]
        expected = list(range(seq.start, seq.stop))
        if n % k == 1:          # the trailing singleton cannot form a target
            expected = expected[:-1]
        assert rows == expected
        for c in chunks:
            assert 2 <= len(c) <= k
            assert np.all(np.diff(c.timestamps) >= 0)


class TestTemporalSplit:
    def test_all_before_cutoff(self, caplog):
        train, test = temporal_split([_seq_of(5)], cutoff_ts=1000, holdout_span=100)
        assert test == [] and len(train[0]) == 5
        assert "no interactions" in caplog.text

    def test_event_at_cutoff_is_test(self):
        train, test = temporal_split([_seq_of(5)], cutoff_ts=20, holdout_span=100)
        assert list(train[0].timestamps) == [0, 10]
        t = test[0]
        assert t.timestamps[t.n_context] == 20
        assert not t.target_mask[: t.n_context].any()

    def test_partition_and_scan(self, tiny_log):
        seqs = tiny_log.sequences()
        cutoff, span = 6 * 86_400, 3 * 86_400
        train, test = temporal_split(seqs, cutoff, span)
        for s in train:
            assert np.all(s.timestamps < cutoff)
        targets = set()
        for s in test:
            rows = np.arange(s.start, s.stop)[s.target_mask]
            assert np.all((tiny_log.ts[rows] >= cutoff) & (tiny_log.ts[rows] < cutoff + span))
            targets.update(rows.tolist())
        train_rows = {r for s in train for r in range(s.start, s.stop)}
        in_window = set(np.flatnonzero(tiny_log.ts < cutoff + span).tolist())
        assert train_rows.isdisjoint(targets)
        assert train_rows | targets == in_window

    def test_context_limited(self):
        _, test = temporal_split([_seq_of(10)], cutoff_ts=50, holdout_span=1000, context_len=2)
        assert test[0].n_context == 2 and len(test[0]) == 7


def _brute_pairs(ranks, window):
    out = set()
    for i in range(len(ranks)):
        for j in range(i + 1, min(i + window, len(ranks))):
            if ranks[i] != ranks[j]:
                out.add((i, j) if ranks[i] > ranks[j] else (j, i))
    return out


class TestImpressionPairs:
    def test_adjacent_different(self):
        pairs = build_impression_pairs(_impressions([1, 0]))
        assert len(pairs) == 1
        assert pairs[0].first < pairs[0].second

    def test_equal_ranks(self):
        assert build_impression_pairs(_impressions([1, 1, 1])) == []

    def test_crafted_six(self):
        ranks = [2, 0, 1, 1, 2, 0]
        seq = _impressions(ranks)
        for window in (2, 3, 6):
            got = {(p.first - seq.start, p.second - seq.start) for p in build_impression_pairs(seq, window)}
            assert got == _brute_pairs(ranks, window)

    def test_skips_organic_events(self):
        recs = [("u", 0, 2, "a", 1, 0, 0), ("u", 5, 0, "b", 0, 1, 0), ("u", 9, 2, "c", 0, 1, 0)]
        seq = make_log(recs).sequences()[0]
        pairs = build_impression_pairs(seq)
        assert [(p.first, p.second) for p in pairs] == [(seq.start, seq.start + 2)]

    @given(st.lists(st.integers(0, 2), min_size=0, max_size=30), st.integers(2, 5))
    @settings(max_examples=80, deadline=None)
    def test_antisymmetric_and_matches_brute(self, ranks, window):
        if not ranks:
            return
        seq = _impressions(ranks)
        got = [(p.first - seq.start, p.second - seq.start) for p in build_impression_pairs(seq, window)]
        assert set(got) == _brute_pairs(ranks, window)
        assert not any((b, a) in set(got) for a, b in got)
        for a, b in got:
            assert ranks[a] > ranks[b]

    def test_context_not_paired(self):
        seq = _impressions([2, 0, 2, 0])
        ctx = UserSequence(seq.log, seq.user, seq.start, seq.stop, n_context=2)
        got = [(p.first - seq.start, p.second - seq.start) for p in build_impression_pairs(ctx)]
        assert got == [(2, 3)]
