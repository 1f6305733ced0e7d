"""Tests for the time-series store: query parsing, windowed aggregation, journal."""

import json
import random

import pytest

from casca.errors import QueryParseError, ValidationError
from casca.store import (
    QuerySpec,
    RemoteStore,
    StoreServer,
    TelemetryPoint,
    TimeSeriesStore,
    format_query,
    parse_query,
)


def pt(measurement="fps", tags=None, fields=None, ts=0):
    return TelemetryPoint(measurement, tags or {}, fields if fields is not None else {"value": 1.0}, ts)


class TestPointValidation:
    def test_ok(self):
        pt(tags={"client": "c1"}, fields={"value": 3, "other": 1.5}, ts=10).validate()

    def test_rejects_bad_fields(self):
        with pytest.raises(ValidationError):
            pt(fields={}).validate()
        with pytest.raises(ValidationError):
            pt(fields={"v": "high"}).validate()
        with pytest.raises(ValidationError):
            pt(fields={"v": True}).validate()  # bools are not field values

    def test_rejects_bad_tags_and_ts(self):
        with pytest.raises(ValidationError):
            pt(tags={"k": 1}).validate()
        with pytest.raises(ValidationError):
            pt(ts=-1).validate()
        with pytest.raises(ValidationError):
            TelemetryPoint("", {}, {"v": 1}, 0).validate()


class TestQueryParsing:
    def test_minimal(self):
        spec = parse_query("mean(fps.value, 60s)")
        assert spec == QuerySpec("mean", "fps", "value", 60)

    def test_all_aggregations(self):
        for agg in ("last", "mean", "min", "max", "count"):
            assert parse_query(f"{agg}(m.f, 5s)").agg == agg

    def test_where_clause_sorted(self):
        spec = parse_query("max(power.apparent_w, 300s) where host=anemone, rack=r2")
        assert spec.tags == (("host", "anemone"), ("rack", "r2"))
        # tag order in the text does not matter
        other = parse_query("max(power.apparent_w, 300s) where rack=r2, host=anemone")
        assert spec == other

    def test_whitespace_tolerated(self):
        assert parse_query("  mean( fps.value , 60s )  ") == parse_query("mean(fps.value, 60s)")

    def test_format_roundtrip(self):
        texts = [
            "last(m.f, 1s)",
            "mean(fps.value, 60s)",
            "count(power.apparent_w, 300s) where host=anemone, rack=r2",
        ]
        for text in texts:
            spec = parse_query(text)
            assert format_query(spec) == text
            assert parse_query(format_query(spec)) == spec

    def test_error_positions(self):
        """Parse failures carry the offset of the offending token."""
        with pytest.raises(QueryParseError) as e:
            parse_query("median(fps.value, 60s)")
        assert e.value.position == 0
        with pytest.raises(QueryParseError) as e:
            parse_query("mean fps.value, 60s)")
        assert e.value.position == 5  # expected '('
        with pytest.raises(QueryParseError) as e:
            parse_query("mean(fps.value, 60s) nonsense x=y")
        assert e.value.position == 21
        with pytest.raises(QueryParseError) as e:
            parse_query("mean(fps.value, 60s) where host anemone")
        assert e.value.position == 32  # expected '='

    def test_rejects_zero_window(self):
        with pytest.raises(QueryParseError):
            parse_query("mean(fps.value, 0s)")

    def test_rejects_missing_unit(self):
        with pytest.raises(QueryParseError):
            parse_query("mean(fps.value, 60)")

    def test_rejects_non_string(self):
        with pytest.raises(QueryParseError):
            parse_query(None)


class TestStoreQueries:
    def test_window_half_open(self):
        """Window is (now - w, now]: the left edge is excluded, the right included."""
        store = TimeSeriesStore()
        for ts, v in [(1000, 1.0), (2000, 2.0), (3000, 3.0)]:
            store.write(pt(fields={"value": v}, ts=ts))
        assert store.query("count(fps.value, 2s)", 3000) == 2.0  # 1000 == lo, excluded
        assert store.query("mean(fps.value, 2s)", 3000) == 2.5
        assert store.query("count(fps.value, 2s)", 4999) == 1.0  # 3000 still inside
        assert store.query("count(fps.value, 2s)", 5000) == 0.0  # now it sits on the edge

    def test_future_points_not_visible(self):
        store = TimeSeriesStore()
        store.write(pt(ts=5000))
        assert store.query("count(fps.value, 60s)", 4999) == 0.0

    def test_aggregations(self):
        store = TimeSeriesStore()
        for ts, v in [(1000, 4.0), (2000, 1.0), (3000, 9.0)]:
            store.write(pt(fields={"value": v}, ts=ts))
        assert store.query("min(fps.value, 60s)", 3000) == 1.0
        assert store.query("max(fps.value, 60s)", 3000) == 9.0
        assert store.query("mean(fps.value, 60s)", 3000) == pytest.approx(14.0 / 3)
        assert store.query("last(fps.value, 60s)", 3000) == 9.0

    def test_empty_window(self):
        store = TimeSeriesStore()
        assert store.query("mean(fps.value, 60s)", 1000) is None
        assert store.query("count(fps.value, 60s)", 1000) == 0.0

    def test_missing_field_skipped(self):
        store = TimeSeriesStore()
        store.write(pt(fields={"other": 1.0}, ts=1000))
        store.write(pt(fields={"value": 2.0}, ts=2000))
        assert store.query("count(fps.value, 60s)", 2000) == 1.0
        assert store.query("mean(fps.value, 60s)", 2000) == 2.0

    def test_tag_filter_is_subset_match(self):
        store = TimeSeriesStore()
        store.write(pt(tags={"client": "c1", "rack": "r1"}, fields={"value": 1.0}, ts=1000))
        store.write(pt(tags={"client": "c2", "rack": "r1"}, fields={"value": 3.0}, ts=1000))
        assert store.query("mean(fps.value, 60s) where rack=r1", 1000) == 2.0
        assert store.query("mean(fps.value, 60s) where client=c1", 1000) == 1.0
        assert store.query("mean(fps.value, 60s) where client=c1, rack=r1", 1000) == 1.0
        assert store.query("mean(fps.value, 60s) where client=c3", 1000) is None

    def test_last_across_series_uses_write_order_at_ties(self):
        store = TimeSeriesStore()
        store.write(pt(tags={"client": "c1"}, fields={"value": 1.0}, ts=1000))
        store.write(pt(tags={"client": "c2"}, fields={"value": 2.0}, ts=1000))
        assert store.query("last(fps.value, 60s)", 1000) == 2.0

    def test_rewrite_same_key_same_ts_replaces(self):
        store = TimeSeriesStore()
        store.write(pt(fields={"value": 1.0}, ts=1000))
        store.write(pt(fields={"value": 7.0}, ts=1000))
        assert store.count() == 1
        assert store.query("last(fps.value, 60s)", 1000) == 7.0

    def test_out_of_order_writes(self):
        store = TimeSeriesStore()
        store.write(pt(ts=3000, fields={"value": 3.0}))
        store.write(pt(ts=1000, fields={"value": 1.0}))
        store.write(pt(ts=2000, fields={"value": 2.0}))
        assert [p.ts for p in store.points()] == [1000, 2000, 3000]
        assert store.query("last(fps.value, 60s)", 5000) == 3.0

    def test_query_accepts_spec_object(self):
        store = TimeSeriesStore()
        store.write(pt(ts=1000))
        spec = QuerySpec("count", "fps", "value", 60)
        assert store.query(spec, 1000) == 1.0


class TestRandomizedAggregation:
    def test_against_brute_force(self):
        """Windowed aggregates must agree with a naive reference implementation."""
        rng = random.Random(1234)
        store = TimeSeriesStore()
        rows = []  # (ts, tags, value) in write order, deduplicated like the store
        for _ in range(600):
            ts = rng.randint(0, 5000)
            tags = {"c": rng.choice(["a", "b", "c"])}
            if rng.random() < 0.3:
                tags["r"] = rng.choice(["x", "y"])
            value = round(rng.uniform(-50, 50), 3)
            store.write(pt(tags=tags, fields={"value": value}, ts=ts))
            key = (ts, tuple(sorted(tags.items())))
            rows = [row for row in rows if (row[0], tuple(sorted(row[1].items()))) != key]
            rows.append((ts, tags, value))

        def reference(agg, window_s, want, now):
            lo = now - window_s * 1000
            vals = [v for (ts, tags, v) in rows
                    if lo < ts <= now and all(tags.get(k) == tv for k, tv in want.items())]
            if agg == "count":
                return float(len(vals))
            if not vals:
                return None
            if agg == "mean":
                return sum(vals) / len(vals)
            return min(vals) if agg == "min" else max(vals)

        for _ in range(300):
            agg = rng.choice(["mean", "min", "max", "count"])
            window = rng.randint(1, 6)
            now = rng.randint(0, 6000)
            want = {}
            if rng.random() < 0.5:
                want["c"] = rng.choice(["a", "b", "c"])
            text = f"{agg}(fps.value, {window}s)"
            if want:
                text += " where " + ", ".join(f"{k}={v}" for k, v in want.items())
            got = store.query(text, now)
            exp = reference(agg, window, want, now)
            if exp is None:
                assert got is None, text
            else:
                assert got == pytest.approx(exp), (text, now)

    def test_last_matches_latest_write(self):
        # 'last' ties on equal timestamps break toward the most recent write
        rng = random.Random(99)
        store = TimeSeriesStore()
        latest = {}
        writes = []
        for i in range(400):
            ts = rng.randint(0, 1000)
            tags = {"c": rng.choice(["a", "b"])}
            value = float(i)
            store.write(pt(tags=tags, fields={"value": value}, ts=ts))
            writes.append((ts, value))
        for now in (250, 500, 750, 1000):
            inside = [(ts, i, v) for i, (ts, v) in enumerate(writes) if ts <= now]
            expected = max(inside, key=lambda r: (r[0], r[1]))[2] if inside else None
            assert store.query("last(fps.value, 1000s)", now) == expected


class TestJournal:
    def test_journal_and_replay(self, tmp_path):
        path = tmp_path / "journal.ndjson"
        store = TimeSeriesStore(journal_path=str(path))
        store.write(pt(tags={"client": "c1"}, fields={"value": 1.5}, ts=100))
        store.write(pt(tags={"client": "c2"}, fields={"value": 2.5}, ts=200))
        store.close()

        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert [set(l) for l in lines] == [{"m", "tg", "f", "ts"}] * 2

        fresh = TimeSeriesStore()
        assert fresh.replay(str(path)) == 2
        assert fresh.count() == 2
        assert fresh.query("mean(fps.value, 60s)", 200) == 2.0

    def test_dump_then_replay_preserves_points(self, tmp_path):
        store = TimeSeriesStore()
        rng = random.Random(7)
        for _ in range(50):
            store.write(pt(tags={"c": rng.choice("ab")}, fields={"value": rng.random()}, ts=rng.randint(0, 99)))
        path = tmp_path / "dump.jsonl"
        n = store.dump_jsonl(str(path))
        fresh = TimeSeriesStore()
        assert fresh.replay(str(path)) == n
        assert fresh.count() == store.count()
        for q in ("mean(fps.value, 100s)", "min(fps.value, 100s)", "max(fps.value, 100s)"):
            assert fresh.query(q, 100_000) == pytest.approx(store.query(q, 100_000))

    def test_replay_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.ndjson"
        path.write_text('{"m": "fps", "tg": {}, "f": {"v": 1}, "ts": 1}\nnot json\n')
        store = TimeSeriesStore()
        with pytest.raises(ValidationError, match="line 2"):
            store.replay(str(path))


class TestStoreOverTcp:
    def test_write_query_count(self):
        store = TimeSeriesStore()
        server = StoreServer(store, listen="127.0.0.1:0")
        try:
            client = RemoteStore(server.address)
            client.write(pt(tags={"client": "c1"}, fields={"value": 4.0}, ts=1000))
            client.write(pt(tags={"client": "c1"}, fields={"value": 6.0}, ts=2000))
            assert client.count() == 2
            assert client.query("mean(fps.value, 60s)", 2000) == 5.0
            assert client.query(QuerySpec("last", "fps", "value", 60), 2000) == 6.0
            assert client.query("mean(fps.value, 60s)", 100_000_000) is None
            client.close()
        finally:
            server.stop()

    def test_errors_surface_as_validation(self):
        store = TimeSeriesStore()
        server = StoreServer(store, listen="127.0.0.1:0")
        try:
            client = RemoteStore(server.address)
            with pytest.raises(ValidationError):
                client.query("median(fps.value, 60s)", 0)
            with pytest.raises(ValidationError):
                client.write(pt(fields={"v": "bad"}, ts=0))
            # the connection stays usable after an error response
            client.write(pt(ts=0))
            assert client.count() == 1
            client.close()
        finally:
            server.stop()
