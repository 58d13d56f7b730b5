import json
import re
import threading

import pytest

from admal.repository import (
    KIND_AD,
    KIND_DNS,
    KIND_TI,
    RecordSchemaError,
    Repository,
    StorageError,
    VerdictRecord,
    utc_now_rfc3339,
)

TS = "2024-06-01T00:00:00.000Z"


def rec(domain="d.example", provider="quad9", campaign="c1", kind=KIND_DNS,
        payload=None, ts=TS):
    return VerdictRecord(domain, provider, campaign, kind,
                         payload if payload is not None else {"verdict": "blocked"}, ts)


class TestRecord:
    def test_json_round_trip(self):
        r = rec(payload={"verdict": "blocked", "reason": None})
        assert VerdictRecord.from_json_line(r.to_json(), 1) == r

    def test_canonical_field_order(self):
        keys = list(json.loads(rec().to_json()).keys())
        assert keys == ["domain", "provider", "campaign", "kind", "payload", "ts"]

    @pytest.mark.parametrize("line,fragment", [
        ("not json", "invalid JSON"),
        ("[1,2]", "not an object"),
        ('{"domain":"d"}', "missing field"),
        ('{"domain":"d","provider":"p","campaign":"c","kind":"weird","payload":{},"ts":""}',
         "unknown kind"),
        ('{"domain":"d","provider":"p","campaign":"c","kind":"dns","payload":7,"ts":""}',
         "payload is not an object"),
    ])
    def test_schema_errors_carry_line_no(self, line, fragment):
        with pytest.raises(RecordSchemaError) as exc:
            VerdictRecord.from_json_line(line, 42)
        assert exc.value.line_no == 42
        assert fragment in str(exc.value)

    def test_timestamp_format(self):
        assert re.fullmatch(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{3}Z",
                            utc_now_rfc3339())


class TestLatestWins:
    def test_upsert_get(self, tmp_path):
        with Repository(tmp_path) as repo:
            r = rec()
            repo.upsert(r)
            assert repo.get("d.example", "quad9", "c1") == r
            assert repo.get("other.example", "quad9", "c1") is None

    def test_same_key_overwrites(self, tmp_path):
        with Repository(tmp_path) as repo:
            repo.upsert(rec(payload={"verdict": "blocked"}))
            repo.upsert(rec(payload={"verdict": "not_blocked"}, ts="2024-06-02T00:00:00.000Z"))
            assert len(repo) == 1
            assert repo.get("d.example", "quad9", "c1").payload["verdict"] == "not_blocked"

    def test_distinct_kinds_share_key_space(self, tmp_path):
        # key is (domain, provider, campaign); a TI record under its own
        # provider id never collides with the DNS verdict
        with Repository(tmp_path) as repo:
            repo.upsert(rec(kind=KIND_DNS))
            repo.upsert(rec(provider="ti", kind=KIND_TI, payload={"status": "report"}))
            assert len(repo) == 2

    def test_durable_across_reopen(self, tmp_path):
        with Repository(tmp_path) as repo:
            repo.upsert(rec())
            repo.upsert(rec(domain="e.example"))
        with Repository(tmp_path) as repo:
            assert len(repo) == 2
            assert repo.get("d.example", "quad9", "c1") is not None

    def test_overwrite_survives_reopen(self, tmp_path):
        with Repository(tmp_path) as repo:
            repo.upsert(rec(payload={"verdict": "blocked"}))
            repo.upsert(rec(payload={"verdict": "inconclusive"}))
        with Repository(tmp_path) as repo:
            assert len(repo) == 1
            assert repo.get("d.example", "quad9", "c1").payload["verdict"] == "inconclusive"


class TestQuery:
    def fill(self, repo):
        for i in range(10):
            for p in ("quad9", "cisco", "cloudflare"):
                repo.upsert(rec(domain=f"d{i:02d}.example", provider=p))

    def test_ten_by_three(self, tmp_path):
        with Repository(tmp_path) as repo:
            self.fill(repo)
            assert len(repo) == 30
            assert len(repo.query("c1")) == 30
            assert len(repo.query("c1", provider_id="cisco")) == 10

    def test_sorted_by_domain_then_provider(self, tmp_path):
        with Repository(tmp_path) as repo:
            self.fill(repo)
            keys = [(r.domain, r.provider_id) for r in repo.query("c1")]
        assert keys == sorted(keys)
        assert keys[0] == ("d00.example", "cisco")

    def test_kind_filter(self, tmp_path):
        with Repository(tmp_path) as repo:
            repo.upsert(rec(kind=KIND_DNS))
            repo.upsert(rec(provider="adlists", kind=KIND_AD, payload={"is_ad": True}))
            assert [r.kind for r in repo.query("c1", kind=KIND_AD)] == [KIND_AD]

    def test_unknown_campaign_empty(self, tmp_path):
        with Repository(tmp_path) as repo:
            self.fill(repo)
            assert repo.query("nope") == []

    def test_existing_pairs(self, tmp_path):
        with Repository(tmp_path) as repo:
            repo.upsert(rec(domain="a.example", provider="quad9"))
            repo.upsert(rec(domain="a.example", provider="cisco"))
            assert repo.existing_pairs("c1", KIND_DNS) == {
                ("a.example", "quad9"), ("a.example", "cisco")}
            assert repo.existing_pairs("c1", KIND_TI) == set()


class TestBlocksetFixture:
    def test_provider_record_counts(self, blockset_repo):
        assert len(blockset_repo.query("reference", provider_id="quad9")) == 3_395
        assert len(blockset_repo.query("reference", provider_id="cisco")) == 472
        assert len(blockset_repo.query("reference", provider_id="cloudflare")) == 2_229


class TestCrashTolerance:
    def seed(self, tmp_path):
        with Repository(tmp_path) as repo:
            repo.upsert(rec(domain="a.example"))
            repo.upsert(rec(domain="b.example"))

    def test_torn_final_line_dropped(self, tmp_path):
        self.seed(tmp_path)
        log = tmp_path / "records.jsonl"
        log.write_bytes(log.read_bytes() + b'{"domain":"torn.exa')
        with Repository(tmp_path) as repo:
            assert len(repo) == 2
            repo.upsert(rec(domain="c.example"))
        # the fragment must not contaminate later appends
        with Repository(tmp_path) as repo:
            assert len(repo) == 3

    def test_torn_line_missing_only_newline(self, tmp_path):
        self.seed(tmp_path)
        log = tmp_path / "records.jsonl"
        log.write_bytes(log.read_bytes() + rec(domain="c.example").to_json().encode())
        with Repository(tmp_path) as repo:
            assert len(repo) == 3
            repo.upsert(rec(domain="d.example"))
        with Repository(tmp_path) as repo:
            assert len(repo) == 4

    def test_interior_corruption_raises(self, tmp_path):
        self.seed(tmp_path)
        log = tmp_path / "records.jsonl"
        lines = log.read_text().splitlines()
        lines[0] = lines[0][:20]
        log.write_text("\n".join(lines) + "\n")
        with pytest.raises(StorageError, match="line 1"):
            Repository(tmp_path)

    def test_repeated_kill_recover_cycles(self, tmp_path):
        log = tmp_path / "records.jsonl"
        for i in range(5):
            with Repository(tmp_path) as repo:
                repo.upsert(rec(domain=f"d{i}.example"))
            log.write_bytes(log.read_bytes() + b"{brok")
        with Repository(tmp_path) as repo:
            assert len(repo) == 5


class TestExportImport:
    def test_round_trip_byte_identical(self, tmp_path):
        src = Repository(tmp_path / "src")
        for i in range(7):
            src.upsert(rec(domain=f"d{i}.example", payload={"i": i}))
        src.upsert(rec(domain="d3.example", payload={"i": 99}))  # overwrite
        out1 = tmp_path / "export1.jsonl"
        assert src.export(out1) == 7
        src.close()

        dst = Repository(tmp_path / "dst")
        assert dst.import_records(out1) == 7
        out2 = tmp_path / "export2.jsonl"
        dst.export(out2)
        dst.close()
        assert out1.read_bytes() == out2.read_bytes()

    def test_reimport_idempotent(self, tmp_path):
        with Repository(tmp_path / "src") as src:
            for i in range(4):
                src.upsert(rec(domain=f"d{i}.example"))
            out = tmp_path / "export.jsonl"
            src.export(out)
        with Repository(tmp_path / "dst") as dst:
            dst.import_records(out)
            dst.import_records(out)
            assert len(dst) == 4

    def test_import_reports_bad_line_number(self, tmp_path):
        path = tmp_path / "in.jsonl"
        path.write_text(rec().to_json() + "\n" + "garbage\n")
        with Repository(tmp_path / "repo") as repo:
            with pytest.raises(RecordSchemaError) as exc:
                repo.import_records(path)
            assert exc.value.line_no == 2


class TestCompaction:
    def test_drops_superseded_lines(self, tmp_path):
        with Repository(tmp_path) as repo:
            for i in range(20):
                repo.upsert(rec(domain=f"d{i % 5}.example", payload={"i": i}))
            before = repo.query("c1")
            repo.compact()
            assert repo.query("c1") == before
            repo.upsert(rec(domain="later.example"))
        log_lines = (tmp_path / "records.jsonl").read_text().splitlines()
        assert len(log_lines) == 6
        with Repository(tmp_path) as repo:
            assert len(repo) == 6


class TestManifests:
    def test_round_trip(self, tmp_path):
        with Repository(tmp_path) as repo:
            manifest = {"domains": 10, "providers": ["quad9"], "started": TS}
            repo.write_manifest("c1", manifest)
            assert repo.read_manifest("c1") == manifest
            assert repo.read_manifest("absent") is None

    def test_rewrite_replaces(self, tmp_path):
        with Repository(tmp_path) as repo:
            repo.write_manifest("c1", {"domains": 1})
            repo.write_manifest("c1", {"domains": 2, "finished": TS})
            assert repo.read_manifest("c1") == {"domains": 2, "finished": TS}


class TestConcurrency:
    def test_parallel_upserts(self, tmp_path):
        with Repository(tmp_path) as repo:
            def work(t):
                for i in range(250):
                    repo.upsert(rec(domain=f"t{t}-{i}.example"))
            threads = [threading.Thread(target=work, args=(t,)) for t in range(8)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
            assert len(repo) == 2000
        with Repository(tmp_path) as repo:
            assert len(repo) == 2000
