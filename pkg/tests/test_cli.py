import json
from types import SimpleNamespace

import pytest

from admal.cli import main
from admal.mockdns import BEHAVIOR_NXDOMAIN, MockDnsFarm, MockProviderSpec
from admal.repository import KIND_AD, KIND_TI, Repository
from admal.ticlient import NoReport, TransportError

DOMAINS = [f"d{i}.example" for i in range(10)]
P1_BLOCKS = {"d0.example", "d1.example", "d2.example"}
P2_BLOCKS = {"d2.example", "d3.example"}


def parse_stdout(text):
    """stdout may hold several pretty-printed JSON documents."""
    decoder = json.JSONDecoder()
    docs, idx = [], 0
    while idx < len(text):
        while idx < len(text) and text[idx] in " \r\n\t":
            idx += 1
        if idx >= len(text):
            break
        doc, idx = decoder.raw_decode(text, idx)
        docs.append(doc)
    return docs


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, parse_stdout(out)


@pytest.fixture
def env(tmp_path):
    specs = [
        MockProviderSpec("p1", blocklist=frozenset(P1_BLOCKS)),
        MockProviderSpec("p2", blocklist=frozenset(P2_BLOCKS),
                         block_behavior=BEHAVIOR_NXDOMAIN),
        MockProviderSpec("p3", blocklist=frozenset()),
        MockProviderSpec("open", blocklist=frozenset()),
    ]
    with MockDnsFarm(specs, seed=0) as farm:
        urls = tmp_path / "urls.txt"
        urls.write_text("".join(f"https://{d}/index.html\n" for d in DOMAINS))
        ads = tmp_path / "ads.txt"
        ads.write_text("d1.example\nd3.example\nd7.example\n")

        def addr(provider_id):
            return "%s:%d" % farm.addresses[provider_id]

        def resolver(provider_id, signature, control=None):
            doc = {
                "provider_id": provider_id,
                "filtered_address": addr(provider_id),
                "blocked_signatures": [signature],
                "timeout_ms": 2000,
                "retries": 1,
            }
            if control:
                doc["control_address"] = addr(control)
            return doc

        config = {
            "repository": str(tmp_path / "repo"),
            "campaign": "t1",
            "input": {"url_list": str(urls)},
            "resolvers": [
                resolver("p1", {"kind": "sinkhole_a", "ips": ["0.0.0.0"]}),
                resolver("p2", {"kind": "nxdomain"}, control="open"),
                resolver("p3", {"kind": "sinkhole_a", "ips": ["0.0.0.0"]}),
            ],
            "lists": {"files": [str(ads)]},
            "limits": {"max_inflight": 16, "per_provider_qps": 500},
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        yield SimpleNamespace(
            tmp=tmp_path,
            config=str(cfg_path),
            config_doc=config,
            repo=str(tmp_path / "repo"),
            corpus=str(tmp_path / "repo" / "corpus-t1.txt"),
            ads=str(ads),
            farm=farm,
        )


def write_variant(env, mutate, name):
    doc = json.loads(json.dumps(env.config_doc))
    mutate(doc)
    path = env.tmp / name
    path.write_text(json.dumps(doc))
    return str(path)


class TestIngest:
    def test_summary(self, env, capsys):
        code, docs = run(capsys, "ingest", "--config", env.config)
        assert code == 0
        assert docs[-1]["domains"] == 10
        assert docs[-1]["records"] == 10
        assert docs[-1]["rejected_lines"] == 0
        corpus = open(env.corpus).read().split()
        assert sorted(corpus) == sorted(DOMAINS)


class TestScanAndAnalyze:
    def test_run_all(self, env, capsys):
        code, docs = run(capsys, "run-all", "--config", env.config)
        assert code == 0
        assert len(docs) == 3  # ingest, dns-scan, analyze; ti is off
        scan = docs[1]
        assert scan["written"] == 30
        assert scan["providers"] == ["p1", "p2", "p3"]

        report = json.loads(
            open(f"{env.repo}/report-t1/report.json").read())
        assert report["corpus_size"] == 10
        by_id = {p["provider"]: p for p in report["providers"]}
        assert by_id["p1"]["blocked"] == 3
        assert by_id["p2"]["blocked"] == 2
        assert by_id["p3"]["blocked"] == 0
        assert by_id["p1"]["blocked_pct"] == 30.0
        # ads list holds d1 (blocked by p1) and d3 (blocked by p2)
        assert by_id["p1"]["ad_blocked"] == 1
        assert by_id["p1"]["ad_share_pct"] == 33.33
        assert by_id["p2"]["ad_blocked"] == 1
        assert by_id["p2"]["ad_share_pct"] == 50.0
        assert by_id["p3"]["ad_share_empty_base"] is True
        assert report["venn"]["sets"] == ["p1", "p2", "p3"]
        assert report["venn"]["a_only"] == 2
        assert report["venn"]["b_only"] == 1
        assert report["venn"]["ab"] == 1
        assert report["venn"]["union"] == 4

    def test_dns_scan_resumes(self, env, capsys):
        assert run(capsys, "ingest", "--config", env.config)[0] == 0
        code, docs = run(capsys, "dns-scan", "--config", env.config)
        assert code == 0
        assert docs[-1]["written"] == 30
        code, docs = run(capsys, "dns-scan", "--config", env.config)
        assert code == 0
        assert docs[-1]["written"] == 0
        assert docs[-1]["skipped_existing"] == 30

    def test_analyze_byte_identical(self, env, capsys):
        assert run(capsys, "run-all", "--config", env.config)[0] == 0
        out_a = str(env.tmp / "rep-a")
        out_b = str(env.tmp / "rep-b")
        assert run(capsys, "analyze", "--config", env.config, "--out", out_a)[0] == 0
        assert run(capsys, "analyze", "--config", env.config, "--out", out_b)[0] == 0
        for name in ("report.json", "venn.csv", "shares.csv", "ecdf.csv"):
            assert open(f"{out_a}/{name}", "rb").read() == \
                open(f"{out_b}/{name}", "rb").read(), name

    def test_analyze_before_scan_is_runtime_error(self, env, capsys):
        code, _ = run(capsys, "analyze", "--config", env.config)
        assert code == 2


class TestAdsClassify:
    def classify(self, env, capsys, *extra):
        assert run(capsys, "ingest", "--config", env.config)[0] == 0
        code = main(["ads-classify", "--config", env.config,
                     "--domains", env.corpus, *extra])
        return code, capsys.readouterr().out

    def test_stdout_jsonl(self, env, capsys):
        code, out = self.classify(env, capsys)
        assert code == 0
        lines = [json.loads(l) for l in out.splitlines() if l]
        assert len(lines) == 10
        verdicts = {doc["domain"]: doc["is_ad"] for doc in lines}
        assert verdicts["d1.example"] is True
        assert verdicts["d3.example"] is True
        assert verdicts["d7.example"] is True
        assert verdicts["d0.example"] is False
        hit = next(doc for doc in lines if doc["domain"] == "d1.example")
        assert hit["matched_entry"] == "d1.example"
        assert hit["source_list"] == env.ads

    def test_out_file_and_store(self, env, capsys):
        out_path = env.tmp / "ads.jsonl"
        code, _ = self.classify(env, capsys, "--out", str(out_path), "--store")
        assert code == 0
        assert len(out_path.read_text().splitlines()) == 10
        with Repository(env.repo) as repo:
            records = repo.query("t1", provider_id="adlists", kind=KIND_AD)
            assert len(records) == 10
            assert sum(r.payload["is_ad"] for r in records) == 3

    def test_explicit_lists_flag(self, env, capsys):
        other = env.tmp / "other.txt"
        other.write_text("d5.example\n")
        code, out = self.classify(env, capsys, "--lists", str(other))
        assert code == 0
        verdicts = {doc["domain"]: doc["is_ad"]
                    for doc in map(json.loads, out.splitlines())}
        assert verdicts["d5.example"] is True
        assert verdicts["d1.example"] is False


class TestTiFetch:
    def fixture_config(self, env):
        fixture = env.tmp / "ti.jsonl"
        lines = []
        for i in range(6):
            lines.append({"domain": f"d{i}.example", "harmless": 8,
                          "suspicious": 1 if i < 2 else 0})
        fixture.write_text("\n".join(json.dumps(l) for l in lines) + "\n")
        return write_variant(
            env,
            lambda doc: doc.update({"ti": {"mode": "fixture", "fixture": str(fixture),
                                           "requests_per_minute": 100000}}),
            "config-ti.json",
        )

    def test_fetch_then_resume(self, env, capsys):
        cfg = self.fixture_config(env)
        assert run(capsys, "ingest", "--config", cfg)[0] == 0
        code, docs = run(capsys, "ti-fetch", "--config", cfg)
        assert code == 0
        assert docs[-1]["fetched"] == 10
        assert docs[-1]["no_report"] == 4
        assert docs[-1]["remote_requests"] == 10
        code, docs = run(capsys, "ti-fetch", "--config", cfg)
        assert code == 0
        assert docs[-1]["fetched"] == 0
        assert docs[-1]["skipped_existing"] == 10
        assert docs[-1]["remote_requests"] == 0
        with Repository(env.repo) as repo:
            assert len(repo.query("t1", kind=KIND_TI)) == 10

    def test_report_includes_ti_section(self, env, capsys):
        cfg = self.fixture_config(env)
        assert run(capsys, "run-all", "--config", cfg)[0] == 0
        report = json.loads(open(f"{env.repo}/report-t1/report.json").read())
        assert report["ti"]["with_report"] == 6
        assert report["ti"]["no_report"] == 4
        assert report["ti"]["threat_count"] == 2
        assert len(report["ecdf"]) == 2

    def test_transport_failures_exit_2(self, env, capsys, monkeypatch):
        class FailingProvider:
            def __init__(self, path):
                pass

            def lookup(self, domain):
                if domain.startswith("d9"):
                    raise TransportError(domain)
                return NoReport(domain)

        monkeypatch.setattr("admal.cli.FixtureTiProvider", FailingProvider)
        cfg = self.fixture_config(env)
        assert run(capsys, "ingest", "--config", cfg)[0] == 0
        code, docs = run(capsys, "ti-fetch", "--config", cfg)
        assert code == 2
        assert docs[-1]["unfetched"] == 1
        assert docs[-1]["fetched"] == 9

    def test_fetch_with_ti_off_is_usage_error(self, env, capsys):
        assert run(capsys, "ingest", "--config", env.config)[0] == 0
        code, _ = run(capsys, "ti-fetch", "--config", env.config)
        assert code == 1


class TestMockDnsCommand:
    def test_serves_for_duration(self, env, capsys):
        farm_doc = {"seed": 5, "providers": [
            {"provider_id": "m1", "blocklist": ["x.example"]}]}
        farm_path = env.tmp / "farm.json"
        farm_path.write_text(json.dumps(farm_doc))
        code, docs = run(capsys, "mock-dns", "--config", env.config,
                         "--farm", str(farm_path), "--duration", "0.05")
        assert code == 0
        manifest = docs[-1]
        assert manifest["seed"] == 5
        assert manifest["providers"][0]["provider_id"] == "m1"
        assert manifest["providers"][0]["blocklist_size"] == 1

    def test_missing_farm_file(self, env, capsys):
        code, _ = run(capsys, "mock-dns", "--config", env.config,
                      "--farm", str(env.tmp / "absent.json"))
        assert code == 1


class TestUsageErrors:
    def test_missing_config_file(self, tmp_path, capsys):
        code, _ = run(capsys, "ingest", "--config", str(tmp_path / "absent.json"))
        assert code == 1

    def test_config_not_json(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{")
        code, _ = run(capsys, "analyze", "--config", str(path))
        assert code == 1

    def test_no_subcommand_prints_help(self, capsys):
        assert main([]) == 1
        assert "SUBCOMMAND" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate", "--config", "x.json"])
        assert exc.value.code == 1

    def test_missing_required_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["ingest"])
        assert exc.value.code == 1

    def test_unknown_report_format(self, env, capsys):
        code, _ = run(capsys, "analyze", "--config", env.config, "--formats", "xml")
        assert code == 1

    def test_nothing_to_ingest(self, env, capsys):
        cfg = write_variant(env, lambda doc: doc.update({"input": {}}),
                            "config-noinput.json")
        code, _ = run(capsys, "ingest", "--config", cfg)
        assert code == 1

    def test_missing_campaign(self, env, capsys):
        def drop_campaign(doc):
            del doc["campaign"]
        cfg = write_variant(env, drop_campaign, "config-nocamp.json")
        code, _ = run(capsys, "ingest", "--config", cfg)
        assert code == 1

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
