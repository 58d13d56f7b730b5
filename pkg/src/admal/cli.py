"""Batch front end for the pipeline.

Subcommands mirror the pipeline stages: ingest a corpus, scan it against
filtered DNS providers, fetch threat-intel reports, classify domains
against ad filter lists, and analyze the stored verdicts into a report.
Every stage is resumable; `analyze` never touches the network.

Exit codes: 0 success, 1 usage or config problem, 2 runtime failure.
Logs are JSONL on stderr; data goes to stdout or files.
"""

import argparse
import json
import logging
import os
import sys
import time

from . import __version__, analytics, ingest, mockdns
from .adlists import load_lists
from .config import (
    TI_FIXTURE,
    TI_LIVE,
    ConfigError,
    PipelineConfig,
    load_config,
)
from .dnsbroker import run_campaign
from .repository import (
    KIND_AD,
    KIND_TI,
    RecordSchemaError,
    Repository,
    StorageError,
    VerdictRecord,
    utc_now_rfc3339,
)
from .ticlient import (
    AuthError,
    FixtureTiProvider,
    LiveTiProvider,
    TiClient,
    TransportError,
    report_to_payload,
)

log = logging.getLogger("admal")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

TI_PROVIDER_ID = "ti"
ADLIST_PROVIDER_ID = "adlists"


class _JsonLogFormatter(logging.Formatter):
    def format(self, record):
        doc = {
            "ts": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(record.created)),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc, separators=(",", ":"))


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLogFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; 2 means runtime here
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _campaign_id(args, cfg: PipelineConfig) -> str:
    campaign = getattr(args, "campaign", None) or cfg.campaign
    if not campaign:
        raise ConfigError("no campaign id: pass --campaign or set 'campaign' in config")
    return campaign


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_corpus(path: str) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [
                line.strip()
                for line in fh
                if line.strip() and not line.startswith("#")
            ]
    except OSError as exc:
        raise ConfigError(f"cannot read corpus {path}: {exc}") from exc


def _build_matcher(cfg: PipelineConfig):
    if not cfg.list_files:
        return None, []
    missing = [p for p in cfg.list_files if not os.path.exists(p)]
    if missing:
        raise ConfigError(f"list files not found: {', '.join(missing)}")
    return load_lists(
        cfg.list_files,
        cfg.list_format_hint,
        subdomain_matching=cfg.subdomain_matching,
    )


def cmd_ingest(args, cfg: PipelineConfig) -> int:
    url_list = args.url_list or cfg.input_url_list
    capture = args.capture or cfg.input_capture
    if not url_list and not capture:
        raise ConfigError("nothing to ingest: set input.url_list or input.capture")
    campaign = _campaign_id(args, cfg)

    records = []
    line_rejects = []
    if url_list:
        try:
            with open(url_list, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read url list {url_list}: {exc}") from exc
        parsed, rejects = ingest.parse_url_list(text)
        records.extend(parsed)
        line_rejects.extend(rejects)
    if capture:
        try:
            with open(capture, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read capture {capture}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"capture {capture} is not valid JSON: {exc}") from exc
        records.extend(ingest.parse_capture(doc))

    psl = None
    if cfg.collapse_registrable:
        if not cfg.psl_file:
            raise ConfigError("input.collapse_registrable needs input.psl_file")
        psl = ingest.PublicSuffixList.from_file(cfg.psl_file)
    corpus = ingest.dedupe(records, psl=psl)

    os.makedirs(cfg.repository, exist_ok=True)
    corpus_path = cfg.corpus_path(campaign)
    with open(corpus_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(corpus.domains))
        if corpus.domains:
            fh.write("\n")
    log.info("ingested %d records into %d domains", len(records), len(corpus.domains))
    _emit(
        {
            "campaign": campaign,
            "corpus": corpus_path,
            "records": len(records),
            "domains": len(corpus.domains),
            "rejected_lines": len(line_rejects),
            "rejected_domains": len(corpus.rejects),
        }
    )
    return EXIT_OK


def cmd_dns_scan(args, cfg: PipelineConfig) -> int:
    campaign = _campaign_id(args, cfg)
    corpus_path = args.corpus or cfg.corpus_path(campaign)
    domains = _read_corpus(corpus_path)
    if not domains:
        raise ConfigError(f"corpus {corpus_path} is empty")
    with Repository(cfg.repository) as repo:
        summary = run_campaign(
            domains, cfg.resolvers, cfg.limits, repo, campaign
        )
    _emit(
        {
            "campaign": campaign,
            "domains": summary.domains,
            "providers": summary.providers,
            "written": summary.written,
            "skipped_existing": summary.skipped_existing,
            "inconclusive": summary.inconclusive,
        }
    )
    return EXIT_OK


def _ti_provider(cfg: PipelineConfig):
    if cfg.ti_mode == TI_FIXTURE:
        if not os.path.exists(cfg.ti_fixture):
            raise ConfigError(f"ti fixture not found: {cfg.ti_fixture}")
        return FixtureTiProvider(cfg.ti_fixture)
    if cfg.ti_mode == TI_LIVE:
        return LiveTiProvider(cfg.ti_base_url, **cfg.ti_options)
    raise ConfigError("ti.mode is 'off'; nothing to fetch")


def cmd_ti_fetch(args, cfg: PipelineConfig) -> int:
    campaign = _campaign_id(args, cfg)
    corpus_path = args.corpus or cfg.corpus_path(campaign)
    domains = _read_corpus(corpus_path)
    provider = _ti_provider(cfg)

    fetched = no_report = unfetched = skipped = 0
    with Repository(cfg.repository) as repo:
        done = {d for d, _ in repo.existing_pairs(campaign, KIND_TI)}
        with TiClient(
            provider,
            cfg.ti_cache_path(),
            requests_per_minute=cfg.ti_requests_per_minute,
        ) as client:
            for domain in domains:
                if domain in done:
                    skipped += 1
                    continue
                try:
                    result = client.fetch(domain)
                except TransportError as exc:
                    unfetched += 1
                    log.warning("unfetched %s: %s", domain, exc)
                    continue
                repo.upsert(
                    VerdictRecord(
                        domain=domain,
                        provider_id=TI_PROVIDER_ID,
                        campaign_id=campaign,
                        kind=KIND_TI,
                        payload=report_to_payload(result),
                        recorded_at=utc_now_rfc3339(),
                    )
                )
                fetched += 1
                if report_to_payload(result)["status"] == "no_report":
                    no_report += 1
    _emit(
        {
            "campaign": campaign,
            "fetched": fetched,
            "no_report": no_report,
            "unfetched": unfetched,
            "skipped_existing": skipped,
            "remote_requests": client.requests_made,
        }
    )
    return EXIT_OK if unfetched == 0 else EXIT_RUNTIME


def cmd_ads_classify(args, cfg: PipelineConfig) -> int:
    list_files = args.lists or cfg.list_files
    if not list_files:
        raise ConfigError("no filter lists: pass --lists or set lists.files")
    missing = [p for p in list_files if not os.path.exists(p)]
    if missing:
        raise ConfigError(f"list files not found: {', '.join(missing)}")
    matcher, rejects = load_lists(
        list_files, cfg.list_format_hint, subdomain_matching=cfg.subdomain_matching
    )

    campaign = getattr(args, "campaign", None) or cfg.campaign
    domains_path = args.domains or (campaign and cfg.corpus_path(campaign))
    if not domains_path:
        raise ConfigError("no domains file: pass --domains or configure a campaign")
    domains = _read_corpus(domains_path)

    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    repo = Repository(cfg.repository) if args.store else None
    try:
        if repo is not None and not campaign:
            raise ConfigError("--store needs a campaign id")
        for domain in domains:
            entry = matcher.match(domain)
            doc = {
                "domain": domain,
                "is_ad": entry is not None,
                "matched_entry": entry.pattern if entry else None,
                "source_list": entry.source_list if entry else None,
            }
            out.write(json.dumps(doc, separators=(",", ":")) + "\n")
            if repo is not None:
                repo.upsert(
                    VerdictRecord(
                        domain=domain,
                        provider_id=ADLIST_PROVIDER_ID,
                        campaign_id=campaign,
                        kind=KIND_AD,
                        payload=doc,
                        recorded_at=utc_now_rfc3339(),
                    )
                )
    finally:
        if out is not sys.stdout:
            out.close()
        if repo is not None:
            repo.close()
    log.info(
        "classified %d domains against %d entries (%d rejects across lists)",
        len(domains), matcher.entry_count, len(rejects),
    )
    return EXIT_OK


def cmd_analyze(args, cfg: PipelineConfig) -> int:
    campaign = _campaign_id(args, cfg)
    out_dir = args.out or os.path.join(cfg.repository, f"report-{campaign}")
    formats = args.formats.split(",") if args.formats else cfg.formats
    unknown = set(formats) - {"json", "csv", "plotdata"}
    if unknown:
        raise ConfigError(f"unknown formats: {', '.join(sorted(unknown))}")
    matcher, _rejects = _build_matcher(cfg)
    with Repository(cfg.repository) as repo:
        report = analytics.build_report(
            repo,
            campaign,
            matcher,
            corpus_size=cfg.corpus_size,
            ti_figure_base=cfg.ti_figure_base,
            agreement_denominator=cfg.agreement_denominator,
            config_digest=cfg.analysis_digest(),
        )
        written = analytics.emit_report(report, out_dir, formats)
    _emit({"campaign": campaign, "out": out_dir, "files": sorted(written)})
    return EXIT_OK


def cmd_run_all(args, cfg: PipelineConfig) -> int:
    for step in (cmd_ingest, cmd_dns_scan, cmd_ti_fetch, cmd_analyze):
        if step is cmd_ti_fetch and cfg.ti_mode not in (TI_FIXTURE, TI_LIVE):
            log.info("ti.mode=off; skipping report fetch")
            continue
        code = step(args, cfg)
        if code != EXIT_OK:
            return code
    return EXIT_OK


def cmd_mock_dns(args, cfg: PipelineConfig) -> int:
    farm_path = args.farm or cfg.mock_farm
    if not farm_path:
        raise ConfigError("no farm file: pass --farm or set 'mock_farm' in config")
    if not os.path.exists(farm_path):
        raise ConfigError(f"farm file not found: {farm_path}")
    farm = mockdns.load_farm_config(farm_path)
    with farm:
        _emit(farm.manifest())
        sys.stdout.flush()
        try:
            if args.duration is not None:
                time.sleep(args.duration)
            else:
                while True:
                    time.sleep(3600)
        except KeyboardInterrupt:
            log.info("farm stopping")
    return EXIT_OK


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config JSON")
    common.add_argument("--campaign", help="campaign id (overrides config)")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="admal", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("ingest", parents=[common],
                       help="parse inputs into a deduplicated domain corpus")
    p.add_argument("--url-list", help="newline-delimited URL file")
    p.add_argument("--capture", help="JSON capture file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("dns-scan", parents=[common],
                       help="query the corpus against the configured resolvers")
    p.add_argument("--corpus", help="domain file (default: the ingested corpus)")
    p.set_defaults(func=cmd_dns_scan)

    p = sub.add_parser("ti-fetch", parents=[common],
                       help="fetch threat-intel reports for the corpus")
    p.add_argument("--corpus", help="domain file (default: the ingested corpus)")
    p.set_defaults(func=cmd_ti_fetch)

    p = sub.add_parser("ads-classify", parents=[common],
                       help="classify domains against ad filter lists")
    p.add_argument("--lists", nargs="+", help="filter list files")
    p.add_argument("--domains", help="domain file to classify")
    p.add_argument("--out", help="JSONL output file (default stdout)")
    p.add_argument("--store", action="store_true",
                   help="also record classifications in the repository")
    p.set_defaults(func=cmd_ads_classify)

    p = sub.add_parser("analyze", parents=[common],
                       help="compute the report from stored verdicts (offline)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--formats", help="comma-separated: json,csv,plotdata")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run-all", parents=[common],
                       help="ingest, dns-scan, ti-fetch, analyze in sequence")
    p.add_argument("--url-list", help="newline-delimited URL file")
    p.add_argument("--capture", help="JSON capture file")
    p.add_argument("--corpus", help="domain file (default: the ingested corpus)")
    p.add_argument("--out", help="report output directory")
    p.add_argument("--formats", help="comma-separated: json,csv,plotdata")
    p.set_defaults(func=cmd_run_all)

    p = sub.add_parser("mock-dns", parents=[common],
                       help="serve a deterministic mock resolver farm")
    p.add_argument("--farm", help="farm config JSON")
    p.add_argument("--duration", type=float, help="seconds to serve (default: forever)")
    p.set_defaults(func=cmd_mock_dns)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(getattr(args, "verbose", False))
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_USAGE
    except AuthError as exc:
        log.error("auth error: %s", exc)
        return EXIT_RUNTIME
    except (StorageError, RecordSchemaError) as exc:
        log.error("storage error: %s", exc)
        return EXIT_RUNTIME
    except analytics.UnknownCampaign as exc:
        log.error("no records for campaign %s", exc)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        log.error("interrupted; rerun the same command to resume")
        return EXIT_RUNTIME
    except OSError as exc:
        log.error("io error: %s", exc)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())
