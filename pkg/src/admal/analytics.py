"""Turn stored verdicts into the headline numbers: per-provider blocked
sets and their three-way overlap, ad shares, threat-intel agreement
statistics, and a deterministic report with plot-ready CSV series.

Display percentages are truncated, not rounded (floor at the last shown
digit); the two modes are two decimals for shares and one decimal for
coarser threat figures.  Overlap counts are exclusive regions: "ab" counts
elements in a and b but not c.
"""

import json
import os
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

from .adlists import AdMatcher
from .dnsbroker import BLOCKED, INCONCLUSIVE, NOT_BLOCKED
from .repository import KIND_DNS, KIND_TI, Repository
from .ticlient import (
    OPINIONS,
    NoReport,
    UndefinedRatio,
    agreement_fraction,
    payload_to_report,
    threat_flag,
)

TRUNCATE2 = "truncate2"
TRUNCATE1 = "truncate1"

VENN_READING = "exclusive-regions"


class ZeroBase(Exception):
    """Percentage asked for over an empty base."""


class EmptyInput(Exception):
    pass


class UnknownCampaign(Exception):
    pass


def percent(count: int, base: int, mode: str = TRUNCATE2) -> float:
    if base <= 0:
        raise ZeroBase(f"base {base}")
    if mode == TRUNCATE2:
        return (count * 10**4 // base) / 100
    if mode == TRUNCATE1:
        return (count * 10**3 // base) / 10
    raise ValueError(f"unknown percent mode {mode!r}")


@dataclass(frozen=True)
class Venn3:
    a_only: int
    b_only: int
    c_only: int
    ab: int
    ac: int
    bc: int
    abc: int
    total_a: int
    total_b: int
    total_c: int

    @property
    def union(self) -> int:
        return (
            self.a_only + self.b_only + self.c_only
            + self.ab + self.ac + self.bc + self.abc
        )

    def __post_init__(self):
        regions = (self.a_only, self.b_only, self.c_only,
                   self.ab, self.ac, self.bc, self.abc)
        if any(r < 0 for r in regions):
            raise ValueError("negative region count")
        if self.total_a != self.a_only + self.ab + self.ac + self.abc:
            raise ValueError("total_a inconsistent with its regions")
        if self.total_b != self.b_only + self.ab + self.bc + self.abc:
            raise ValueError("total_b inconsistent with its regions")
        if self.total_c != self.c_only + self.ac + self.bc + self.abc:
            raise ValueError("total_c inconsistent with its regions")

    @classmethod
    def from_sets(cls, a: set, b: set, c: set) -> "Venn3":
        return cls(
            a_only=len(a - b - c),
            b_only=len(b - a - c),
            c_only=len(c - a - b),
            ab=len((a & b) - c),
            ac=len((a & c) - b),
            bc=len((b & c) - a),
            abc=len(a & b & c),
            total_a=len(a),
            total_b=len(b),
            total_c=len(c),
        )

    def regions(self) -> dict:
        return {
            "a_only": self.a_only,
            "b_only": self.b_only,
            "c_only": self.c_only,
            "ab": self.ab,
            "ac": self.ac,
            "bc": self.bc,
            "abc": self.abc,
        }


def venn3(a: set, b: set, c: set) -> Venn3:
    return Venn3.from_sets(a, b, c)


def blocked_sets(repo: Repository, campaign_id: str) -> dict[str, set[str]]:
    """Per-provider sets of domains with a blocked verdict; inconclusive
    verdicts never enter a set (see dns_counts for their tally)."""
    records = repo.query(campaign_id, kind=KIND_DNS)
    if not records:
        raise UnknownCampaign(campaign_id)
    sets: dict[str, set[str]] = {}
    for record in records:
        sets.setdefault(record.provider_id, set())
        if record.payload.get("verdict") == BLOCKED:
            sets[record.provider_id].add(record.domain)
    return sets


def dns_counts(repo: Repository, campaign_id: str) -> dict[str, dict[str, int]]:
    records = repo.query(campaign_id, kind=KIND_DNS)
    if not records:
        raise UnknownCampaign(campaign_id)
    counts: dict[str, dict[str, int]] = {}
    for record in records:
        per = counts.setdefault(
            record.provider_id, {BLOCKED: 0, NOT_BLOCKED: 0, INCONCLUSIVE: 0}
        )
        verdict = record.payload.get("verdict")
        if verdict in per:
            per[verdict] += 1
    return counts


@dataclass(frozen=True)
class AdShare:
    ad_count: int
    share_pct: float
    empty_base: bool  # blocked set was empty, share forced to 0


def ad_share(blocked: set[str], matcher: AdMatcher) -> AdShare:
    ad_count = sum(1 for domain in blocked if matcher.is_ad(domain))
    if not blocked:
        return AdShare(0, 0.0, True)
    return AdShare(ad_count, percent(ad_count, len(blocked)), False)


@dataclass(frozen=True)
class EcdfPoint:
    ratio: float
    count: int
    cum_count: int
    cum_fraction: float


def ecdf(ratios) -> list[EcdfPoint]:
    """Step points of the empirical CDF; equal ratios collapse into one
    step whose count is their multiplicity."""
    return _ecdf_from_counter(Counter(Fraction(r) for r in ratios))


def _ecdf_from_counter(counter: Counter) -> list[EcdfPoint]:
    if not counter:
        raise EmptyInput("no ratios")
    if any(r < 0 or r > 1 for r in counter):
        raise ValueError("ratios must lie in [0, 1]")
    total = sum(counter.values())
    points = []
    cum = 0
    for ratio in sorted(counter):
        cum += counter[ratio]
        points.append(
            EcdfPoint(float(ratio), counter[ratio], cum, float(Fraction(cum, total)))
        )
    return points


@dataclass
class TiStats:
    with_report: int = 0
    no_report: int = 0
    threat_count: int = 0
    undefined_ratio: int = 0
    ad_threat_count: int = 0
    threat_share_pct: float = 0.0
    figure_base: int | None = None
    threat_share_pct_figure: float | None = None
    ad_threat_share_pct: float = 0.0
    denominator: str = OPINIONS
    ecdf_points: list | None = None


def ti_stats(
    results,
    matcher: AdMatcher | None = None,
    *,
    figure_base: int | None = None,
    denominator: str = OPINIONS,
) -> TiStats:
    """Reduce a stream of reports / no-report markers to the threat-side
    numbers.  The threat share uses the with-report count as its base; a
    fixed figure_base adds a second share without replacing the first."""
    stats = TiStats(figure_base=figure_base, denominator=denominator)
    ratio_counts: Counter = Counter()
    for result in results:
        if isinstance(result, NoReport):
            stats.no_report += 1
            continue
        stats.with_report += 1
        flagged = threat_flag(result)
        if flagged:
            stats.threat_count += 1
            if matcher is not None and matcher.is_ad(result.domain):
                stats.ad_threat_count += 1
        try:
            ratio_counts[agreement_fraction(result, denominator)] += 1
        except UndefinedRatio:
            stats.undefined_ratio += 1
    if stats.with_report:
        stats.threat_share_pct = percent(
            stats.threat_count, stats.with_report, TRUNCATE1
        )
    if figure_base:
        stats.threat_share_pct_figure = percent(
            stats.threat_count, figure_base, TRUNCATE1
        )
    if stats.threat_count:
        stats.ad_threat_share_pct = percent(stats.ad_threat_count, stats.threat_count)
    stats.ecdf_points = _ecdf_from_counter(ratio_counts) if ratio_counts else []
    return stats


@dataclass(frozen=True)
class ProviderStats:
    provider_id: str
    blocked: int
    blocked_pct: float
    not_blocked: int
    inconclusive: int
    ad_blocked: int
    ad_share_pct: float
    ad_share_empty_base: bool


@dataclass
class AnalysisReport:
    campaign_id: str
    corpus_size: int
    providers: list
    venn: Venn3 | None
    venn_order: list
    ti: TiStats | None
    provenance: dict

    def to_json_dict(self) -> dict:
        doc = {
            "campaign": self.campaign_id,
            "corpus_size": self.corpus_size,
            "providers": [
                {
                    "provider": p.provider_id,
                    "blocked": p.blocked,
                    "blocked_pct": p.blocked_pct,
                    "not_blocked": p.not_blocked,
                    "inconclusive": p.inconclusive,
                    "ad_blocked": p.ad_blocked,
                    "ad_share_pct": p.ad_share_pct,
                    "ad_share_empty_base": p.ad_share_empty_base,
                }
                for p in self.providers
            ],
            "venn": None,
            "ti": None,
            "ecdf": [],
            "provenance": self.provenance,
        }
        if self.venn is not None:
            doc["venn"] = {
                "sets": list(self.venn_order),
                **self.venn.regions(),
                "union": self.venn.union,
                "union_pct": percent(self.venn.union, self.corpus_size),
                "totals": {
                    "a": self.venn.total_a,
                    "b": self.venn.total_b,
                    "c": self.venn.total_c,
                },
            }
        if self.ti is not None:
            doc["ti"] = {
                "with_report": self.ti.with_report,
                "no_report": self.ti.no_report,
                "threat_count": self.ti.threat_count,
                "threat_share_pct": self.ti.threat_share_pct,
                "figure_base": self.ti.figure_base,
                "threat_share_pct_figure": self.ti.threat_share_pct_figure,
                "ad_threat_count": self.ti.ad_threat_count,
                "ad_threat_share_pct": self.ti.ad_threat_share_pct,
                "undefined_ratio": self.ti.undefined_ratio,
                "denominator": self.ti.denominator,
            }
            doc["ecdf"] = [
                [pt.ratio, pt.count, pt.cum_count, pt.cum_fraction]
                for pt in self.ti.ecdf_points
            ]
        return doc


def build_report(
    repo: Repository,
    campaign_id: str,
    matcher: AdMatcher | None = None,
    *,
    corpus_size: int | None = None,
    ti_figure_base: int | None = None,
    agreement_denominator: str = OPINIONS,
    config_digest: str = "",
) -> AnalysisReport:
    """Assemble the full report from one campaign's stored records.

    Pure given a repository snapshot: no clocks, no network, so identical
    inputs produce identical reports.
    """
    sets = blocked_sets(repo, campaign_id)
    counts = dns_counts(repo, campaign_id)

    manifest = repo.read_manifest(campaign_id) or {}
    provider_order = [p for p in manifest.get("providers", []) if p in sets]
    provider_order += [p for p in sorted(sets) if p not in provider_order]

    if corpus_size is None:
        corpus_size = manifest.get("domains") or len(
            {r.domain for r in repo.query(campaign_id, kind=KIND_DNS)}
        )
    if corpus_size <= 0:
        raise ZeroBase("corpus size unknown or zero")

    providers = []
    for provider_id in provider_order:
        blocked = sets[provider_id]
        share = (
            ad_share(blocked, matcher) if matcher is not None else AdShare(0, 0.0, not blocked)
        )
        per = counts[provider_id]
        providers.append(
            ProviderStats(
                provider_id=provider_id,
                blocked=len(blocked),
                blocked_pct=percent(len(blocked), corpus_size),
                not_blocked=per[NOT_BLOCKED],
                inconclusive=per[INCONCLUSIVE],
                ad_blocked=share.ad_count,
                ad_share_pct=share.share_pct,
                ad_share_empty_base=share.empty_base,
            )
        )

    venn = None
    venn_order: list[str] = []
    if len(provider_order) == 3:
        venn_order = provider_order
        venn = Venn3.from_sets(*(sets[p] for p in venn_order))

    ti = None
    ti_records = repo.query(campaign_id, kind=KIND_TI)
    if ti_records:
        results = [payload_to_report(r.domain, r.payload) for r in ti_records]
        ti = ti_stats(
            results,
            matcher,
            figure_base=ti_figure_base,
            denominator=agreement_denominator,
        )

    provenance = {
        "campaign_id": campaign_id,
        "list_digests": dict(sorted(matcher.source_digests.items())) if matcher else {},
        "config_digest": config_digest,
        "venn_reading": VENN_READING,
    }
    return AnalysisReport(
        campaign_id=campaign_id,
        corpus_size=corpus_size,
        providers=providers,
        venn=venn,
        venn_order=venn_order,
        ti=ti,
        provenance=provenance,
    )


def _rows_to_csv(header: str, rows) -> str:
    lines = [header]
    lines.extend(",".join(str(cell) for cell in row) for row in rows)
    return "\n".join(lines) + "\n"


def _flatten(doc, prefix=""):
    if isinstance(doc, dict):
        for key, value in doc.items():
            yield from _flatten(value, f"{prefix}.{key}" if prefix else key)
    elif isinstance(doc, list):
        for i, value in enumerate(doc):
            yield from _flatten(value, f"{prefix}[{i}]")
    else:
        yield prefix, doc


def emit_report(report: AnalysisReport, out_dir: str, formats=("json", "plotdata")):
    """Write the selected artifacts; returns the paths written.

    Bytes are a pure function of the report: stable field order, no
    timestamps, LF newlines.
    """
    os.makedirs(out_dir, exist_ok=True)
    doc = report.to_json_dict()
    written = []

    def _write(name: str, text: str):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)

    if "json" in formats:
        _write("report.json", json.dumps(doc, indent=2) + "\n")

    if "csv" in formats:
        rows = [(key, json.dumps(value)) for key, value in _flatten(doc)]
        _write("report.csv", _rows_to_csv("key,value", rows))

    if "plotdata" in formats:
        venn_rows = []
        if report.venn is not None:
            venn_rows = list(report.venn.regions().items())
            venn_rows.append(("union", report.venn.union))
        _write("venn.csv", _rows_to_csv("region,count", venn_rows))

        share_rows = [
            (p.provider_id, p.blocked, p.blocked_pct, p.ad_blocked, p.ad_share_pct)
            for p in report.providers
        ]
        _write(
            "shares.csv",
            _rows_to_csv("provider,blocked,blocked_pct,ad_count,ad_share_pct", share_rows),
        )

        ecdf_rows = []
        if report.ti is not None:
            ecdf_rows = [(pt.ratio, pt.cum_fraction) for pt in report.ti.ecdf_points]
        _write("ecdf.csv", _rows_to_csv("ratio,cum_fraction", ecdf_rows))

    return written
