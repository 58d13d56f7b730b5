"""Fetch per-domain threat-intel reports and reduce them to partner tallies.

A report counts how many scan partners called the domain harmless,
suspicious or malicious, how many had no verdict (undetected) and how many
timed out.  The agreement ratio divides the flagging partners by those that
expressed an opinion; undetected and timeout entries carry no opinion and
stay out of the default denominator.
"""

import json
import logging
import os
import time
from dataclasses import dataclass, replace
from fractions import Fraction

import requests

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "ADMAL_TI_API_KEY"

OPINIONS = "opinions"
ALL_PARTNERS = "all_partners"

_TALLY_FIELDS = ("harmless", "undetected", "suspicious", "malicious", "timeout")


class TiError(Exception):
    pass


class AuthError(TiError):
    """The service rejected the API key (401/403)."""


class TransportError(TiError):
    """Could not get a usable answer; safe to retry later."""


class PayloadError(TiError):
    """Got a 2xx response whose body does not match the configured paths."""


class UndefinedRatio(TiError):
    """No partner expressed an opinion, so the ratio has no denominator."""


@dataclass(frozen=True)
class TiReport:
    domain: str
    harmless: int
    undetected: int
    suspicious: int
    malicious: int
    timeout: int
    partner_verdicts: dict | None = None
    fetched_at: str = ""

    def __post_init__(self):
        for name in _TALLY_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a nonnegative int, got {value!r}")
        if self.partner_verdicts is not None:
            tallied = {name: 0 for name in _TALLY_FIELDS}
            for category in self.partner_verdicts.values():
                if category not in tallied:
                    raise ValueError(f"unknown partner category {category!r}")
                tallied[category] += 1
            counts = {name: getattr(self, name) for name in _TALLY_FIELDS}
            if tallied != counts:
                raise ValueError(
                    f"partner verdicts tally {tallied} != counts {counts}"
                )

    @property
    def opinions(self) -> int:
        return self.harmless + self.suspicious + self.malicious

    @property
    def partners(self) -> int:
        return self.opinions + self.undetected + self.timeout


@dataclass(frozen=True)
class NoReport:
    """The service has never analyzed this domain (a definitive 404)."""

    domain: str
    fetched_at: str = ""


def threat_flag(report: TiReport) -> bool:
    """True when at least one partner called the domain suspicious or
    malicious, i.e. exactly when the agreement ratio is positive."""
    return report.suspicious + report.malicious > 0


def agreement_fraction(report: TiReport, denominator: str = OPINIONS) -> Fraction:
    flagged = report.suspicious + report.malicious
    if denominator == OPINIONS:
        base = report.opinions
    elif denominator == ALL_PARTNERS:
        base = report.partners
    else:
        raise ValueError(f"unknown denominator mode {denominator!r}")
    if base == 0:
        raise UndefinedRatio(report.domain)
    return Fraction(flagged, base)


def agreement_ratio(report: TiReport, denominator: str = OPINIONS) -> float:
    return float(agreement_fraction(report, denominator))


def report_to_payload(result: "TiReport | NoReport") -> dict:
    if isinstance(result, NoReport):
        return {"status": "no_report", "fetched_at": result.fetched_at}
    payload = {
        "status": "report",
        "harmless": result.harmless,
        "undetected": result.undetected,
        "suspicious": result.suspicious,
        "malicious": result.malicious,
        "timeout": result.timeout,
        "fetched_at": result.fetched_at,
    }
    if result.partner_verdicts is not None:
        payload["partners"] = result.partner_verdicts
    return payload


def payload_to_report(domain: str, payload: dict) -> "TiReport | NoReport":
    if payload.get("status") == "no_report":
        return NoReport(domain, payload.get("fetched_at", ""))
    return TiReport(
        domain=domain,
        harmless=int(payload["harmless"]),
        undetected=int(payload["undetected"]),
        suspicious=int(payload["suspicious"]),
        malicious=int(payload["malicious"]),
        timeout=int(payload.get("timeout", 0)),
        partner_verdicts=payload.get("partners"),
        fetched_at=payload.get("fetched_at", ""),
    )


class FixtureTiProvider:
    """Serve reports from a JSONL file; domains absent from the file get
    NoReport.  Line shape: {"domain": ..., "harmless": n, ...}."""

    def __init__(self, path: str):
        self.path = path
        self._reports: dict[str, TiReport] = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                doc = json.loads(line)
                domain = doc["domain"]
                self._reports[domain] = TiReport(
                    domain=domain,
                    harmless=int(doc.get("harmless", 0)),
                    undetected=int(doc.get("undetected", 0)),
                    suspicious=int(doc.get("suspicious", 0)),
                    malicious=int(doc.get("malicious", 0)),
                    timeout=int(doc.get("timeout", 0)),
                    partner_verdicts=doc.get("partners"),
                    fetched_at=doc.get("fetched_at", ""),
                )

    def lookup(self, domain: str) -> "TiReport | NoReport":
        return self._reports.get(domain) or NoReport(domain)

    def __len__(self) -> int:
        return len(self._reports)


def _dig(doc, path: str):
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


class LiveTiProvider:
    """HTTPS lookup against a hosted intel API.

    The response shape is configurable: ``stats_path`` points at the tallies
    object, or ``partners_path`` at a per-partner result map whose
    ``category`` fields are counted instead.  Defaults fit a v3-style API.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        *,
        api_key_header: str = "x-apikey",
        url_template: str = "{base_url}/domains/{domain}",
        stats_path: str = "data.attributes.last_analysis_stats",
        partners_path: str | None = None,
        timeout_s: float = 30.0,
        retries: int = 3,
        backoff_s: float = 1.0,
        session: requests.Session | None = None,
    ):
        if api_key is None:
            api_key = os.environ.get(DEFAULT_API_KEY_ENV)
        if not api_key:
            raise AuthError(
                f"no API key; pass api_key or set {DEFAULT_API_KEY_ENV}"
            )
        self.base_url = base_url.rstrip("/")
        self.url_template = url_template
        self.stats_path = stats_path
        self.partners_path = partners_path
        self.timeout_s = timeout_s
        self.retries = retries
        self.backoff_s = backoff_s
        self._session = session or requests.Session()
        self._session.headers[api_key_header] = api_key

    def lookup(self, domain: str) -> "TiReport | NoReport":
        url = self.url_template.format(base_url=self.base_url, domain=domain)
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
            try:
                resp = self._session.get(url, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code == 404:
                return NoReport(domain)
            if resp.status_code in (401, 403):
                raise AuthError(f"HTTP {resp.status_code} for {domain}")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = TransportError(f"HTTP {resp.status_code} for {domain}")
                continue
            if resp.status_code != 200:
                raise TransportError(f"HTTP {resp.status_code} for {domain}")
            return self._parse_body(domain, resp)
        raise TransportError(f"{domain}: retries exhausted ({last_error})")

    def _parse_body(self, domain: str, resp) -> TiReport:
        try:
            doc = resp.json()
        except ValueError as exc:
            raise PayloadError(f"{domain}: response is not JSON") from exc
        tallies = _dig(doc, self.stats_path)
        if tallies is None and self.partners_path:
            partner_map = _dig(doc, self.partners_path)
            if isinstance(partner_map, dict):
                tallies = {name: 0 for name in _TALLY_FIELDS}
                for entry in partner_map.values():
                    category = entry.get("category") if isinstance(entry, dict) else None
                    if category in tallies:
                        tallies[category] += 1
        if not isinstance(tallies, dict):
            raise PayloadError(f"{domain}: no tallies at {self.stats_path!r}")
        try:
            return TiReport(
                domain=domain,
                harmless=int(tallies.get("harmless", 0)),
                undetected=int(tallies.get("undetected", 0)),
                suspicious=int(tallies.get("suspicious", 0)),
                malicious=int(tallies.get("malicious", 0)),
                timeout=int(tallies.get("timeout", 0)),
            )
        except (TypeError, ValueError) as exc:
            raise PayloadError(f"{domain}: bad tally values") from exc


class TiClient:
    """Cached, rate-limited front for a report provider.

    Every fetched report (including NoReport) lands in an append-only JSONL
    cache, so reruns touch the network only for domains never answered.
    Transport failures are not cached and surface to the caller.
    """

    def __init__(
        self,
        provider,
        cache_path: str,
        *,
        requests_per_minute: float = 4.0,
    ):
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self.provider = provider
        self.cache_path = cache_path
        self.min_interval = 60.0 / requests_per_minute
        self.requests_made = 0
        self._last_request = 0.0
        self._cache: dict[str, TiReport | NoReport] = {}
        self._load_cache()
        self._fh = open(cache_path, "a", encoding="utf-8")

    def _load_cache(self) -> None:
        if not os.path.exists(self.cache_path):
            return
        with open(self.cache_path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        for i, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                result = payload_to_report(doc["domain"], doc)
            except (ValueError, KeyError):
                # a torn final line means the last write was cut short
                if i == len(lines) or (i == len(lines) - 1 and not lines[-1]):
                    log.warning("dropping torn cache line in %s", self.cache_path)
                    continue
                raise
            self._cache[result.domain] = result

    def fetch(self, domain: str) -> "TiReport | NoReport":
        cached = self._cache.get(domain)
        if cached is not None:
            return cached
        self._throttle()
        result = self.provider.lookup(domain)
        self.requests_made += 1
        if not result.fetched_at:
            fetched_at = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
            result = replace(result, fetched_at=fetched_at)
        self._store(result)
        return result

    def _throttle(self) -> None:
        wait = self._last_request + self.min_interval - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        self._last_request = time.monotonic()

    def _store(self, result) -> None:
        self._cache[result.domain] = result
        doc = {"domain": result.domain, **report_to_payload(result)}
        self._fh.write(json.dumps(doc, separators=(",", ":"), sort_keys=True) + "\n")
        self._fh.flush()

    def cached_domains(self) -> set[str]:
        return set(self._cache)

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
