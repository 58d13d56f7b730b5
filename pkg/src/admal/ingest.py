"""Turn pre-captured request logs into a deduplicated domain corpus.

Input is either a newline-delimited URL list or a JSON capture document
(see ``parse_capture`` for the schema).  Hostnames are normalized to
lowercase ASCII (punycode for IDN labels), ports and trailing dots are
stripped, and IP-literal hosts are excluded with a counted reject reason.
"""

import ipaddress
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable
from urllib.parse import urlsplit

import idna

MAX_LABEL_LEN = 63
MAX_NAME_LEN = 253

_ASCII_LABEL_RE = re.compile(r"^[a-z0-9_-]+$")


class IngestError(ValueError):
    pass


class InvalidHostError(IngestError):
    """Hostname that cannot be normalized into a valid domain."""


class IpLiteralError(IngestError):
    """Host is an IPv4/IPv6 literal; excluded from the domain corpus."""


class SchemaError(IngestError):
    """Capture document violates the expected schema."""

    def __init__(self, path: str, message: str = "missing or invalid field"):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class RequestRecord:
    """One observed HTTP(S) request."""

    url: str
    source_page: str | None = None
    observed_at: datetime | None = None


@dataclass(frozen=True)
class LineReject:
    line_no: int
    line: str
    reason: str


@dataclass(frozen=True)
class DomainReject:
    value: str
    reason: str


@dataclass
class CorpusResult:
    """Ordered unique domains plus the rejects that did not make it in."""

    domains: list[str] = field(default_factory=list)
    rejects: list[DomainReject] = field(default_factory=list)


def normalize_hostname(host: str) -> str:
    """Normalize a raw hostname into canonical corpus form.

    Lowercase, ASCII-only (IDN labels punycode-encoded), no trailing dot.
    Raises IpLiteralError for IPv4/IPv6 literals and InvalidHostError for
    anything that is not a plausible DNS name.
    """
    host = host.strip().rstrip(".")
    if not host:
        raise InvalidHostError("empty hostname")
    if host.startswith("[") and host.endswith("]"):
        raise IpLiteralError(host)
    try:
        ipaddress.ip_address(host)
    except ValueError:
        pass
    else:
        raise IpLiteralError(host)

    labels = []
    for label in host.split("."):
        if not label:
            raise InvalidHostError(f"empty label in {host!r}")
        labels.append(_normalize_label(label, host))

    name = ".".join(labels)
    if len(name) > MAX_NAME_LEN:
        raise InvalidHostError(f"name longer than {MAX_NAME_LEN} chars")
    return name


def _normalize_label(label: str, host: str) -> str:
    if label.isascii():
        label = label.lower()
        if len(label) > MAX_LABEL_LEN:
            raise InvalidHostError(f"label longer than {MAX_LABEL_LEN} chars in {host!r}")
        if not _ASCII_LABEL_RE.match(label):
            raise InvalidHostError(f"invalid characters in label {label!r}")
        return label
    try:
        encoded = idna.encode(label, uts46=True).decode("ascii")
    except idna.IDNAError:
        # IDNA 2008 rejects some labels browsers still resolve; fall back to
        # raw punycode so the corpus does not silently shrink.
        try:
            encoded = "xn--" + label.lower().encode("punycode").decode("ascii")
        except UnicodeError:
            raise InvalidHostError(f"label {label!r} is not IDNA-encodable") from None
    if len(encoded) > MAX_LABEL_LEN:
        raise InvalidHostError(f"label longer than {MAX_LABEL_LEN} chars in {host!r}")
    return encoded


def extract_domain(url: str) -> str:
    """Extract and normalize the hostname of an absolute http(s) URL."""
    try:
        parts = urlsplit(url)
        host = parts.hostname
    except ValueError as exc:
        raise InvalidHostError(f"unparseable URL {url!r}: {exc}") from None
    if parts.scheme not in ("http", "https"):
        raise InvalidHostError(f"not an absolute http(s) URL: {url!r}")
    if not host:
        raise InvalidHostError(f"URL has no host: {url!r}")
    return normalize_hostname(host)


def _is_absolute_http_url(line: str) -> bool:
    try:
        parts = urlsplit(line)
    except ValueError:
        return False
    return parts.scheme in ("http", "https") and bool(parts.netloc)


def parse_url_list(text: str) -> tuple[list[RequestRecord], list[LineReject]]:
    """Parse a newline-delimited URL list; '#' lines are comments.

    Total function: malformed lines land in the rejects list, never raise.
    """
    records: list[RequestRecord] = []
    rejects: list[LineReject] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if _is_absolute_http_url(line):
            records.append(RequestRecord(url=line))
        else:
            rejects.append(LineReject(line_no, line, "not-absolute-http-url"))
    return records, rejects


def _parse_rfc3339(value: str) -> datetime:
    ts = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def parse_capture(doc) -> list[RequestRecord]:
    """Parse a JSON capture document into request records, order preserved.

    Schema: {"entries": [{"url": str, "page": str?, "ts": RFC3339 str?}]}.
    Raises SchemaError naming the offending path.
    """
    if not isinstance(doc, dict):
        raise SchemaError("<root>", "expected a JSON object")
    if "entries" not in doc:
        raise SchemaError("entries", "missing required field")
    entries = doc["entries"]
    if not isinstance(entries, list):
        raise SchemaError("entries", "expected an array")

    records: list[RequestRecord] = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise SchemaError(f"entries[{i}]", "expected an object")
        url = entry.get("url")
        if not isinstance(url, str) or not url:
            raise SchemaError(f"entries[{i}].url")
        page = entry.get("page")
        if page is not None and not isinstance(page, str):
            raise SchemaError(f"entries[{i}].page")
        observed_at = None
        ts = entry.get("ts")
        if ts is not None:
            if not isinstance(ts, str):
                raise SchemaError(f"entries[{i}].ts")
            try:
                observed_at = _parse_rfc3339(ts)
            except ValueError:
                raise SchemaError(f"entries[{i}].ts", "not an RFC3339 timestamp") from None
        records.append(RequestRecord(url=url, source_page=page, observed_at=observed_at))
    return records


def dedupe(
    records: Iterable[RequestRecord],
    psl: "PublicSuffixList | None" = None,
) -> CorpusResult:
    """Deduplicate records into an ordered set of normalized domains.

    First-seen order is preserved.  IP-literal and invalid hosts are counted
    in rejects.  When ``psl`` is given, domains are first collapsed to their
    registrable form (off by default; FQDNs are the unit otherwise).
    """
    result = CorpusResult()
    seen: set[str] = set()
    for record in records:
        try:
            domain = extract_domain(record.url)
        except IpLiteralError:
            result.rejects.append(DomainReject(record.url, "ip-literal"))
            continue
        except InvalidHostError:
            result.rejects.append(DomainReject(record.url, "invalid-host"))
            continue
        if psl is not None:
            domain = psl.registrable(domain)
        if domain not in seen:
            seen.add(domain)
            result.domains.append(domain)
    return result


class PublicSuffixList:
    """Minimal public-suffix matcher over a user-supplied snapshot file.

    Supports normal, wildcard (``*.ck``) and exception (``!www.ck``) rules.
    The snapshot is versioned out-of-band, like the ad lists, so campaigns
    stay reproducible.
    """

    def __init__(self, rules: dict[tuple[str, ...], bool]):
        # value True marks an exception rule
        self._rules = rules

    @classmethod
    def from_file(cls, path) -> "PublicSuffixList":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    @classmethod
    def from_text(cls, text: str) -> "PublicSuffixList":
        rules: dict[tuple[str, ...], bool] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("//"):
                continue
            line = line.split()[0]
            exception = line.startswith("!")
            if exception:
                line = line[1:]
            labels = tuple(
                lbl if lbl == "*" else _normalize_label(lbl, line)
                for lbl in line.lower().rstrip(".").split(".")
                if lbl
            )
            if labels:
                rules[labels] = exception
        return cls(rules)

    def registrable(self, domain: str) -> str:
        """Collapse a normalized domain to its registrable form (suffix + 1)."""
        labels = domain.split(".")
        suffix_len = 1  # implicit default rule "*"
        for k in range(1, len(labels) + 1):
            tail = tuple(labels[-k:])
            wildcard = ("*",) + tail[1:] if k > 1 else None
            for candidate in (tail, wildcard):
                if candidate is None or candidate not in self._rules:
                    continue
                if self._rules[candidate]:
                    # exception rule prevails: the suffix is one label shorter,
                    # so the matched tail itself is the registrable domain
                    return ".".join(labels[-k:])
                suffix_len = max(suffix_len, k)
        if len(labels) <= suffix_len:
            return domain
        return ".".join(labels[-(suffix_len + 1):])
