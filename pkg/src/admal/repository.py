"""Durable storage for per-(domain, provider) verdicts.

An append-only JSONL log with a latest-wins in-memory view, chosen over a
database so campaign data stays auditable and diffable.  One writer per
repository instance; appends are flushed before the ack so a killed
campaign can resume from exactly what reached the log.
"""

import json
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

KIND_DNS = "dns"
KIND_TI = "ti"
KIND_AD = "ad"
KINDS = (KIND_DNS, KIND_TI, KIND_AD)

_FSYNC_EVERY = 1000


class StorageError(Exception):
    pass


class RecordSchemaError(ValueError):
    """Corrupt or invalid record line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


def utc_now_rfc3339() -> str:
    """Current UTC time, RFC3339 with millisecond precision."""
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"


@dataclass(frozen=True)
class VerdictRecord:
    domain: str
    provider_id: str
    campaign_id: str
    kind: str
    payload: dict
    recorded_at: str

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.domain, self.provider_id, self.campaign_id)

    def to_json(self) -> str:
        # canonical field order: domain, provider, campaign, kind, payload, ts
        return json.dumps(
            {
                "domain": self.domain,
                "provider": self.provider_id,
                "campaign": self.campaign_id,
                "kind": self.kind,
                "payload": self.payload,
                "ts": self.recorded_at,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json_line(cls, line: str, line_no: int) -> "VerdictRecord":
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordSchemaError(line_no, f"invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise RecordSchemaError(line_no, "record is not an object")
        try:
            record = cls(
                domain=doc["domain"],
                provider_id=doc["provider"],
                campaign_id=doc["campaign"],
                kind=doc["kind"],
                payload=doc["payload"],
                recorded_at=doc["ts"],
            )
        except KeyError as exc:
            raise RecordSchemaError(line_no, f"missing field {exc}") from None
        if record.kind not in KINDS:
            raise RecordSchemaError(line_no, f"unknown kind {record.kind!r}")
        if not isinstance(record.payload, dict):
            raise RecordSchemaError(line_no, "payload is not an object")
        return record


class Repository:
    """Latest-wins view over an append-only log under ``root/records.jsonl``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "manifests").mkdir(exist_ok=True)
        self.log_path = self.root / "records.jsonl"
        self._lock = threading.Lock()
        self._view: dict[tuple[str, str, str], VerdictRecord] = {}
        self._appends_since_sync = 0
        self._replay()
        try:
            self._fh = open(self.log_path, "a", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot open log: {exc}") from exc

    def _replay(self):
        if not self.log_path.exists():
            return
        with open(self.log_path, "rb+") as fh:
            data = fh.read()
            complete, tail = data, b""
            if data and not data.endswith(b"\n"):
                nl = data.rfind(b"\n")
                complete, tail = (data[: nl + 1], data[nl + 1 :]) if nl >= 0 else (b"", data)
            lines = complete.decode("utf-8").split("\n")
            lines.pop()  # empty element after the final newline
            for i, line in enumerate(lines, start=1):
                if not line:
                    continue
                try:
                    record = VerdictRecord.from_json_line(line, i)
                except RecordSchemaError:
                    raise StorageError(f"corrupt log record at line {i}") from None
                self._view[record.key] = record
            if tail:
                # a killed writer leaves a partial final line; keep it if it
                # parses (only the newline was lost), otherwise drop it so the
                # next append does not concatenate onto garbage
                try:
                    record = VerdictRecord.from_json_line(
                        tail.decode("utf-8"), len(lines) + 1
                    )
                except (RecordSchemaError, UnicodeDecodeError):
                    fh.truncate(len(complete))
                else:
                    self._view[record.key] = record
                    fh.write(b"\n")

    def upsert(self, record: VerdictRecord) -> None:
        """Append the record; the log write is flushed before returning."""
        line = record.to_json()
        with self._lock:
            try:
                self._fh.write(line + "\n")
                self._fh.flush()
                self._appends_since_sync += 1
                if self._appends_since_sync >= _FSYNC_EVERY:
                    os.fsync(self._fh.fileno())
                    self._appends_since_sync = 0
            except OSError as exc:
                raise StorageError(f"log append failed: {exc}") from exc
            self._view[record.key] = record

    def get(self, domain: str, provider_id: str, campaign_id: str) -> VerdictRecord | None:
        with self._lock:
            return self._view.get((domain, provider_id, campaign_id))

    def query(
        self,
        campaign_id: str,
        provider_id: str | None = None,
        kind: str | None = None,
    ) -> list[VerdictRecord]:
        """Latest records for a campaign, sorted by (domain, provider)."""
        with self._lock:
            records = [
                r
                for r in self._view.values()
                if r.campaign_id == campaign_id
                and (provider_id is None or r.provider_id == provider_id)
                and (kind is None or r.kind == kind)
            ]
        records.sort(key=lambda r: (r.domain, r.provider_id))
        return records

    def existing_pairs(self, campaign_id: str, kind: str) -> set[tuple[str, str]]:
        with self._lock:
            return {
                (r.domain, r.provider_id)
                for r in self._view.values()
                if r.campaign_id == campaign_id and r.kind == kind
            }

    def __len__(self) -> int:
        with self._lock:
            return len(self._view)

    def export(self, path) -> int:
        """Write the latest-wins view as sorted JSONL; returns record count."""
        with self._lock:
            records = sorted(self._view.values(), key=lambda r: (r.domain, r.provider_id))
        with open(path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(record.to_json() + "\n")
        return len(records)

    def import_records(self, path) -> int:
        """Ingest an exported JSONL file; idempotent for repeated imports."""
        count = 0
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                record = VerdictRecord.from_json_line(line, line_no)
                self.upsert(record)
                count += 1
        return count

    def compact(self) -> None:
        """Rewrite the log with only the latest record per key."""
        with self._lock:
            records = sorted(self._view.values(), key=lambda r: (r.domain, r.provider_id))
            tmp = self.log_path.with_suffix(".jsonl.tmp")
            try:
                with open(tmp, "w", encoding="utf-8") as fh:
                    for record in records:
                        fh.write(record.to_json() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
                self._fh.close()
                os.replace(tmp, self.log_path)
                self._fh = open(self.log_path, "a", encoding="utf-8")
            except OSError as exc:
                raise StorageError(f"compaction failed: {exc}") from exc

    def manifest_path(self, campaign_id: str) -> Path:
        return self.root / "manifests" / f"{campaign_id}.json"

    def write_manifest(self, campaign_id: str, manifest: dict) -> None:
        path = self.manifest_path(campaign_id)
        tmp = path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def read_manifest(self, campaign_id: str) -> dict | None:
        path = self.manifest_path(campaign_id)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._fh.close()

    def __enter__(self) -> "Repository":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
