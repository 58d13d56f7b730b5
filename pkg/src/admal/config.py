"""Load and validate the pipeline config file (JSON).

One file drives every subcommand: inputs, resolver profiles, the TI
provider, filter lists, repository location, limits, and analytics
options.  The TI API key is the single value that never lives here; it
comes from the ADMAL_TI_API_KEY environment variable.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

from .dnsbroker import CampaignLimits, ResolverProfile, default_profiles
from .ticlient import ALL_PARTNERS, OPINIONS

TI_OFF = "off"
TI_FIXTURE = "fixture"
TI_LIVE = "live"


class ConfigError(Exception):
    """Config file missing, unparseable, or structurally invalid."""


@dataclass
class PipelineConfig:
    path: str
    campaign: str | None
    repository: str
    input_url_list: str | None
    input_capture: str | None
    collapse_registrable: bool
    psl_file: str | None
    resolvers: list
    ti_mode: str
    ti_fixture: str | None
    ti_base_url: str | None
    ti_options: dict
    ti_requests_per_minute: float
    ti_cache: str | None
    list_files: list
    list_format_hint: str
    subdomain_matching: str
    limits: CampaignLimits
    agreement_denominator: str
    ti_figure_base: int | None
    corpus_size: int | None
    formats: list
    mock_farm: str | None
    raw: dict = field(repr=False, default_factory=dict)

    def ti_cache_path(self) -> str:
        return self.ti_cache or os.path.join(self.repository, "ti-cache.jsonl")

    def corpus_path(self, campaign_id: str) -> str:
        return os.path.join(self.repository, f"corpus-{campaign_id}.txt")

    def analysis_digest(self) -> str:
        """Digest of everything that shapes an analysis result.

        Runtime limits (workers, QPS, timeouts) are deliberately excluded:
        they change how fast data is gathered, never what a given
        repository analyzes to.
        """
        basis = {
            "campaign": self.campaign,
            "resolvers": [p.provider_id for p in self.resolvers],
            "agreement_denominator": self.agreement_denominator,
            "ti_figure_base": self.ti_figure_base,
            "corpus_size": self.corpus_size,
            "subdomain_matching": self.subdomain_matching,
            "list_files": [os.path.basename(p) for p in self.list_files],
            "collapse_registrable": self.collapse_registrable,
        }
        canon = json.dumps(basis, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    _require(isinstance(doc, dict), "config root must be a JSON object")

    repository = doc.get("repository")
    _require(
        isinstance(repository, str) and repository != "",
        "config needs a 'repository' path",
    )

    inputs = doc.get("input", {})
    _require(isinstance(inputs, dict), "'input' must be an object")

    resolver_docs = doc.get("resolvers")
    if resolver_docs is None:
        resolvers = default_profiles()
    else:
        _require(isinstance(resolver_docs, list), "'resolvers' must be a list")
        try:
            resolvers = [ResolverProfile.from_config(d) for d in resolver_docs]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad resolver profile: {exc}") from exc
        ids = [p.provider_id for p in resolvers]
        _require(len(ids) == len(set(ids)), "resolver provider_ids must be unique")

    ti = doc.get("ti", {})
    _require(isinstance(ti, dict), "'ti' must be an object")
    ti_mode = ti.get("mode", TI_OFF)
    _require(
        ti_mode in (TI_OFF, TI_FIXTURE, TI_LIVE),
        f"ti.mode must be one of off/fixture/live, got {ti_mode!r}",
    )
    if ti_mode == TI_FIXTURE:
        _require(bool(ti.get("fixture")), "ti.mode=fixture needs ti.fixture path")
    if ti_mode == TI_LIVE:
        _require(bool(ti.get("base_url")), "ti.mode=live needs ti.base_url")
    _require("api_key" not in ti, "API keys belong in ADMAL_TI_API_KEY, not config")
    rpm = float(ti.get("requests_per_minute", 4.0))
    _require(rpm > 0, "ti.requests_per_minute must be positive")
    ti_options = {
        k: ti[k]
        for k in (
            "api_key_header",
            "url_template",
            "stats_path",
            "partners_path",
            "timeout_s",
            "retries",
        )
        if k in ti
    }

    lists = doc.get("lists", {})
    _require(isinstance(lists, dict), "'lists' must be an object")
    list_files = lists.get("files", [])
    _require(
        isinstance(list_files, list) and all(isinstance(p, str) for p in list_files),
        "lists.files must be a list of paths",
    )
    hint = lists.get("format_hint", "auto")
    _require(
        hint in ("auto", "hosts", "plain", "adblock"),
        f"bad lists.format_hint {hint!r}",
    )
    matching = lists.get("subdomain_matching", "strict")
    _require(
        matching in ("strict", "always"),
        f"bad lists.subdomain_matching {matching!r}",
    )

    limits_doc = doc.get("limits", {})
    _require(isinstance(limits_doc, dict), "'limits' must be an object")
    try:
        limits = CampaignLimits(
            max_inflight=int(limits_doc.get("max_inflight", 64)),
            per_provider_qps=float(limits_doc.get("per_provider_qps", 20.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad limits: {exc}") from exc

    analytics_doc = doc.get("analytics", {})
    _require(isinstance(analytics_doc, dict), "'analytics' must be an object")
    denominator = analytics_doc.get("agreement_denominator", OPINIONS)
    _require(
        denominator in (OPINIONS, ALL_PARTNERS),
        f"bad analytics.agreement_denominator {denominator!r}",
    )
    figure_base = analytics_doc.get("ti_figure_base")
    _require(
        figure_base is None or (isinstance(figure_base, int) and figure_base > 0),
        "analytics.ti_figure_base must be a positive integer",
    )
    corpus_size = analytics_doc.get("corpus_size")
    _require(
        corpus_size is None or (isinstance(corpus_size, int) and corpus_size > 0),
        "analytics.corpus_size must be a positive integer",
    )
    formats = analytics_doc.get("formats", ["json", "plotdata"])
    _require(
        isinstance(formats, list) and set(formats) <= {"json", "csv", "plotdata"},
        "analytics.formats entries must be json/csv/plotdata",
    )

    return PipelineConfig(
        path=path,
        campaign=doc.get("campaign"),
        repository=repository,
        input_url_list=inputs.get("url_list"),
        input_capture=inputs.get("capture"),
        collapse_registrable=bool(inputs.get("collapse_registrable", False)),
        psl_file=inputs.get("psl_file"),
        resolvers=resolvers,
        ti_mode=ti_mode,
        ti_fixture=ti.get("fixture"),
        ti_base_url=ti.get("base_url"),
        ti_options=ti_options,
        ti_requests_per_minute=rpm,
        ti_cache=ti.get("cache"),
        list_files=list_files,
        list_format_hint=hint,
        subdomain_matching=matching,
        limits=limits,
        agreement_denominator=denominator,
        ti_figure_base=figure_base,
        corpus_size=corpus_size,
        formats=formats,
        mock_farm=doc.get("mock_farm"),
        raw=doc,
    )
