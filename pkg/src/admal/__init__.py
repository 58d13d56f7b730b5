"""Pipeline that checks harvested web-request domains against filtered DNS
providers, a threat-intelligence service, and advertising filter lists, and
reports how consistent the verdicts are."""

__version__ = "0.1.0"
