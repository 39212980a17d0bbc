"""Offline history analysis: version order, DSG/USG and phenomenon detectors."""

from .builder import HistoryBuilder
from .detect import (DETECTORS, LEVELS, PHENOMENA, Analysis, Finding, classify, detect,
                     findings_text, resolve_phenomena, summary, summary_json, validate_finding)
from .graph import DSG, USG, VersionOrder, build_dsg, build_usg, build_version_order
from .model import History, MalformedHistory, Txn, build_history
from .oracle import OracleLimitError, serializability_oracle

__all__ = [
    "Analysis", "DETECTORS", "DSG", "Finding", "History", "HistoryBuilder", "LEVELS",
    "MalformedHistory", "OracleLimitError", "PHENOMENA", "Txn", "USG", "VersionOrder",
    "build_dsg", "build_history", "build_usg", "build_version_order", "classify", "detect",
    "findings_text", "resolve_phenomena", "serializability_oracle", "summary", "summary_json",
    "validate_finding",
]
