import json
import logging
from importlib import resources
from typing import Any, Dict, List

from jsonschema import Draft202012Validator

from hybrid_pad.core.errors import HybridPadError

logger = logging.getLogger(__name__)

REPORT_KINDS = ("inference", "timings", "metrics", "bench", "sweep")


class ReportSchemaError(HybridPadError):
    """A report does not match its packaged schema."""

    def __init__(self, kind: str, issues: List[str]):
        self.kind = kind
        self.issues = issues
        super().__init__(f"{kind} report violates its schema: " + "; ".join(issues))


def load_schema(kind: str) -> Dict[str, Any]:
    if kind not in REPORT_KINDS:
        raise ValueError(f"Unknown report kind '{kind}', expected one of {REPORT_KINDS}")
    text = resources.files("hybrid_pad.core.validation").joinpath("schemas").joinpath(f"{kind}.json").read_text()
    return json.loads(text)


class ReportValidator:
    """Checks report dictionaries against the JSON schemas shipped with the package."""

    def __init__(self) -> None:
        self._validators: Dict[str, Draft202012Validator] = {}

    def _validator(self, kind: str) -> Draft202012Validator:
        if kind not in self._validators:
            schema = load_schema(kind)
            Draft202012Validator.check_schema(schema)
            self._validators[kind] = Draft202012Validator(schema)
        return self._validators[kind]

    def issues(self, kind: str, report: Dict[str, Any]) -> List[str]:
        """Every violation as `path: message`, in a stable order."""
        found = []
        for error in self._validator(kind).iter_errors(report):
            where = "/".join(str(part) for part in error.absolute_path) or "<root>"
            found.append(f"{where}: {error.message}")
        return sorted(found)

    def validate(self, kind: str, report: Dict[str, Any]) -> None:
        issues = self.issues(kind, report)
        if issues:
            for issue in issues:
                logger.error(f"{kind} report: {issue}")
            raise ReportSchemaError(kind, issues)
