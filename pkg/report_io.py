"""
Report files: run manifests and JSON / CSV / table writers.

Every output carries a RunManifest: JSON reports under a "manifest" key,
CSV files as leading "# key: value" comment lines. Tables are rendered
with pandas and written without a manifest header only on request.
"""

import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, Iterable, List, Optional, Sequence

import pandas as pd

from config import Config
from error_handling import UserInputError

logger = logging.getLogger(__name__)

TOOL_NAME = 'smc-sim'
TOOL_VERSION = '1.0.0'
FORMATS = ('json', 'csv', 'table')


class ReportFormatError(UserInputError):
    """Raised for unknown output formats or rows that cannot be tabulated."""
    pass


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(65536), b''):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_timestamp(config_class=None) -> str:
    """ISO-8601 UTC timestamp, pinned by SOURCE_DATE_EPOCH when set."""
    epoch = (config_class or Config).SOURCE_DATE_EPOCH
    if epoch is not None and str(epoch).strip() != '':
        moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    else:
        moment = datetime.now(timezone.utc)
    return moment.strftime('%Y-%m-%dT%H:%M:%SZ')


@dataclass
class RunManifest:
    """Provenance of one command run."""
    command: str
    config_paths: List[str] = field(default_factory=list)
    input_hashes: Dict[str, str] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    timestamp: str = ''

    @classmethod
    def create(cls, command: str, inputs: Iterable[str] = (), configs: Iterable[str] = (),
               config_class=None) -> 'RunManifest':
        """
        Build a manifest, hashing every existing input and config file.

        Args:
            command: Sub-command with its arguments
            inputs: Input file paths (descriptors, schedules, tables)
            configs: Configuration file paths (profiles, scenarios)
        """
        configs = [p for p in configs if p]
        hashes = {}
        for path in sorted(set(p for p in list(inputs) + configs if p)):
            if os.path.isfile(path):
                hashes[path] = file_sha256(path)
            else:
                logger.debug(f"Manifest input {path} is not a file; not hashed")
        return cls(command=command, config_paths=configs, input_hashes=hashes,
                   timestamp=manifest_timestamp(config_class))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['tool'] = TOOL_NAME
        return data

    def comment_lines(self) -> List[str]:
        lines = [
            f"# tool: {TOOL_NAME} {self.tool_version}",
            f"# command: {self.command}",
            f"# timestamp: {self.timestamp}",
        ]
        for path in self.config_paths:
            lines.append(f"# config: {path}")
        for path, digest in sorted(self.input_hashes.items()):
            lines.append(f"# sha256: {digest}  {path}")
        return lines


def _clean(value):
    """Make numpy scalars and non-finite floats JSON friendly."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, 'item') and not isinstance(value, (str, bytes)):
        value = value.item()
    if isinstance(value, float) and (value != value or value in (float('inf'), float('-inf'))):
        return None
    return value


def render_json(payload: Dict, manifest: Optional[RunManifest] = None) -> str:
    document = dict(_clean(payload))
    if manifest is not None:
        document['manifest'] = manifest.to_dict()
    return json.dumps(document, indent=2, sort_keys=True) + '\n'


def rows_frame(rows: Sequence[Dict], columns: Optional[Sequence[str]] = None) -> pd.DataFrame:
    if not isinstance(rows, (list, tuple)) or any(not isinstance(r, dict) for r in rows):
        raise ReportFormatError("Tabular output needs a list of row dictionaries")
    frame = pd.DataFrame(list(rows), columns=list(columns) if columns else None)
    return frame


def render_csv(rows: Sequence[Dict], manifest: Optional[RunManifest] = None,
               columns: Optional[Sequence[str]] = None) -> str:
    """Comma separated, '.' decimal, LF line endings, manifest as comments."""
    body = rows_frame(rows, columns).to_csv(index=False, lineterminator='\n', float_format='%.6g')
    header = '\n'.join(manifest.comment_lines()) + '\n' if manifest is not None else ''
    return header + body


def render_table(rows: Sequence[Dict], columns: Optional[Sequence[str]] = None, title: str = '') -> str:
    frame = rows_frame(rows, columns)
    if frame.empty:
        text = '(no rows)'
    else:
        text = frame.to_string(index=False, float_format=lambda v: f"{v:.4g}")
    return (f"{title}\n{text}\n" if title else f"{text}\n")


def render(fmt: str, payload: Dict, rows: Sequence[Dict], manifest: RunManifest,
           columns: Optional[Sequence[str]] = None, title: str = '') -> str:
    """Render a command result in one of FORMATS."""
    if fmt == 'json':
        return render_json(payload, manifest)
    if fmt == 'csv':
        return render_csv(rows, manifest, columns)
    if fmt == 'table':
        return render_table(rows, columns, title)
    raise ReportFormatError(f"Unknown output format '{fmt}' (choose from {', '.join(FORMATS)})")


def write_text(text: str, out: Optional[str] = None):
    """Write to `out`, or stdout when out is None or '-'."""
    if out is None or out == '-':
        sys.stdout.write(text)
        return
    directory = os.path.dirname(out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(out, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(text)
    logger.info(f"Wrote {out}")


def sidecar_path(out: Optional[str], suffix: str) -> Optional[str]:
    """`report.json` + `breakdown` -> `report.breakdown.csv`; None for stdout."""
    if out is None or out == '-':
        return None
    stem, _ = os.path.splitext(out)
    return f"{stem}.{suffix}.csv"
