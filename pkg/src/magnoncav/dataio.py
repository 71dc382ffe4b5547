"""Readers for analyser exports and calibration tables; deterministic result files.

Parsers take bytes (or str) and reject anything ambiguous instead of
coercing it: every error names the offending line or cell. Numbers must be
plain decimal literals, so ``nan``, ``inf``, digit separators and locale
decimal commas are all refused.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from magnoncav.fitting import CalibrationTable
from magnoncav.model import ENGINEERING, Spectrum

SCHEMA_VERSION = 1

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?\Z")
_FREQ_SCALE = {"HZ": 1e-9, "KHZ": 1e-6, "MHZ": 1e-3, "GHZ": 1.0}
_FORMATS = ("RI", "MA", "DB")
_CALIBRATION_COLUMNS = ("d", "f_c", "kappa_cL", "kappa_cR", "beta0")


class ParseError(ValueError):
    """Malformed input; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


def _text(data: Union[bytes, str]) -> str:
    if isinstance(data, str):
        return data
    try:
        return data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise ParseError(f"input is not UTF-8 ({exc.reason} at byte {exc.start})") from None


def parse_number(token, line=None, column=None) -> float:
    """Strict decimal literal; anything else raises :class:`ParseError`."""
    token = token.strip()
    if not _NUMBER.match(token):
        raise ParseError(f"not a number: {token!r}", line, column)
    return float(token)


# ---------------------------------------------------------------------------
# Touchstone


@dataclass(frozen=True, eq=False)
class TouchstoneRecord:
    """Two-port Touchstone v1 data.

    ``frequency`` is in GHz whatever the file unit; ``s`` has shape
    ``(n, 2, 2)`` with ``s[:, 1, 0]`` the transmission S21.
    """

    frequency: np.ndarray
    s: np.ndarray
    format: str
    impedance: float
    frequency_unit: str = "GHZ"
    option_line: str = ""
    comments: tuple = ()

    @property
    def s21(self) -> np.ndarray:
        return self.s[:, 1, 0]

    def to_spectrum(self, convention: str = ENGINEERING) -> Spectrum:
        return Spectrum(self.frequency, self.s21, "measured", convention=convention)


def _parse_option_line(body, lineno):
    options = {"unit": "GHZ", "parameter": "S", "format": "MA", "impedance": 50.0}
    tokens = body.upper().split()
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok in _FREQ_SCALE:
            options["unit"] = tok
        elif tok in _FORMATS:
            options["format"] = tok
        elif tok in ("S", "Y", "Z", "H", "G"):
            if tok != "S":
                raise ParseError(f"only S-parameters are supported, got {tok}", lineno)
        elif tok == "R":
            if i + 1 >= len(tokens):
                raise ParseError("option 'R' needs a reference impedance", lineno)
            options["impedance"] = parse_number(tokens[i + 1], lineno)
            i += 1
        else:
            raise ParseError(f"malformed option line: unknown token {tok!r}", lineno)
        i += 1
    return options


def _to_complex(a, b, fmt):
    if fmt == "RI":
        return a + 1j * b
    magnitude = a if fmt == "MA" else 10.0 ** (a / 20.0)
    return magnitude * np.exp(1j * np.deg2rad(b))


def parse_touchstone(data: Union[bytes, str]) -> TouchstoneRecord:
    """Parse a Touchstone v1 two-port (``.s2p``) file.

    Data rows hold nine numbers: frequency, then S11, S21, S12, S22 as
    pairs in the file's RI, MA or DB format (angles in degrees).
    """
    options = None
    option_text = ""
    comments = []
    freqs, rows = [], []
    for lineno, raw in enumerate(_text(data).splitlines(), start=1):
        content, _, comment = raw.partition("!")
        if _:
            comments.append(comment.strip())
        content = content.strip()
        if not content:
            continue
        if content.startswith("["):
            raise ParseError("Touchstone v2 keywords are not supported; convert to v1", lineno)
        if content.startswith("#"):
            if options is not None:
                raise ParseError("second option line", lineno)
            options = _parse_option_line(content[1:], lineno)
            option_text = content
            continue
        if options is None:
            raise ParseError("data before the option line", lineno)
        tokens = content.split()
        if len(tokens) != 9:
            raise ParseError(f"expected 9 columns for a two-port row, found {len(tokens)}", lineno)
        values = [parse_number(t, lineno) for t in tokens]
        f = values[0] * _FREQ_SCALE[options["unit"]]
        if freqs and not f > freqs[-1]:
            raise ParseError("frequencies must be strictly increasing", lineno)
        freqs.append(f)
        pairs = [_to_complex(values[k], values[k + 1], options["format"]) for k in (1, 3, 5, 7)]
        # v1 two-port order is S11 S21 S12 S22
        rows.append([[pairs[0], pairs[2]], [pairs[1], pairs[3]]])
    if options is None:
        raise ParseError("missing option line ('# <unit> S <format> R <impedance>')")
    if not rows:
        raise ParseError("no data rows")
    return TouchstoneRecord(np.array(freqs), np.array(rows, dtype=complex), options["format"],
                            options["impedance"], options["unit"], option_text, tuple(comments))


def _fmt(x: float) -> str:
    text = format(float(x), ".17g")
    if _NUMBER.match(text) and not any(c in text for c in ".eE"):
        text += ".0"
    return text


def dump_touchstone(record: TouchstoneRecord, fmt: str = "RI") -> bytes:
    """Write a record as Touchstone v1 in GHz with the chosen pair format."""
    fmt = fmt.upper()
    if fmt not in _FORMATS:
        raise ValueError(f"format must be one of {_FORMATS}")
    lines = ["! written by magnoncav", f"# GHZ S {fmt} R {_fmt(record.impedance)}"]
    for f, s in zip(record.frequency, record.s):
        cells = [_fmt(f)]
        for z in (s[0, 0], s[1, 0], s[0, 1], s[1, 1]):
            if fmt == "RI":
                a, b = z.real, z.imag
            else:
                mag = abs(z)
                a = mag if fmt == "MA" else 20 * math.log10(mag)
                b = math.degrees(math.atan2(z.imag, z.real))
            cells += [_fmt(a), _fmt(b)]
        lines.append(" ".join(cells))
    return ("\n".join(lines) + "\n").encode()


# ---------------------------------------------------------------------------
# CSV


def _csv_rows(text):
    """(line number, cells) for non-comment, non-blank lines."""
    reader = csv.reader(io.StringIO(text), delimiter=",", strict=True)
    out = []
    try:
        for cells in reader:
            lineno = reader.line_num
            if not cells or all(not c.strip() for c in cells) or cells[0].lstrip().startswith("#"):
                continue
            out.append((lineno, [c.strip() for c in cells]))
    except csv.Error as exc:
        raise ParseError(str(exc), reader.line_num) from None
    return out


def _header_index(header, name, lineno):
    """Column index by name; a bracketed unit suffix such as ``d [mm]`` is ignored."""
    bare = [re.sub(r"\s*\[.*\]\s*$", "", h) for h in header]
    if name not in bare:
        raise ParseError(f"missing column {name!r} (found {header})", lineno)
    return bare.index(name)


DEFAULT_COLUMNS = {"frequency": "frequency", "re": "re", "im": "im"}


def parse_spectrum_csv(data: Union[bytes, str], column_map: Optional[dict] = None,
                       frequency_unit: str = "GHz", convention: str = ENGINEERING) -> Spectrum:
    """Spectrum from a comma-separated export with a header row.

    ``column_map`` maps the roles ``frequency`` plus either ``re``/``im`` or
    ``magnitude``/``phase`` (degrees) to header names. Lines starting with
    ``#`` are comments.
    """
    cmap = dict(column_map or DEFAULT_COLUMNS)
    if "frequency" not in cmap:
        raise ValueError("column_map needs a 'frequency' entry")
    polar = "magnitude" in cmap or "phase" in cmap
    roles = ("magnitude", "phase") if polar else ("re", "im")
    if not all(r in cmap for r in roles):
        raise ValueError(f"column_map needs {roles} alongside 'frequency'")
    scale = _FREQ_SCALE.get(frequency_unit.upper())
    if scale is None:
        raise ValueError(f"unknown frequency unit {frequency_unit!r}")
    rows = _csv_rows(_text(data))
    if not rows:
        raise ParseError("no header row")
    header_line, header = rows[0]
    idx = {role: _header_index(header, cmap[role], header_line) for role in ("frequency",) + roles}
    if len(rows) < 3:
        raise ParseError(f"need at least 2 data rows, found {len(rows) - 1}")
    values = {role: [] for role in idx}
    for lineno, cells in rows[1:]:
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(cells)}", lineno)
        for role, i in idx.items():
            values[role].append(parse_number(cells[i], lineno, cmap[role]))
    f = np.array(values["frequency"]) * scale
    if polar:
        s = np.array(values["magnitude"]) * np.exp(1j * np.deg2rad(values["phase"]))
    else:
        s = np.array(values["re"]) + 1j * np.array(values["im"])
    bad = np.flatnonzero(np.diff(f) <= 0)
    if bad.size:
        raise ParseError("frequencies must be strictly increasing", rows[bad[0] + 2][0], cmap["frequency"])
    return Spectrum(f, s, "measured", convention=convention)


def load_calibration(data: Union[bytes, str]) -> CalibrationTable:
    """Calibration table from CSV with columns d, f_c, kappa_cL, kappa_cR, beta0.

    Rows may come in any order; they are sorted by spacing. Invalid tables
    raise :class:`~magnoncav.fitting.CalibrationError` listing every problem.
    """
    rows = _csv_rows(_text(data))
    if not rows:
        raise ParseError("no header row")
    header_line, header = rows[0]
    idx = [_header_index(header, name, header_line) for name in _CALIBRATION_COLUMNS]
    table = []
    for lineno, cells in rows[1:]:
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(cells)}", lineno)
        table.append(tuple(parse_number(cells[i], lineno, name) for i, name in zip(idx, _CALIBRATION_COLUMNS)))
    return CalibrationTable.from_rows(table, sort=True)


# ---------------------------------------------------------------------------
# result envelope


@dataclass(frozen=True, eq=False)
class Table:
    """Named float columns with units; all columns share one length."""

    columns: tuple
    units: tuple
    data: dict

    def __post_init__(self):
        if len(self.columns) != len(self.units):
            raise ValueError("every column needs a unit")
        lengths = {len(self.data[c]) for c in self.columns}
        if len(lengths) > 1:
            raise ValueError(f"columns have different lengths {sorted(lengths)}")
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(self, "data", {c: np.asarray(self.data[c], dtype=float) for c in self.columns})

    @classmethod
    def from_columns(cls, **columns):
        """``Table.from_columns(name=(unit, values), ...)``."""
        return cls(tuple(columns), tuple(u for u, _ in columns.values()),
                   {name: values for name, (_, values) in columns.items()})

    def __len__(self):
        return len(self.data[self.columns[0]]) if self.columns else 0

    def to_csv(self) -> bytes:
        """Flat CSV with ``name [unit]`` headers; non-finite cells written as nan/inf."""
        lines = [",".join(f"{c} [{u}]" for c, u in zip(self.columns, self.units))]
        for i in range(len(self)):
            lines.append(",".join(_fmt_cell(self.data[c][i]) for c in self.columns))
        return ("\n".join(lines) + "\n").encode()


def _fmt_cell(x):
    return _fmt(x) if math.isfinite(x) else repr(float(x))


_NONFINITE = {"NaN": math.nan, "Infinity": math.inf, "-Infinity": -math.inf}


def _encode(value, path="") -> str:
    """Canonical JSON: sorted keys, 17 significant digits, no whitespace variation."""
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            raise ValueError(f"non-finite value at {path or '<root>'}; only tables may hold NaN/inf")
        return _fmt(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        items = sorted(value.items(), key=lambda kv: str(kv[0]))
        return "{" + ",".join(f"{json.dumps(str(k))}:{_encode(v, f'{path}.{k}')}" for k, v in items) + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ",".join(_encode(v, f"{path}[{i}]") for i, v in enumerate(value)) + "]"
    raise TypeError(f"cannot serialise {type(value).__name__} at {path or '<root>'}")


def canonical_json(value) -> str:
    return _encode(value)


def _encode_column(values) -> list:
    return [float(v) if math.isfinite(v) else {math.inf: "Infinity", -math.inf: "-Infinity"}.get(v, "NaN")
            for v in values]


def digest(data: Union[bytes, str]) -> str:
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True, eq=False)
class ResultEnvelope:
    """Self-describing result document.

    ``parameters`` is the effective configuration, ``input_digest`` a hash
    of configuration and inputs, ``metadata`` creation details. No clock
    time is recorded, so identical runs give identical bytes.
    """

    kind: str
    parameters: dict
    tables: dict = field(default_factory=dict)
    input_digest: str = ""
    metadata: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_bytes(self) -> bytes:
        doc = {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "input_digest": self.input_digest,
            "parameters": self.parameters,
            "metadata": self.metadata,
            "tables": {
                name: {
                    "columns": list(t.columns),
                    "units": list(t.units),
                    "data": {c: _encode_column(t.data[c]) for c in t.columns},
                }
                for name, t in self.tables.items()
            },
        }
        return (_encode(doc) + "\n").encode()

    @classmethod
    def from_bytes(cls, data: Union[bytes, str]) -> "ResultEnvelope":
        try:
            doc = json.loads(_text(data))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid result document: {exc.msg}", exc.lineno) from None
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ParseError(f"unsupported schema version {version!r}")
        tables = {}
        for name, t in doc.get("tables", {}).items():
            cols = {c: [_NONFINITE[v] if isinstance(v, str) else v for v in t["data"][c]] for c in t["columns"]}
            tables[name] = Table(tuple(t["columns"]), tuple(t["units"]), cols)
        return cls(doc["kind"], doc["parameters"], tables, doc.get("input_digest", ""),
                   doc.get("metadata", {}), version)


def save_results(envelope: ResultEnvelope) -> bytes:
    return envelope.to_bytes()


def load_results(data: Union[bytes, str]) -> ResultEnvelope:
    return ResultEnvelope.from_bytes(data)
