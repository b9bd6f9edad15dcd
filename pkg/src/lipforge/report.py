"""Structured text reports with CSV tables.

Layout::

    lipforge-report 1
    tool_version: 0.1.0
    command: attack
    generated_at: 2026-01-01T00:00:00+00:00
    == config
    seed: 0
    == section attack
    verdict: PASS
    key: value
    -- table sweep
    columns: kind,epsilon,clean_accuracy,robust_accuracy,provenance
    pgd,0.03137254901960784,0.99,0.41,kind=pgd;eps=...
    -- end
    == timing
    wall_seconds: 1.25
    == end

Everything except ``generated_at`` and the ``timing`` block is a pure
function of the run configuration (:meth:`Report.payload`).
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .textio import ParseError

REPORT_FORMAT = "lipforge-report"
SCHEMA_VERSION = 1

PASS, WARN, FAILED = "PASS", "WARN", "FAILED"


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):
        return fmt(v.item())
    return str(v)


@dataclass
class Table:
    name: str
    columns: list
    rows: list = field(default_factory=list)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"table {self.name}: {len(values)} values for {len(self.columns)} columns")
        self.rows.append([fmt(v) for v in values])

    def column(self, name: str, cast=float) -> list:
        j = self.columns.index(name)
        return [cast(r[j]) if r[j] != "" else None for r in self.rows]

    def records(self) -> list[dict]:
        return [dict(zip(self.columns, r)) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return buf.getvalue()


@dataclass
class Section:
    name: str
    verdict: str | None = None
    fields: dict = field(default_factory=dict)
    tables: list = field(default_factory=list)

    def table(self, name: str, columns=None) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        if columns is None:
            raise KeyError(f"section {self.name} has no table {name!r}")
        t = Table(name, list(columns))
        self.tables.append(t)
        return t

    def set(self, **kv) -> None:
        for k, v in kv.items():
            self.fields[k] = fmt(v)


@dataclass
class Report:
    command: str
    config: dict = field(default_factory=dict)
    sections: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    tool_version: str = __version__
    generated_at: str = ""

    def section(self, name: str) -> Section:
        for s in self.sections:
            if s.name == name:
                return s
        s = Section(name)
        self.sections.append(s)
        return s

    def tables(self):
        for s in self.sections:
            yield from s.tables

    def _lines(self, with_volatile: bool) -> list[str]:
        out = [f"{REPORT_FORMAT} {SCHEMA_VERSION}", f"tool_version: {self.tool_version}",
               f"command: {self.command}"]
        if with_volatile:
            stamp = self.generated_at or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
            out.append(f"generated_at: {stamp}")
        out.append("== config")
        out += [f"{k}: {fmt(v)}" for k, v in self.config.items()]
        for s in self.sections:
            out.append(f"== section {s.name}")
            if s.verdict is not None:
                out.append(f"verdict: {s.verdict}")
            out += [f"{k}: {v}" for k, v in s.fields.items()]
            for t in s.tables:
                out.append(f"-- table {t.name}")
                body = t.to_csv().rstrip("\n").split("\n")
                out.append("columns: " + body[0])
                out += body[1:]
                out.append("-- end")
        if with_volatile and self.timing:
            out.append("== timing")
            out += [f"{k}: {fmt(v)}" for k, v in self.timing.items()]
        out.append("== end")
        return out

    def dumps(self) -> str:
        return "\n".join(self._lines(True)) + "\n"

    def payload(self) -> str:
        """The deterministic part of the report (no timestamp, no timings)."""
        return "\n".join(self._lines(False)) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def write_csv(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for s in self.sections:
            for t in s.tables:
                p = d / f"{s.name}.{t.name}.csv"
                p.write_text(t.to_csv(), encoding="utf-8")
                paths.append(p)
        return paths


def _kv(line: str, off: int) -> tuple[str, str]:
    if ": " in line:
        k, v = line.split(": ", 1)
    elif line.endswith(":"):
        k, v = line[:-1], ""
    else:
        raise ParseError(f"expected 'key: value', got {line[:40]!r}", off)
    return k, v


def loads_report(text: str) -> Report:
    lines = text.split("\n")
    offsets = []
    pos = 0
    for ln in lines:
        offsets.append(pos)
        pos += len(ln.encode("utf-8")) + 1
    it = iter(zip(lines, offsets))

    def nxt():
        try:
            return next(it)
        except StopIteration:
            raise ParseError("unexpected end of report", pos) from None

    line, off = nxt()
    parts = line.split()
    if len(parts) != 2 or parts[0] != REPORT_FORMAT:
        raise ParseError("not a lipforge report", off)
    if parts[1] != str(SCHEMA_VERSION):
        raise ParseError(f"unsupported report schema {parts[1]}", off)
    rep = Report(command="")
    target = None
    current = None
    while True:
        line, off = nxt()
        if line == "== end":
            break
        if line == "== config":
            target, current = rep.config, None
        elif line == "== timing":
            target, current = rep.timing, None
        elif line.startswith("== section "):
            current = rep.section(line[len("== section "):])
            target = current.fields
        elif line.startswith("-- table "):
            if current is None:
                raise ParseError("table outside a section", off)
            name = line[len("-- table "):]
            head, hoff = nxt()
            if not head.startswith("columns: "):
                raise ParseError("table without columns line", hoff)
            body = [head[len("columns: "):]]
            while True:
                row, roff = nxt()
                if row == "-- end":
                    break
                body.append(row)
            parsed = list(csv.reader(body))
            t = current.table(name, parsed[0])
            t.rows = [list(r) for r in parsed[1:]]
        else:
            k, v = _kv(line, off)
            if target is None:
                if k == "tool_version":
                    rep.tool_version = v
                elif k == "command":
                    rep.command = v
                elif k == "generated_at":
                    rep.generated_at = v
                else:
                    raise ParseError(f"unknown header key {k!r}", off)
            elif current is not None and k == "verdict" and target is current.fields:
                current.verdict = v
            else:
                target[k] = v
    return rep


def load_report(path) -> Report:
    return loads_report(Path(path).read_text(encoding="utf-8"))
