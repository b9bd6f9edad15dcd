"""Line-oriented text grammar shared by model and dataset files.

A file is a magic line ``<format> <version>`` followed by ``key value...``
lines.  Arrays are written as a header line ``<key> <d0> <d1> ...`` followed
by ``prod(d[:-1])`` lines, each holding one row of ``d[-1]`` floats printed
with ``repr`` (shortest string that round-trips exactly).
"""

from __future__ import annotations

import math

import numpy as np


class ParseError(ValueError):
    """Malformed file; ``offset`` is the byte offset of the offending line."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(ParseError):
    pass


def format_float(v: float) -> str:
    return repr(float(v))


def write_array(lines: list, key: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    shape = arr.shape if arr.ndim else (1,)
    lines.append(" ".join([key, *map(str, shape)]))
    last = shape[-1]
    if last == 0 or arr.size == 0:
        return
    for row in arr.reshape(-1, last):
        lines.append(" ".join(format_float(v) for v in row))


class LineReader:
    """Iterate lines of a text payload while tracking byte offsets."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    @property
    def at_end(self) -> bool:
        return self.pos >= len(self.raw)

    def next_line(self) -> tuple[str, int]:
        if self.at_end:
            raise ParseError("unexpected end of file", self.pos)
        start = self.pos
        nl = self.raw.find(b"\n", start)
        if nl < 0:
            raise ParseError("unterminated final line (file truncated?)", start)
        self.pos = nl + 1
        try:
            return self.raw[start:nl].decode("utf-8"), start
        except UnicodeDecodeError:
            raise ParseError("line is not valid UTF-8", start) from None

    def expect_magic(self, fmt: str, version: int) -> None:
        line, off = self.next_line()
        parts = line.split()
        if len(parts) != 2 or parts[0] != fmt:
            raise ParseError(f"expected header '{fmt} <version>', got {line[:40]!r}", off)
        try:
            found = int(parts[1])
        except ValueError:
            raise ParseError(f"bad version field {parts[1]!r}", off) from None
        if found != version:
            raise VersionError(f"{fmt} version {found} is not supported (expected {version})", off)

    def key(self, name: str) -> tuple[list[str], int]:
        line, off = self.next_line()
        parts = line.split(" ")
        if not parts or parts[0] != name:
            raise ParseError(f"expected key {name!r}, got {line[:40]!r}", off)
        return parts[1:], off

    def scalar(self, name: str, cast=str):
        vals, off = self.key(name)
        text = " ".join(vals)
        try:
            return cast(text)
        except ValueError:
            raise ParseError(f"bad value for {name!r}: {text!r}", off) from None

    def ints(self, name: str) -> tuple[int, ...]:
        vals, off = self.key(name)
        try:
            return tuple(int(v) for v in vals)
        except ValueError:
            raise ParseError(f"bad integer list for {name!r}", off) from None

    def array(self, name: str) -> np.ndarray:
        shape = self.ints(name)
        if not shape or any(d < 0 for d in shape):
            raise ParseError(f"bad shape {shape} for {name!r}", self.pos)
        last = shape[-1]
        rows = math.prod(shape[:-1]) if last else 0
        out = np.empty((rows, last))
        for r in range(rows):
            line, off = self.next_line()
            parts = line.split()
            if len(parts) != last:
                raise ParseError(f"{name}: row {r} has {len(parts)} values, expected {last}", off)
            try:
                out[r] = [float(p) for p in parts]
            except ValueError:
                raise ParseError(f"{name}: non-numeric value in row {r}", off) from None
        return out.reshape(shape)
