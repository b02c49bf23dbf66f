"""
Versioned Numeric Text Format

Structured text used for checkpoints and fitted curvature:

    # laplace-lora <kind> v1
    key = value
    ...
    @block <name> <rows> <cols>
    <rows lines of cols space-separated floats, 17 significant digits>

Floats are written with "%.17g" so a save/load cycle is bit-lossless.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np

from laplace_lora.core.errors import FormatError
from laplace_lora.core.linalg import Matrix

logger = logging.getLogger("laplace-lora.numeric_text")

FORMAT_VERSION = 1
MAGIC = "# laplace-lora"


@dataclass
class NumericDocument:
    """In-memory form of a numeric text file"""

    kind: str
    header: Dict[str, str] = field(default_factory=dict)
    blocks: Dict[str, Matrix] = field(default_factory=dict)

    def require(self, key: str) -> str:
        if key not in self.header:
            raise FormatError(f"{self.kind} file is missing header key '{key}'")
        return self.header[key]

    def block(self, name: str) -> Matrix:
        if name not in self.blocks:
            raise FormatError(f"{self.kind} file is missing block '{name}'")
        return self.blocks[name]


def _format_row(row: np.ndarray) -> str:
    return " ".join("%.17g" % float(v) for v in row)


def dumps(doc: NumericDocument) -> str:
    lines = [f"{MAGIC} {doc.kind} v{FORMAT_VERSION}"]
    for key, value in doc.header.items():
        if "\n" in value or "=" in key:
            raise FormatError(f"Header entry '{key}' cannot be written")
        lines.append(f"{key} = {value}")
    for name, mat in doc.blocks.items():
        arr = np.atleast_2d(np.asarray(mat, dtype=np.float64))
        rows, cols = arr.shape
        lines.append(f"@block {name} {rows} {cols}")
        for r in range(rows):
            lines.append(_format_row(arr[r]))
    return "\n".join(lines) + "\n"


def loads(text: str, expected_kind: str) -> NumericDocument:
    lines = text.splitlines()
    if not lines:
        raise FormatError("Empty numeric text file")

    first = lines[0].split()
    if len(first) != 4 or " ".join(first[:2]) != MAGIC:
        raise FormatError(f"line 1: not a laplace-lora file: {lines[0]!r}")
    kind, version = first[2], first[3]
    if kind != expected_kind:
        raise FormatError(f"line 1: expected kind '{expected_kind}', found '{kind}'")
    if version != f"v{FORMAT_VERSION}":
        raise FormatError(f"line 1: unsupported version '{version}'")

    doc = NumericDocument(kind=kind)
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        lineno = i + 1
        i += 1
        if not line:
            continue
        if line.startswith("@block"):
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"line {lineno}: malformed block header")
            name = parts[1]
            try:
                rows, cols = int(parts[2]), int(parts[3])
            except ValueError as e:
                raise FormatError(f"line {lineno}: bad block shape") from e
            if rows < 0 or cols < 0:
                raise FormatError(f"line {lineno}: negative block shape")
            data = np.zeros((rows, cols))
            for r in range(rows):
                if i >= len(lines):
                    raise FormatError(f"block '{name}' truncated after {r} rows")
                values = lines[i].split()
                if len(values) != cols:
                    raise FormatError(
                        f"line {i + 1}: expected {cols} values in block '{name}', "
                        f"got {len(values)}"
                    )
                try:
                    data[r] = [float(v) for v in values]
                except ValueError as e:
                    raise FormatError(f"line {i + 1}: {e}") from e
                i += 1
            if name in doc.blocks:
                raise FormatError(f"line {lineno}: duplicate block '{name}'")
            doc.blocks[name] = data
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        doc.header[key.strip()] = value.strip()
    return doc


def save(doc: NumericDocument, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(dumps(doc))
    logger.debug(f"Wrote {doc.kind} file {target} ({len(doc.blocks)} blocks)")
    return target


def load(path: Union[str, Path], expected_kind: str) -> NumericDocument:
    source = Path(path)
    if not source.exists():
        raise FormatError(f"File not found: {source}")
    return loads(source.read_text(), expected_kind)
