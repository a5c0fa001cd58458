"""Matrix and decomposition file formats.

Text matrices: first line ``rows cols``, then one line per row of
space-separated decimal floats written with shortest-round-trip
formatting (reading recovers the exact values).

Binary matrices: magic ``LSRB``, one version byte, unsigned 32-bit
little-endian rows and cols, then rows*cols little-endian IEEE float64
values in row-major order.  Round-trips are bit-exact.

A separated representation is stored as a manifest (text) naming the
shape, the term count, and per term the weight plus relative paths of
the factor files.
"""

import struct
from pathlib import Path

import numpy as np

from .kron_core import Matrix, Shape, as_matrix
from .lsr_repr import KronTerm, SeparatedMatrix

MAGIC = b"LSRB"
VERSION = 1
_HEADER = struct.Struct("<4sBII")


def write_matrix_binary(path, M) -> None:
    M = as_matrix(M, "M")
    rows, cols = M.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols))
        fh.write(np.ascontiguousarray(M, dtype="<f8").tobytes())


def write_matrix_text(path, M) -> None:
    M = as_matrix(M, "M")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{M.shape[0]} {M.shape[1]}\n")
        for row in M:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_matrix(path) -> Matrix:
    """Read either format, sniffing the binary magic."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == MAGIC:
            rest = fh.read(_HEADER.size - 4)
            if len(rest) != _HEADER.size - 4:
                raise ValueError(f"{path}: truncated binary header")
            _, version, rows, cols = _HEADER.unpack(head + rest)
            if version != VERSION:
                raise ValueError(f"{path}: unsupported version {version}")
            payload = fh.read()
            if len(payload) != rows * cols * 8:
                raise ValueError(
                    f"{path}: payload holds {len(payload) // 8} values, "
                    f"header declares {rows}x{cols}")
            data = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
            return as_matrix(data, str(path))
    return _read_matrix_text(path)


def _read_matrix_text(path) -> Matrix:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: expected 'rows cols' header")
        try:
            rows, cols = int(header[0]), int(header[1])
        except ValueError as exc:
            raise ValueError(f"{path}: bad header {header}") from exc
        data = np.empty((rows, cols))
        for i in range(rows):
            parts = fh.readline().split()
            if len(parts) != cols:
                raise ValueError(f"{path}: row {i} has {len(parts)} values, "
                                 f"expected {cols}")
            data[i] = [float(p) for p in parts]
    return as_matrix(data, str(path))


def write_separated(S: SeparatedMatrix, directory, name: str = "decomp") -> Path:
    """Write factor files (binary) plus a manifest; returns the manifest
    path.  Factor paths inside the manifest are relative to it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"lsr-manifest {VERSION}",
             f"shape {S.shape.rows} {S.shape.cols}",
             f"terms {len(S.terms)}"]
    for k, term in enumerate(S.terms):
        lines.append(f"term {k}")
        lines.append(f"weight {float(term.weight)!r}")
        for i, factor in enumerate(term.factors):
            rel = f"{name}_t{k:03d}_f{i}.lsrb"
            write_matrix_binary(directory / rel, factor)
            lines.append(f"factor {rel}")
    manifest = directory / f"{name}.manifest"
    manifest.write_text("\n".join(lines) + "\n", encoding="ascii")
    return manifest


def read_separated(manifest_path) -> SeparatedMatrix:
    manifest_path = Path(manifest_path)
    lines = [ln.strip() for ln in
             manifest_path.read_text(encoding="ascii").splitlines()
             if ln.strip()]
    if not lines or lines[0].split() != ["lsr-manifest", str(VERSION)]:
        raise ValueError(f"{manifest_path}: not a supported manifest")

    def expect(i, key):
        parts = lines[i].split()
        if parts[0] != key:
            raise ValueError(f"{manifest_path}: expected '{key}' on line "
                             f"{i + 1}, got {lines[i]!r}")
        return parts[1:]

    rows, cols = (int(v) for v in expect(1, "shape"))
    n_terms = int(expect(2, "terms")[0])
    base = manifest_path.parent
    terms = []
    i = 3
    for k in range(n_terms):
        expect(i, "term")
        weight = float(expect(i + 1, "weight")[0])
        i += 2
        factors = []
        while i < len(lines) and lines[i].startswith("factor "):
            factors.append(read_matrix(base / lines[i].split(maxsplit=1)[1]))
            i += 1
        terms.append(KronTerm(weight, factors))
    return SeparatedMatrix(Shape(rows, cols), terms)
