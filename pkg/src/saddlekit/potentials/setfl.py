"""Reader and writer for tabulated EAM files (``setfl`` alloy and Finnis-Sinclair styles)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np

from ..errors import ParseError

__all__ = ["EamTables", "parse_setfl", "write_setfl", "read_setfl"]


@dataclass(frozen=True)
class EamTables:
    """Raw tables.

    ``density[a, b]`` is the density seen by an atom of element ``a`` from a
    neighbor of element ``b``; ``rphi[a, b]`` is the symmetric pair table
    ``r * phi(r)`` in eV*Angstrom.
    """

    elements: Tuple[str, ...]
    numbers: Tuple[int, ...]
    masses: Tuple[float, ...]
    lattice_constants: Tuple[float, ...]
    lattice_types: Tuple[str, ...]
    nrho: int
    drho: float
    nr: int
    dr: float
    cutoff: float
    embedding: np.ndarray  # (ne, nrho)
    density: np.ndarray  # (ne, ne, nr)
    rphi: np.ndarray  # (ne, ne, nr)
    style: str = "alloy"
    comments: Tuple[str, str, str] = ("", "", "")

    @property
    def n_elements(self):
        return len(self.elements)


class _Tokens:
    def __init__(self, lines, start):
        self._items = []
        for lineno, line in enumerate(lines[start:], start=start + 1):
            for tok in line.split():
                self._items.append((tok, lineno))
        self._pos = 0
        self._last = start

    def word(self, what):
        if self._pos >= len(self._items):
            raise ParseError(f"file truncated while reading {what}", line=self._last + 1)
        tok, line = self._items[self._pos]
        self._pos += 1
        self._last = line
        return tok, line

    def number(self, what, kind=float):
        tok, line = self.word(what)
        try:
            return kind(tok)
        except ValueError:
            raise ParseError(f"non-numeric token {tok!r} in {what}", line=line) from None

    def array(self, n, what):
        if self._pos + n > len(self._items):
            last = self._items[-1][1] if self._items else self._last
            raise ParseError(f"file truncated: {what} needs {n} values", line=last)
        chunk = self._items[self._pos:self._pos + n]
        try:
            out = np.array([float(t) for t, _ in chunk])
        except ValueError:
            for t, line in chunk:
                try:
                    float(t)
                except ValueError:
                    raise ParseError(f"non-numeric token {t!r} in {what}", line=line) from None
        self._pos += n
        self._last = chunk[-1][1] if chunk else self._last
        return out

    def remaining(self):
        return len(self._items) - self._pos


def parse_setfl(text: Union[str, bytes], style: str = "alloy") -> EamTables:
    """Parse setfl content.

    Parameters
    ----------
    text : str or bytes
    style : {"alloy", "fs"}
        In the ``fs`` style each element block carries one density table per
        partner element.
    """
    if style not in ("alloy", "fs"):
        raise ValueError(f"unknown setfl style {style!r}")
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    lines = text.splitlines()
    if len(lines) < 5:
        raise ParseError("file truncated in header", line=len(lines) + 1)
    head = lines[3].split()
    if not head:
        raise ParseError("missing element count", line=4)
    try:
        ne = int(head[0])
    except ValueError:
        raise ParseError(f"non-numeric element count {head[0]!r}", line=4) from None
    if ne < 1 or len(head) < ne + 1:
        raise ParseError(f"element line must list {ne} symbols", line=4)
    elements = tuple(head[1:ne + 1])

    grid = _Tokens(lines[:5], 4)
    nrho = grid.number("Nrho", int)
    drho = grid.number("drho")
    nr = grid.number("Nr", int)
    dr = grid.number("dr")
    cutoff = grid.number("cutoff")
    if nrho <= 1 or nr <= 1:
        raise ParseError("Nrho and Nr must exceed 1", line=5)
    if drho <= 0 or dr <= 0:
        raise ParseError("grid spacings must be positive", line=5)
    if cutoff < 0:
        raise ParseError("negative cutoff", line=5)

    tok = _Tokens(lines, 5)
    numbers, masses, a0s, lats = [], [], [], []
    F = np.empty((ne, nrho))
    dens = np.empty((ne, ne, nr))
    for a in range(ne):
        numbers.append(tok.number(f"atomic number of {elements[a]}", int))
        masses.append(tok.number(f"mass of {elements[a]}"))
        a0s.append(tok.number(f"lattice constant of {elements[a]}"))
        lats.append(tok.word(f"lattice type of {elements[a]}")[0])
        F[a] = tok.array(nrho, f"embedding table of {elements[a]}")
        if style == "alloy":
            dens[:, a] = tok.array(nr, f"density table of {elements[a]}")
        else:
            for b in range(ne):
                dens[a, b] = tok.array(nr, f"density table {elements[a]}-{elements[b]}")
    rphi = np.empty((ne, ne, nr))
    for a in range(ne):
        for b in range(a + 1):
            rphi[a, b] = tok.array(nr, f"pair table {elements[a]}-{elements[b]}")
            rphi[b, a] = rphi[a, b]
    return EamTables(
        elements=elements,
        numbers=tuple(numbers),
        masses=tuple(masses),
        lattice_constants=tuple(a0s),
        lattice_types=tuple(lats),
        nrho=nrho,
        drho=drho,
        nr=nr,
        dr=dr,
        cutoff=cutoff,
        embedding=F,
        density=dens,
        rphi=rphi,
        style=style,
        comments=tuple((lines[i] for i in range(3))),
    )


def read_setfl(path, style=None) -> EamTables:
    """Read a file; the style defaults from the extension (``.fs`` means Finnis-Sinclair)."""
    path = str(path)
    if style is None:
        style = "fs" if path.endswith(".fs") else "alloy"
    with open(path, "rb") as fh:
        return parse_setfl(fh.read(), style)


def _fmt(values, per_line=5):
    out = []
    for k in range(0, len(values), per_line):
        out.append(" ".join(repr(float(v)) for v in values[k:k + per_line]))
    return out


def write_setfl(tables: EamTables, style: str = None) -> str:
    """Serialize with round-trip (``repr``) precision."""
    style = style or tables.style
    ne = tables.n_elements
    comments = list(tables.comments) + ["", "", ""]
    lines = [c.replace("\n", " ") for c in comments[:3]]
    lines.append(" ".join([str(ne), *tables.elements]))
    lines.append(f"{tables.nrho} {tables.drho!r} {tables.nr} {tables.dr!r} {tables.cutoff!r}")
    for a in range(ne):
        lines.append(f"{tables.numbers[a]} {tables.masses[a]!r} {tables.lattice_constants[a]!r} {tables.lattice_types[a]}")
        lines += _fmt(tables.embedding[a])
        if style == "alloy":
            lines += _fmt(tables.density[0, a])
        else:
            for b in range(ne):
                lines += _fmt(tables.density[a, b])
    for a in range(ne):
        for b in range(a + 1):
            lines += _fmt(tables.rphi[a, b])
    return "\n".join(lines) + "\n"
