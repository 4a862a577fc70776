"""Atomic structures, periodic neighbor graphs, compositions, and dataset I/O.

File format is extended XYZ (``Lattice="..."``,
``Properties=species:S:1:pos:R:3[:forces:R:3]``, per-frame ``key=value``
labels) plus a JSON manifest listing file paths and split membership.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, UnsupportedOperationError


class InputError(ValueError):
    """Invalid structure data or malformed dataset record."""


ELEMENT_SYMBOLS = [
    "X", "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
]
SYMBOL_TO_Z = {s: z for z, s in enumerate(ELEMENT_SYMBOLS)}
MAX_Z = 100


@dataclass
class AtomicStructure:
    """Species, Cartesian positions (Angstrom), and an optional periodic cell.

    ``labels`` carries named scalars/arrays such as energy (eV), per-atom
    forces (eV/A), crystal_system and space_group class ids, and
    formation_energy (eV/atom). Unknown keys are preserved verbatim.
    """

    species: np.ndarray
    positions: np.ndarray
    cell: np.ndarray | None = None
    periodic: bool = False
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.species = np.asarray(self.species, dtype=np.int64)
        if isinstance(self.positions, Tensor):
            raise UnsupportedOperationError(
                "structures hold plain arrays; positions on the tape are not allowed here")
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.species.ndim != 1 or len(self.species) < 1:
            raise InputError("species must be a non-empty 1-d list of atomic numbers")
        if np.any(self.species < 1) or np.any(self.species > MAX_Z):
            raise InputError(f"atomic numbers must lie in [1, {MAX_Z}]")
        if self.positions.shape != (len(self.species), 3):
            raise InputError("positions must have shape (N, 3)")
        if not np.all(np.isfinite(self.positions)):
            raise InputError("positions must be finite")
        if self.cell is not None:
            self.cell = np.asarray(self.cell, dtype=np.float64)
            if self.cell.shape != (3, 3) or not np.all(np.isfinite(self.cell)):
                raise InputError("cell must be a finite 3x3 matrix")
        if self.periodic:
            if self.cell is None:
                raise InputError("periodic structures require a cell")
            if abs(np.linalg.det(self.cell)) <= 1e-8:
                raise InputError("periodic cell is singular or near-singular")

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    @classmethod
    def corrupted(cls, species, positions, cell, periodic) -> "AtomicStructure":
        """Construct a masked/noised view; species 0 (the mask sentinel) is
        allowed here, unlike in real dataset records."""
        out = cls.__new__(cls)
        out.species = np.asarray(species, dtype=np.int64)
        out.positions = np.asarray(positions, dtype=np.float64)
        out.cell = None if cell is None else np.asarray(cell, dtype=np.float64)
        out.periodic = periodic
        out.labels = {}
        if np.any(out.species < 0) or np.any(out.species > MAX_Z):
            raise InputError("corrupted species must lie in [0, 100]")
        return out

    def copy(self) -> "AtomicStructure":
        return AtomicStructure(
            species=self.species.copy(),
            positions=self.positions.copy(),
            cell=None if self.cell is None else self.cell.copy(),
            periodic=self.periodic,
            labels={k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.labels.items()},
        )


@dataclass
class NeighborGraph:
    """Directed radius-cutoff edges with per-edge displacement vectors.

    Edge e runs from center ``src[e]`` to neighbor ``dst[e]``; its displacement
    is ``positions[dst] - positions[src] + shift @ cell`` and points from the
    center toward the neighbor image. A node's neighborhood is the set of
    edges with that node as ``src``, truncated to the nearest ``max_neighbors``.
    """

    src: np.ndarray
    dst: np.ndarray
    shift: np.ndarray
    displacement: np.ndarray
    distance: np.ndarray
    cutoff: float
    max_neighbors: int
    n_nodes: int

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def shift_offsets(self, cell: np.ndarray | None) -> np.ndarray:
        """Constant Cartesian offsets shift @ cell, zeros when non-periodic."""
        if cell is None:
            return np.zeros((self.n_edges, 3))
        return self.shift.astype(np.float64) @ cell


@dataclass
class Composition:
    """Unique (atomic number, count) tokens in ascending atomic-number order."""

    tokens: list[tuple[int, int]]

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def numbers(self) -> np.ndarray:
        return np.array([z for z, _ in self.tokens], dtype=np.int64)

    @property
    def counts(self) -> np.ndarray:
        return np.array([c for _, c in self.tokens], dtype=np.int64)

    @property
    def n_atoms(self) -> int:
        return int(sum(c for _, c in self.tokens))


def _shift_ranges(cell: np.ndarray, cutoff: float) -> list[int]:
    """Smallest per-axis image counts whose box covers the cutoff sphere."""
    volume = abs(np.linalg.det(cell))
    counts = []
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        cross = np.cross(cell[j], cell[k])
        spacing = volume / np.linalg.norm(cross)
        counts.append(int(np.ceil(cutoff / spacing)))
    return counts


def build_graph(structure: AtomicStructure, cutoff: float, max_neighbors: int) -> NeighborGraph:
    """All neighbor images within ``cutoff``, nearest ``max_neighbors`` per center.

    Distance ties break by (smaller neighbor index, then lexicographic shift),
    so edge order is deterministic. Self edges with zero shift are excluded;
    periodic self-images are kept.
    """
    if isinstance(structure, Tensor) or isinstance(getattr(structure, "positions", None), Tensor):
        raise UnsupportedOperationError(
            "graph construction is not differentiable; the graph is fixed per input")
    if cutoff <= 0:
        raise InputError("cutoff must be positive")
    if max_neighbors < 1:
        raise InputError("max_neighbors must be at least 1")
    x = structure.positions
    n = structure.n_atoms

    if structure.periodic:
        ranges = _shift_ranges(structure.cell, cutoff)
        shifts = np.array([[a, b, c]
                           for a in range(-ranges[0], ranges[0] + 1)
                           for b in range(-ranges[1], ranges[1] + 1)
                           for c in range(-ranges[2], ranges[2] + 1)], dtype=np.int64)
    else:
        shifts = np.zeros((1, 3), dtype=np.int64)

    src_all, dst_all, shift_all, disp_all, dist_all = [], [], [], [], []
    for s in shifts:
        offset = s.astype(np.float64) @ structure.cell if structure.periodic else np.zeros(3)
        disp = x[None, :, :] + offset[None, None, :] - x[:, None, :]
        dist = np.linalg.norm(disp, axis=-1)
        mask = dist <= cutoff
        if not np.any(s):
            np.fill_diagonal(mask, False)
        ii, jj = np.nonzero(mask)
        if len(ii) == 0:
            continue
        d = dist[ii, jj]
        if np.any(d <= 1e-12):
            raise InputError("coincident atoms: zero-distance neighbor pair")
        src_all.append(ii)
        dst_all.append(jj)
        shift_all.append(np.broadcast_to(s, (len(ii), 3)))
        disp_all.append(disp[ii, jj])
        dist_all.append(d)

    if not src_all:
        empty = np.zeros(0, dtype=np.int64)
        return NeighborGraph(empty, empty.copy(), np.zeros((0, 3), dtype=np.int64),
                             np.zeros((0, 3)), np.zeros(0), cutoff, max_neighbors, n)

    src = np.concatenate(src_all)
    dst = np.concatenate(dst_all)
    shift = np.concatenate(shift_all)
    disp = np.concatenate(disp_all)
    dist = np.concatenate(dist_all)

    # sort by (center, distance, neighbor index, shift lexicographic)
    order = np.lexsort((shift[:, 2], shift[:, 1], shift[:, 0], dst, dist, src))
    src, dst, shift, disp, dist = src[order], dst[order], shift[order], disp[order], dist[order]

    keep = np.ones(len(src), dtype=bool)
    counts = np.zeros(n, dtype=np.int64)
    for e in range(len(src)):
        c = src[e]
        if counts[c] >= max_neighbors:
            keep[e] = False
        else:
            counts[c] += 1
    return NeighborGraph(src[keep], dst[keep], shift[keep], disp[keep], dist[keep],
                         cutoff, max_neighbors, n)


def compress_composition(structure: AtomicStructure) -> Composition:
    """Exact element multiplicities; absolute counts are preserved."""
    numbers, counts = np.unique(structure.species, return_counts=True)
    return Composition(tokens=[(int(z), int(c)) for z, c in zip(numbers, counts)])


# ---------------------------------------------------------------------------
# extended-XYZ I/O

_KV_RE = re.compile(r'(\S+?)=(?:"([^"]*)"|(\S+))')

_SCALAR_LABELS = {
    "energy": float,
    "formation_energy": float,
    "space_group": int,
    "crystal_system": int,
    "geometry_family": int,
}


def _format_float(v: float) -> str:
    return f"{v:.12g}"


def _parse_comment(line: str, record: int) -> tuple[np.ndarray | None, bool, list, dict]:
    cell = None
    periodic = False
    properties = [("species", "S", 1), ("pos", "R", 3)]
    labels: dict = {}
    for m in _KV_RE.finditer(line):
        key = m.group(1)
        raw = m.group(2) if m.group(2) is not None else m.group(3)
        if key == "Lattice":
            vals = [float(t) for t in raw.split()]
            if len(vals) != 9:
                raise InputError(f"record {record}: Lattice needs 9 numbers")
            cell = np.array(vals).reshape(3, 3)
        elif key == "pbc":
            periodic = "T" in raw.upper()
        elif key == "Properties":
            fields = raw.split(":")
            if len(fields) % 3 != 0:
                raise InputError(f"record {record}: malformed Properties string")
            properties = [(fields[i], fields[i + 1], int(fields[i + 2]))
                          for i in range(0, len(fields), 3)]
        else:
            if key in _SCALAR_LABELS:
                try:
                    labels[key] = _SCALAR_LABELS[key](raw)
                except ValueError as err:
                    raise InputError(f"record {record}: bad value for {key}: {raw!r}") from err
            else:
                labels[key] = raw
    return cell, periodic, properties, labels


def write_xyz(structures: list[AtomicStructure], path) -> None:
    lines = []
    for s in structures:
        lines.append(str(s.n_atoms))
        per_atom = [(k, v) for k, v in s.labels.items()
                    if isinstance(v, np.ndarray) and v.ndim == 2 and v.shape[0] == s.n_atoms]
        props = "species:S:1:pos:R:3"
        for k, v in per_atom:
            props += f":{k}:R:{v.shape[1]}"
        fields = [f"Properties={props}"]
        if s.cell is not None:
            flat = " ".join(_format_float(v) for v in s.cell.reshape(-1))
            fields.append(f'Lattice="{flat}"')
        fields.append(f'pbc="{"T T T" if s.periodic else "F F F"}"')
        for k, v in s.labels.items():
            if isinstance(v, np.ndarray):
                continue
            if isinstance(v, float):
                fields.append(f"{k}={_format_float(v)}")
            else:
                text = str(v)
                fields.append(f'{k}="{text}"' if " " in text else f"{k}={text}")
        lines.append(" ".join(fields))
        for i in range(s.n_atoms):
            row = [ELEMENT_SYMBOLS[s.species[i]]]
            row += [_format_float(v) for v in s.positions[i]]
            for _, v in per_atom:
                row += [_format_float(u) for u in v[i]]
            lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_xyz(path) -> list[AtomicStructure]:
    text = Path(path).read_text()
    lines = text.splitlines()
    structures = []
    pos = 0
    record = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        try:
            n = int(lines[pos].strip())
        except ValueError as err:
            raise InputError(f"record {record} (line {pos + 1}): expected atom count, "
                             f"got {lines[pos]!r}") from err
        if pos + 2 + n > len(lines):
            raise InputError(f"record {record}: truncated (expected {n} atom lines)")
        cell, periodic, properties, labels = _parse_comment(lines[pos + 1], record)
        expected_cols = sum(width for _, _, width in properties)
        species = np.zeros(n, dtype=np.int64)
        arrays = {name: np.zeros((n, width))
                  for name, kind, width in properties if name not in ("species", "pos")}
        positions = np.zeros((n, 3))
        for i in range(n):
            parts = lines[pos + 2 + i].split()
            if len(parts) != expected_cols:
                raise InputError(f"record {record}, atom {i} (line {pos + 3 + i}): "
                                 f"expected {expected_cols} columns, got {len(parts)}")
            col = 0
            for name, kind, width in properties:
                chunk = parts[col:col + width]
                col += width
                if name == "species":
                    sym = chunk[0]
                    if sym not in SYMBOL_TO_Z:
                        raise InputError(f"record {record}, atom {i}: unknown element {sym!r}")
                    species[i] = SYMBOL_TO_Z[sym]
                elif name == "pos":
                    positions[i] = [float(v) for v in chunk]
                else:
                    arrays[name][i] = [float(v) for v in chunk]
        labels.update(arrays)
        try:
            structures.append(AtomicStructure(species=species, positions=positions,
                                              cell=cell, periodic=periodic, labels=labels))
        except InputError as err:
            raise InputError(f"record {record}: {err}") from err
        pos += 2 + n
        record += 1
    return structures


def write_dataset(structures: list[AtomicStructure], path) -> None:
    write_xyz(structures, path)


def read_dataset(path) -> list[AtomicStructure]:
    return read_xyz(path)


def write_manifest(path, files: dict[str, str]) -> None:
    """``files`` maps relative file path -> split name."""
    doc = {"version": 1, "files": [{"path": p, "split": s} for p, s in files.items()]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> dict[str, list[AtomicStructure]]:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("version") != 1:
        raise InputError(f"unsupported manifest version: {doc.get('version')!r}")
    splits: dict[str, list[AtomicStructure]] = {}
    for entry in doc["files"]:
        splits.setdefault(entry["split"], []).extend(read_xyz(path.parent / entry["path"]))
    return splits
