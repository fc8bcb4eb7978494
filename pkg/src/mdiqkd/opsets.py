"""Catalogs of Bob's encoding operators and their sifting/coding tables.

An operator label is a word such as ``"HXZ"`` or ``"UXU"``; it denotes the
matrix product in the order written, so ``HXZ`` applies Z first.  Prefixes
``H1``..``H4`` are the extra basis-permuting gates of the six-state variant
and ``U`` is the real reflection taking {|0>,|1>} to {|x>,|y>}.
"""

from __future__ import annotations

import enum
import itertools
import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .qmath import MeasurementBasis, Unitary

PHASE_ATOL = 1e-9

_SQ2 = 1.0 / np.sqrt(2.0)

_LETTERS = {
    "I": np.eye(2),
    "X": np.array([[0, 1], [1, 0]]),
    "Z": np.array([[1, 0], [0, -1]]),
    "H": _SQ2 * np.array([[1, 1], [1, -1]]),
    "H1": _SQ2 * np.array([[1, -1j], [1j, -1]]),
    "H2": np.array([[1, 0], [0, 1j]]),
    "H3": _SQ2 * np.array([[1, 1], [1j, -1j]]),
    "H4": _SQ2 * np.array([[1, -1j], [1, 1j]]),
}

_TOKEN = re.compile(r"H[1-4]?|I|X|Z|U")

SIX_STATE_PREFIXES = ("I", "H", "H1", "H2", "H3", "H4")
SUFFIXES = ("I", "X", "Z", "XZ")
GENERAL_WORDS = ("I", "U", "XZ", "UXZ", "X", "Z", "UX", "UZ", "XU", "ZU", "UXU", "UZU")


class CatalogKind(str, enum.Enum):
    BB84_4 = "BB84-4"
    BB84_8 = "BB84-8"
    SIX_STATE_24 = "SixState-24"
    GENERAL_12 = "General-12"


class CodingMode(str, enum.Enum):
    FIXED_PER_OPERATOR = "FixedPerOperator"
    FLIP_PARITY_PER_CELL = "FlipParityPerCell"


class CodingError(ValueError):
    pass


def reflection(theta: float) -> np.ndarray:
    """The real unitary [[x0, x1], [x1, -x0]] with x0 = cos, x1 = sin."""
    x0, x1 = np.cos(theta), np.sin(theta)
    return np.array([[x0, x1], [x1, -x0]], dtype=complex)


def tokens(label: str) -> list[str]:
    toks = _TOKEN.findall(label)
    if "".join(toks) != label or not toks:
        raise ValueError(f"cannot parse operator label {label!r}")
    return toks


def operator_matrix(label: str, theta: float | None = None) -> np.ndarray:
    m = np.eye(2, dtype=complex)
    for t in tokens(label):
        if t == "U":
            if theta is None:
                raise ValueError(f"label {label!r} needs an angle")
            m = m @ reflection(theta)
        else:
            m = m @ _LETTERS[t]
    return m


def _join(prefix: str, suffix: str) -> str:
    if prefix == "I":
        return suffix
    return prefix if suffix == "I" else prefix + suffix


@dataclass(frozen=True)
class Operator:
    label: str
    unitary: Unitary
    prefix: str = "I"
    suffix: str = "I"

    @property
    def matrix(self) -> np.ndarray:
        return self.unitary.matrix


def _map_basis(m: np.ndarray, source: MeasurementBasis, target: MeasurementBasis):
    """Return 0/1 for an index-preserving/flipping map source->target, else None."""
    images = m @ source.matrix()
    overlaps = np.abs(target.matrix().conj().T @ images)
    if abs(overlaps[0, 0] - 1) <= PHASE_ATOL and abs(overlaps[1, 1] - 1) <= PHASE_ATOL:
        return 0
    if abs(overlaps[1, 0] - 1) <= PHASE_ATOL and abs(overlaps[0, 1] - 1) <= PHASE_ATOL:
        return 1
    return None


@dataclass(frozen=True)
class OperatorCatalog:
    kind: CatalogKind
    entries: tuple[Operator, ...]
    bases: tuple[MeasurementBasis, ...]
    theta: float | None = None
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        labels = [e.label for e in self.entries]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate operator labels in catalog")
        self._index.update({lab: i for i, lab in enumerate(labels)})

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, label):
        return label in self._index

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    @property
    def basis_labels(self) -> list[str]:
        return [b.label for b in self.bases]

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"{label!r} is not in the {self.kind.value} catalog") from None

    def basis(self, label: str) -> MeasurementBasis:
        for b in self.bases:
            if b.label == label:
                return b
        raise KeyError(f"basis {label!r} is not used by {self.kind.value}")

    def basis_index(self, label: str) -> int:
        return self.basis_labels.index(label)

    def matrix(self, label: str) -> np.ndarray:
        return self.entries[self.index(label)].matrix

    @cached_property
    def stack(self) -> np.ndarray:
        """(K, 2, 2) array of all operator matrices in catalog order."""
        return np.stack([e.matrix for e in self.entries])

    @cached_property
    def image_table(self) -> np.ndarray:
        """(K, B) target-basis index per (operator, source basis); -1 if none."""
        nb = len(self.bases)
        table = np.full((len(self), nb), -1, dtype=int)
        for k, e in enumerate(self.entries):
            for s, src in enumerate(self.bases):
                for t, tgt in enumerate(self.bases):
                    if _map_basis(e.matrix, src, tgt) is not None:
                        table[k, s] = t
                        break
        return table

    @cached_property
    def flip_table(self) -> np.ndarray:
        """(K, B) flip parity per (operator, source basis); -1 if no image."""
        table = np.full((len(self), len(self.bases)), -1, dtype=int)
        for k, e in enumerate(self.entries):
            for s, src in enumerate(self.bases):
                t = self.image_table[k, s]
                if t >= 0:
                    table[k, s] = _map_basis(e.matrix, src, self.bases[t])
        return table

    @cached_property
    def class_ids(self) -> np.ndarray:
        """Operators sharing a basis-image pattern get the same class id.

        The class is what Bob announces during sifting.
        """
        patterns = [tuple(row) for row in self.image_table]
        order = sorted(set(patterns), key=patterns.index)
        return np.array([order.index(p) for p in patterns], dtype=int)


def build_catalog(kind, theta: float | None = None) -> OperatorCatalog:
    kind = CatalogKind(kind)
    if kind is CatalogKind.GENERAL_12:
        if theta is None:
            raise ValueError("General-12 needs an angle theta")
        if not 0.0 < theta < np.pi / 2:
            raise ValueError(f"theta={theta} outside (0, pi/2)")
    elif theta is not None:
        raise ValueError(f"{kind.value} takes no angle")

    if kind is CatalogKind.BB84_4:
        pairs = [("I", "Z"), ("I", "X"), ("H", "I"), ("H", "XZ")]
        bases = (MeasurementBasis.z(), MeasurementBasis.x())
    elif kind is CatalogKind.BB84_8:
        pairs = [(p, s) for p in ("I", "H") for s in SUFFIXES]
        bases = (MeasurementBasis.z(), MeasurementBasis.x())
    elif kind is CatalogKind.SIX_STATE_24:
        pairs = [(p, s) for p in SIX_STATE_PREFIXES for s in SUFFIXES]
        bases = (MeasurementBasis.z(), MeasurementBasis.x(), MeasurementBasis.y())
    else:
        pairs = [(w, "I") for w in GENERAL_WORDS]
        bases = (MeasurementBasis.z(), MeasurementBasis.general(theta))

    entries = tuple(
        Operator(_join(p, s), Unitary(operator_matrix(_join(p, s), theta)), p, s)
        for p, s in pairs
    )
    return OperatorCatalog(kind, entries, bases, theta)


def basis_image(catalog: OperatorCatalog, op: str, source: str) -> str | None:
    """Basis that ``op`` maps ``source`` onto (up to phases), or None."""
    t = catalog.image_table[catalog.index(op), catalog.basis_index(source)]
    return None if t < 0 else catalog.bases[t].label


def prefix_permutation(prefix: str) -> dict[str, str]:
    """How a six-state prefix gate permutes the Z, X and Y bases."""
    if prefix not in SIX_STATE_PREFIXES:
        raise ValueError(f"unknown prefix {prefix!r}")
    m = operator_matrix(prefix)
    bases = [MeasurementBasis.z(), MeasurementBasis.x(), MeasurementBasis.y()]
    perm = {}
    for src in bases:
        for tgt in bases:
            if _map_basis(m, src, tgt) is not None:
                perm[src.label] = tgt.label
    return perm


def flip_parity(catalog: OperatorCatalog, op: str, cell: tuple[str, str]) -> int:
    src, tgt = cell
    if basis_image(catalog, op, src) != tgt:
        raise CodingError(f"{op} does not map {src} onto {tgt}")
    return int(catalog.flip_table[catalog.index(op), catalog.basis_index(src)])


@dataclass(frozen=True)
class CodingScheme:
    """Rule assigning a key bit to an operator within a kept cell.

    ``FixedPerOperator`` uses ``fixed_bits`` irrespective of the cell;
    ``FlipParityPerCell`` uses the flip parity of the operator in the cell.
    """

    mode: CodingMode
    fixed_bits: dict = field(default_factory=dict)

    @classmethod
    def flip_parity(cls) -> "CodingScheme":
        return cls(CodingMode.FLIP_PARITY_PER_CELL)

    @classmethod
    def fixed(cls, catalog: OperatorCatalog, bits: dict | None = None) -> "CodingScheme":
        # Default: an operator word containing X encodes 1 (Z, H -> 0; X, HXZ -> 1).
        if bits is None:
            bits = {lab: int("X" in tokens(lab)) for lab in catalog.labels}
        return cls(CodingMode.FIXED_PER_OPERATOR, dict(bits))


def default_coding(catalog: OperatorCatalog) -> CodingScheme:
    if catalog.kind is CatalogKind.BB84_4:
        return CodingScheme.fixed(catalog)
    return CodingScheme.flip_parity()


def coding_bit(scheme: CodingScheme, catalog: OperatorCatalog, op: str, cell: tuple[str, str]) -> int:
    src, tgt = cell
    if basis_image(catalog, op, src) != tgt:
        raise CodingError(f"{op} is not kept in cell {cell}")
    if scheme.mode is CodingMode.FIXED_PER_OPERATOR:
        return int(scheme.fixed_bits[op])
    return flip_parity(catalog, op, cell)


def cells(catalog: OperatorCatalog):
    labels = catalog.basis_labels
    return list(itertools.product(labels, labels))


def kept_operators(catalog: OperatorCatalog, cell: tuple[str, str]) -> list[str]:
    return [op for op in catalog.labels if basis_image(catalog, op, cell[0]) == cell[1]]


def coding_violations(catalog: OperatorCatalog, scheme: CodingScheme) -> list[tuple]:
    """List (cell, op_a, op_b) where indistinguishable operators carry different bits.

    Two operators are indistinguishable in a cell when they give identical
    outcome statistics on every legal input state of the source basis.
    """
    bad = []
    for cell in cells(catalog):
        src, tgt = (catalog.basis(b) for b in cell)
        sig = {}
        for op in kept_operators(catalog, cell):
            images = catalog.matrix(op) @ src.matrix()
            stats = np.round(np.abs(tgt.matrix().conj().T @ images) ** 2, 9)
            sig[op] = (stats.tobytes(), coding_bit(scheme, catalog, op, cell))
        for a, b in itertools.combinations(sig, 2):
            if sig[a][0] == sig[b][0] and sig[a][1] != sig[b][1]:
                bad.append((cell, a, b))
    return bad


def table_rows(catalog: OperatorCatalog, scheme: CodingScheme | None = None) -> list[dict]:
    """Keep/discard and coding table, one row per (alice basis, operator, measurement basis).

    The verdict is ``keep``, ``discard`` or ``N`` (operator invalid on the
    Alice basis whatever measurement basis is chosen).
    """
    scheme = scheme or default_coding(catalog)
    rows = []
    for a in catalog.basis_labels:
        for op in catalog.labels:
            img = basis_image(catalog, op, a)
            for m in catalog.basis_labels:
                if img is None:
                    verdict, bit, flip = "N", "", ""
                elif img == m:
                    verdict = "keep"
                    bit = coding_bit(scheme, catalog, op, (a, m))
                    flip = flip_parity(catalog, op, (a, m))
                else:
                    verdict, bit, flip = "discard", "", ""
                rows.append(
                    {
                        "alice_basis": a,
                        "operator": op,
                        "measurement_basis": m,
                        "verdict": verdict,
                        "flip_parity": flip,
                        "bit": bit,
                    }
                )
    return rows
