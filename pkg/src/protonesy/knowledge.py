"""Propositional background knowledge over concept atoms.

Atoms are written ``c[<group>]=<class>``. The text grammar, from loosest to
tightest binding::

    iff     := implies ('<->' implies)*          left-associative
    implies := or ('->' implies)?                right-associative
    or      := and ('|' and)*
    and     := unary ('&' unary)*
    unary   := '~' unary | atom | 'true' | 'false' | '(' iff ')'

``#`` starts a comment that runs to the end of the line.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

FREE = "free"
ONE_HOT = "one_hot"

MAX_FREE_ATOMS = 24
MAX_ONE_HOT_MODELS = 10**7


class KnowledgeSyntaxError(ValueError):
    """Malformed knowledge text; ``offset`` is the UTF-8 byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class EnumerationLimitError(ValueError):
    pass


@dataclass(frozen=True)
class ConceptSpace:
    sizes: tuple[int, ...]

    def __init__(self, sizes: Sequence[int]):
        sizes = tuple(int(h) for h in sizes)
        if len(sizes) < 1:
            raise ValueError("a concept space needs at least one group")
        if any(h < 2 for h in sizes):
            raise ValueError(f"every group needs at least two classes, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def k(self) -> int:
        return len(self.sizes)

    @property
    def n_atoms(self) -> int:
        return sum(self.sizes)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.cumsum((0,) + self.sizes[:-1]))

    def index(self, group: int, cls: int) -> int:
        """Flat position of atom ``(group, cls)``."""
        self.check_atom(group, cls)
        return self.offsets[group] + cls

    def check_atom(self, group: int, cls: int) -> None:
        if not 0 <= group < self.k:
            raise ValueError(f"group {group} out of range for {self.k} groups")
        if not 0 <= cls < self.sizes[group]:
            raise ValueError(f"class {cls} out of range for group {group} of size {self.sizes[group]}")

    def group_slice(self, group: int) -> slice:
        o = self.offsets[group]
        return slice(o, o + self.sizes[group])


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    group: int
    cls: int


@dataclass(frozen=True)
class Const:
    value: bool


TRUE = Const(True)
FALSE = Const(False)


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    children: tuple["Formula", ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("And needs at least two children; use conj()")


@dataclass(frozen=True)
class Or:
    children: tuple["Formula", ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("Or needs at least two children; use disj()")


@dataclass(frozen=True)
class Implies:
    lhs: "Formula"
    rhs: "Formula"


@dataclass(frozen=True)
class Iff:
    lhs: "Formula"
    rhs: "Formula"


Formula = Union[Atom, Const, Not, And, Or, Implies, Iff]


def conj(*fs: Formula) -> Formula:
    if not fs:
        return TRUE
    return fs[0] if len(fs) == 1 else And(tuple(fs))


def disj(*fs: Formula) -> Formula:
    if not fs:
        return FALSE
    return fs[0] if len(fs) == 1 else Or(tuple(fs))


def atoms_of(f: Formula) -> set[Atom]:
    if isinstance(f, Atom):
        return {f}
    if isinstance(f, Const):
        return set()
    if isinstance(f, Not):
        return atoms_of(f.child)
    if isinstance(f, (And, Or)):
        return set().union(*(atoms_of(c) for c in f.children))
    return atoms_of(f.lhs) | atoms_of(f.rhs)


def check_formula(f: Formula, space: ConceptSpace) -> None:
    for a in atoms_of(f):
        space.check_atom(a.group, a.cls)


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

_PREC = {Iff: 1, Implies: 2, Or: 3, And: 4, Not: 5, Atom: 6, Const: 6}


def to_text(f: Formula) -> str:
    """Render ``f`` so that ``parse(to_text(f))`` rebuilds the same tree."""
    if isinstance(f, Atom):
        return f"c[{f.group}]={f.cls}"
    if isinstance(f, Const):
        return "true" if f.value else "false"
    if isinstance(f, Not):
        return "~" + _wrap(f.child, _PREC[Not] - 1)
    if isinstance(f, And):
        return " & ".join(_wrap(c, _PREC[And]) for c in f.children)
    if isinstance(f, Or):
        return " | ".join(_wrap(c, _PREC[Or]) for c in f.children)
    if isinstance(f, Implies):
        return f"{_wrap(f.lhs, _PREC[Implies])} -> {_wrap(f.rhs, _PREC[Implies] - 1)}"
    if isinstance(f, Iff):
        return f"{_wrap(f.lhs, _PREC[Iff] - 1)} <-> {_wrap(f.rhs, _PREC[Iff])}"
    raise TypeError(f"not a formula: {f!r}")


def _wrap(f: Formula, at_most: int) -> str:
    # parenthesize when the child binds no tighter than ``at_most``
    s = to_text(f)
    return f"({s})" if _PREC[type(f)] <= at_most else s


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<iff><->)
  | (?P<imp>->)
  | (?P<op>[~&|()])
  | (?P<atom>c\[(?P<g>\d+)\]=(?P<c>\d+))
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*(?:\[[^\]]*\](?:=\S*)?)?)
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> list[tuple[str, object, int]]:
    data = text
    tokens = []
    pos = 0
    byte_pos = 0
    while pos < len(data):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise KnowledgeSyntaxError(f"unexpected character {data[pos]!r}", byte_pos)
        kind = m.lastgroup
        if kind == "ws":
            pass
        elif kind == "iff":
            tokens.append(("<->", None, byte_pos))
        elif kind == "imp":
            tokens.append(("->", None, byte_pos))
        elif kind == "op":
            tokens.append((m.group(), None, byte_pos))
        elif kind in ("g", "c", "atom"):
            tokens.append(("atom", (int(m.group("g")), int(m.group("c"))), byte_pos))
        else:
            word = m.group("word")
            if word == "true":
                tokens.append(("const", True, byte_pos))
            elif word == "false":
                tokens.append(("const", False, byte_pos))
            elif re.fullmatch(r"c\[\d*\]=?", word) or re.fullmatch(r"c\[\d+\]=\S*", word):
                # an atom whose class part is missing or malformed
                bad = byte_pos + len(word.encode("utf-8"))
                if word.endswith("="):
                    raise KnowledgeSyntaxError("expected class index after '='", bad)
                raise KnowledgeSyntaxError(f"malformed atom {word!r}", byte_pos)
            else:
                raise KnowledgeSyntaxError(f"unknown atom name {word!r}", byte_pos)
        byte_pos += len(m.group().encode("utf-8"))
        pos = m.end()
    tokens.append(("eof", None, byte_pos))
    return tokens


class _Parser:
    def __init__(self, text: str, space: ConceptSpace):
        self.tokens = _tokenize(text)
        self.i = 0
        self.space = space

    def peek(self) -> str:
        return self.tokens[self.i][0]

    def take(self, kind: str):
        tok = self.tokens[self.i]
        if tok[0] != kind:
            what = "end of input" if tok[0] == "eof" else repr(tok[0])
            raise KnowledgeSyntaxError(f"expected {kind!r}, found {what}", tok[2])
        self.i += 1
        return tok

    def parse(self) -> Formula:
        f = self.iff()
        self.take("eof")
        return f

    def iff(self) -> Formula:
        f = self.implies()
        while self.peek() == "<->":
            self.i += 1
            f = Iff(f, self.implies())
        return f

    def implies(self) -> Formula:
        f = self.disjunction()
        if self.peek() == "->":
            self.i += 1
            return Implies(f, self.implies())
        return f

    def disjunction(self) -> Formula:
        parts = [self.conjunction()]
        while self.peek() == "|":
            self.i += 1
            parts.append(self.conjunction())
        return disj(*parts)

    def conjunction(self) -> Formula:
        parts = [self.unary()]
        while self.peek() == "&":
            self.i += 1
            parts.append(self.unary())
        return conj(*parts)

    def unary(self) -> Formula:
        kind, value, offset = self.tokens[self.i]
        if kind == "~":
            self.i += 1
            return Not(self.unary())
        if kind == "(":
            self.i += 1
            f = self.iff()
            self.take(")")
            return f
        if kind == "const":
            self.i += 1
            return TRUE if value else FALSE
        if kind == "atom":
            self.i += 1
            g, c = value
            try:
                self.space.check_atom(g, c)
            except ValueError as err:
                raise KnowledgeSyntaxError(f"atom index out of range ({err})", offset) from None
            return Atom(g, c)
        what = "end of input" if kind == "eof" else repr(kind)
        raise KnowledgeSyntaxError(f"expected a formula, found {what}", offset)


def parse(text: str, space: ConceptSpace) -> Formula:
    """Parse knowledge text into a formula over ``space``."""
    return _Parser(text, space).parse()


# ---------------------------------------------------------------------------
# Semantics
# ---------------------------------------------------------------------------


def evaluate(f: Formula, nu, space: ConceptSpace) -> bool:
    """Truth value of ``f`` under the flat boolean assignment ``nu``."""
    nu = np.asarray(nu, dtype=bool)
    if nu.shape != (space.n_atoms,):
        raise ValueError(f"assignment has shape {nu.shape}, expected ({space.n_atoms},)")
    return bool(evaluate_many(f, nu[None, :], space)[0])


def evaluate_many(f: Formula, nus: np.ndarray, space: ConceptSpace) -> np.ndarray:
    """Vectorised evaluation over the rows of a boolean matrix."""
    n = nus.shape[0]
    if isinstance(f, Atom):
        return nus[:, space.index(f.group, f.cls)]
    if isinstance(f, Const):
        return np.full(n, f.value, dtype=bool)
    if isinstance(f, Not):
        return ~evaluate_many(f.child, nus, space)
    if isinstance(f, And):
        out = evaluate_many(f.children[0], nus, space).copy()
        for c in f.children[1:]:
            out &= evaluate_many(c, nus, space)
        return out
    if isinstance(f, Or):
        out = evaluate_many(f.children[0], nus, space).copy()
        for c in f.children[1:]:
            out |= evaluate_many(c, nus, space)
        return out
    if isinstance(f, Implies):
        return ~evaluate_many(f.lhs, nus, space) | evaluate_many(f.rhs, nus, space)
    if isinstance(f, Iff):
        return evaluate_many(f.lhs, nus, space) == evaluate_many(f.rhs, nus, space)
    raise TypeError(f"not a formula: {f!r}")


@dataclass(frozen=True, eq=False)
class ModelSet:
    """Satisfying assignments of a formula, one row per model.

    Rows are sorted lexicographically as bit tuples (False < True, atom 0
    most significant).
    """

    space: ConceptSpace
    mode: str
    assignments: np.ndarray

    def __len__(self) -> int:
        return self.assignments.shape[0]

    def __iter__(self):
        return iter(self.assignments)

    def __contains__(self, nu) -> bool:
        nu = np.asarray(nu, dtype=bool)
        return bool(np.any(np.all(self.assignments == nu, axis=1)))

    def one_hot_tuples(self) -> list[tuple[int, ...]]:
        """Class tuples for models with exactly one true atom per group."""
        out = []
        for row in self.assignments:
            t = []
            for g in range(self.space.k):
                hot = np.flatnonzero(row[self.space.group_slice(g)])
                if len(hot) != 1:
                    raise ValueError("model is not one-hot in every group")
                t.append(int(hot[0]))
            out.append(tuple(t))
        return out


def all_assignments(space: ConceptSpace, mode: str) -> np.ndarray:
    """Every assignment of ``mode`` over ``space``, lexicographically sorted."""
    n = space.n_atoms
    if mode == FREE:
        if n > MAX_FREE_ATOMS:
            raise EnumerationLimitError(f"free enumeration over {n} atoms exceeds {MAX_FREE_ATOMS}")
        ints = np.arange(2**n, dtype=np.int64)
        shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
        return ((ints[:, None] >> shifts) & 1).astype(bool)
    if mode == ONE_HOT:
        total = int(np.prod(space.sizes, dtype=object))
        if total > MAX_ONE_HOT_MODELS:
            raise EnumerationLimitError(f"one-hot enumeration of {total} assignments exceeds {MAX_ONE_HOT_MODELS}")
        # class 0 in a group sets that group's first bit, which sorts last
        combos = itertools.product(*(range(h - 1, -1, -1) for h in space.sizes))
        out = np.zeros((total, n), dtype=bool)
        offs = space.offsets
        for r, combo in enumerate(combos):
            for g, c in enumerate(combo):
                out[r, offs[g] + c] = True
        return out
    raise ValueError(f"unknown enumeration mode {mode!r}")


def enumerate_models(f: Formula, space: ConceptSpace, mode: str = FREE, chunk: int = 1 << 16) -> ModelSet:
    """All assignments of the given mode that satisfy ``f``."""
    check_formula(f, space)
    candidates = all_assignments(space, mode)
    keep = np.zeros(candidates.shape[0], dtype=bool)
    for start in range(0, candidates.shape[0], chunk):
        keep[start:start + chunk] = evaluate_many(f, candidates[start:start + chunk], space)
    models = candidates[keep]
    models.setflags(write=False)
    return ModelSet(space, mode, models)


SUM_SPACE = ConceptSpace((10, 10))


def sum_knowledge(y: int, space: ConceptSpace = SUM_SPACE) -> Formula:
    """Knowledge ``y = g1 + g2`` as a disjunction of fully pinned one-hot pairs."""
    if space.sizes != (10, 10):
        raise ValueError("sum knowledge is defined on two groups of ten digits")
    if not 0 <= y <= 18:
        raise ValueError(f"sum label {y} outside 0..18")
    terms = []
    for a in range(10):
        b = y - a
        if not 0 <= b <= 9:
            continue
        lits = []
        for g, hot in ((0, a), (1, b)):
            for c in range(10):
                lits.append(Atom(g, c) if c == hot else Not(Atom(g, c)))
        terms.append(conj(*lits))
    return disj(*terms)
