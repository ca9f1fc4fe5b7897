"""Hierarchical code systems: parsing, semantic decomposition, truncation, vocabulary.

A hierarchy file holds one ``child<TAB>parent`` pair per line. The single
root's parent is written as ``*``. Lines starting with ``#`` and blank lines
are ignored.
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

ROOT_SENTINEL = "*"

PAD, MASK, UNK = 0, 1, 2
SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[UNK]")


class OntologyError(ValueError):
    pass


class CycleDetected(OntologyError):
    pass


class MultipleRoots(OntologyError):
    pass


class OrphanToken(OntologyError):
    pass


class DuplicateChildLine(OntologyError):
    pass


class UnknownCode(OntologyError, KeyError):
    pass


class EmptyVisit(OntologyError):
    pass


class SystemId(enum.IntEnum):
    # IntEnum order is the canonical system order in token sequences
    DIAGNOSIS = 0
    PRESCRIPTION = 1


class TokenMode(str, enum.Enum):
    DECOMPOSED = "DECOMPOSED"
    LEAF_ONLY = "LEAF_ONLY"


DEFAULT_DEPTHS = {SystemId.DIAGNOSIS: 3, SystemId.PRESCRIPTION: 4}


@dataclass(frozen=True)
class CodeSystem:
    id: SystemId
    root_token: str
    max_depth: int

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 (the root is always retained)")


@dataclass(frozen=True)
class SemanticPath:
    code: str
    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, eq=False)
class HierarchyTree:
    system: CodeSystem
    parent: Mapping[str, str]
    depth: Mapping[str, int] = field(repr=False)
    children: Mapping[str, tuple[str, ...]] = field(repr=False)

    @property
    def root(self) -> str:
        return self.system.root_token

    def __contains__(self, token: str) -> bool:
        return token in self.depth

    def __len__(self) -> int:
        return len(self.depth)

    def tokens(self) -> list[str]:
        return sorted(self.depth)

    def tokens_at_depth(self, d: int) -> list[str]:
        return sorted(t for t, k in self.depth.items() if k == d)

    def leaves(self) -> list[str]:
        return sorted(t for t in self.depth if not self.children.get(t))

    def descendants(self, token: str, include_self: bool = True) -> list[str]:
        if token not in self:
            raise UnknownCode(token)
        out, stack = [], [token]
        while stack:
            t = stack.pop()
            out.append(t)
            stack.extend(self.children.get(t, ()))
        if not include_self:
            out.remove(token)
        return sorted(out)

    def ancestor_at_depth(self, token: str, d: int) -> str:
        path = decompose(token, self).tokens
        if d > len(path):
            raise ValueError(f"{token} has no ancestor at depth {d}")
        return path[d - 1]


def _read_lines(source) -> list[str]:
    if isinstance(source, Path):
        return source.read_text(encoding="utf-8").splitlines()
    if isinstance(source, str):
        return source.splitlines()
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        return source.read().splitlines()
    return [line.rstrip("\n") for line in source]


def parse_hierarchy(source, system: SystemId = SystemId.DIAGNOSIS,
                    max_depth: int | None = None) -> HierarchyTree:
    """Parse ``child<TAB>parent`` lines (a path, a text blob, a stream or a line
    iterable) into a validated tree."""
    parent: dict[str, str] = {}
    for lineno, raw in enumerate(_read_lines(source), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) != 2 or not all(parts):
            raise OntologyError(f"line {lineno}: expected 'child<TAB>parent', got {raw!r}")
        child, par = parts
        if child in parent:
            raise DuplicateChildLine(f"line {lineno}: {child!r} already has a parent")
        parent[child] = par

    for child, par in parent.items():
        if par != ROOT_SENTINEL and par not in parent:
            raise OrphanToken(f"parent {par!r} of {child!r} is never defined")

    depth: dict[str, int] = {}
    for start in parent:
        chain, t = [], start
        while t not in depth and t != ROOT_SENTINEL:
            if t in chain:
                raise CycleDetected(" -> ".join(chain[chain.index(t):] + [t]))
            chain.append(t)
            t = parent[t]
        d = 0 if t == ROOT_SENTINEL else depth[t]
        for tok in reversed(chain):
            d += 1
            depth[tok] = d

    roots = sorted(c for c, p in parent.items() if p == ROOT_SENTINEL)
    if len(roots) != 1:
        raise MultipleRoots(f"expected exactly one root, found {roots}")

    children: dict[str, list[str]] = {}
    for child, par in parent.items():
        if par != ROOT_SENTINEL:
            children.setdefault(par, []).append(child)

    if max_depth is None:
        max_depth = DEFAULT_DEPTHS[SystemId(system)]
    return HierarchyTree(
        system=CodeSystem(SystemId(system), roots[0], max_depth),
        parent=MappingProxyType({c: p for c, p in parent.items() if p != ROOT_SENTINEL}),
        depth=MappingProxyType(depth),
        children=MappingProxyType({k: tuple(sorted(v)) for k, v in children.items()}),
    )


def decompose(code: str, tree: HierarchyTree) -> SemanticPath:
    if code not in tree:
        raise UnknownCode(code)
    chain = [code]
    while chain[-1] in tree.parent:
        chain.append(tree.parent[chain[-1]])
    return SemanticPath(code, tuple(reversed(chain)))


def truncate(path: SemanticPath, max_depth: int) -> SemanticPath:
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    return SemanticPath(path.code, path.tokens[:max_depth])


@dataclass(frozen=True, eq=False)
class Vocabulary:
    token_to_id: Mapping[str, int]
    id_to_token: tuple[str, ...]

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        ordered = tuple(SPECIAL_TOKENS) + tuple(tokens)
        if len(set(ordered)) != len(ordered):
            raise OntologyError("duplicate token in vocabulary")
        return cls(MappingProxyType({t: i for i, t in enumerate(ordered)}), ordered)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __getitem__(self, token: str) -> int:
        return self.token_to_id[token]

    def get(self, token: str, default: int = UNK) -> int:
        return self.token_to_id.get(token, default)

    def to_tsv(self) -> str:
        return "".join(f"{t}\t{i}\n" for i, t in enumerate(self.id_to_token))

    @classmethod
    def from_tsv(cls, text: str) -> "Vocabulary":
        rows = sorted((int(i), t) for t, i in (ln.split("\t") for ln in text.splitlines() if ln))
        if [i for i, _ in rows] != list(range(len(rows))) or tuple(t for _, t in rows[:3]) != SPECIAL_TOKENS:
            raise OntologyError("vocabulary file must list dense ids starting with the specials")
        return cls.from_tokens([t for _, t in rows[3:]])

    def digest(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()


def _depth_of(tree: HierarchyTree, depths: Mapping | None) -> int:
    if depths and tree.system.id in depths:
        return depths[tree.system.id]
    return tree.system.max_depth


def build_vocabulary(trees: Iterable[HierarchyTree], depths: Mapping | None = None) -> Vocabulary:
    """Specials, then every token within its system's retained depth; ordered
    by (system, token)."""
    trees = sorted(trees, key=lambda t: t.system.id)
    seen: dict[str, SystemId] = {}
    tokens: list[str] = []
    for tree in trees:
        limit = _depth_of(tree, depths)
        for tok in tree.tokens():
            if tree.depth[tok] > limit:
                continue
            if tok in seen:
                raise OntologyError(f"token {tok!r} appears in more than one code system")
            seen[tok] = tree.system.id
            tokens.append(tok)
    return Vocabulary.from_tokens(tokens)


def find_tree(code: str, trees: Iterable[HierarchyTree]) -> HierarchyTree | None:
    for tree in trees:
        if code in tree:
            return tree
    return None


def visit_token_set(codes: Sequence[str], trees: Sequence[HierarchyTree], depths: Mapping | None,
                    vocab: Vocabulary, mode: TokenMode | str = TokenMode.DECOMPOSED
                    ) -> tuple[list[int], list[tuple[int, int]]]:
    """Token ids for one visit plus its undirected edge list.

    Edges index into the returned sequence. Tree edges are ``(parent, child)``
    pairs; every token also gets a ``(i, i)`` self-loop. LEAF_ONLY returns no
    edges.
    """
    mode = TokenMode(mode)
    if not codes:
        raise EmptyVisit("a visit needs at least one code")
    keyed: set[tuple[int, str]] = set()
    pairs: set[tuple[str, str]] = set()
    unknown = False
    for code in codes:
        tree = find_tree(code, trees)
        if tree is None:
            unknown = True
            continue
        path = truncate(decompose(code, tree), _depth_of(tree, depths)).tokens
        sid = int(tree.system.id)
        if mode is TokenMode.LEAF_ONLY:
            keyed.add((sid, path[-1]))
        else:
            keyed.update((sid, t) for t in path)
            pairs.update(zip(path[:-1], path[1:]))

    ordered = [t for _, t in sorted(keyed)]
    ids = [vocab.get(t) for t in ordered]
    if unknown:
        ids.append(UNK)
    if mode is TokenMode.LEAF_ONLY:
        return ids, []

    pos = {t: i for i, t in enumerate(ordered)}
    edges = sorted((pos[p], pos[c]) for p, c in pairs)
    edges += [(i, i) for i in range(len(ids))]
    return ids, edges


def load_tree(path: str | Path, system: SystemId, max_depth: int | None = None) -> HierarchyTree:
    return parse_hierarchy(Path(path), system, max_depth)


def dump_tree(tree: HierarchyTree) -> str:
    lines = [f"{tree.root}\t{ROOT_SENTINEL}"]
    lines += [f"{c}\t{tree.parent[c]}" for c in sorted(tree.parent, key=lambda t: (tree.depth[t], t))]
    return "\n".join(lines) + "\n"
