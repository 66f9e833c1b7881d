"""ICD-10-CM knowledge graph built from the CMS tabular-list XML."""

import json
import logging
import re
import xml.etree.ElementTree as ET
from collections import Counter, defaultdict
from collections.abc import Iterable
from enum import Enum
from pathlib import Path
from typing import IO, Any, NamedTuple

from pydantic import BaseModel, Field

from .codes import CodeRange, extract_code_refs, normalize_code, strip_extension
from .errors import InvalidCodeError, TabularParseError, TabularStructureError

logger = logging.getLogger(__name__)

# Maximum is_ancestor hops from any code to its chapter range
MAX_DEPTH = 7


class EdgeKind(str, Enum):
    """Edge kinds; values are the predicate names used in auditor prompts."""

    DESCRIPTION = "description"
    INCLUSION_TERM = "inclusion_term"
    INCLUDES = "includes"
    EXCLUDES1 = "excludes1"
    USE_ADDITIONAL_CODE = "use_additional_code"
    CODE_FIRST = "code_first"
    IS_ANCESTOR = "ancestor"


PREDICATE_ALIASES = {
    "inclusion_terms": EdgeKind.INCLUSION_TERM,
    "is_ancestor": EdgeKind.IS_ANCESTOR,
}

NOTE_ELEMENTS = {
    "inclusionTerm": EdgeKind.INCLUSION_TERM,
    "includes": EdgeKind.INCLUDES,
    "excludes1": EdgeKind.EXCLUDES1,
    "useAdditionalCode": EdgeKind.USE_ADDITIONAL_CODE,
    "codeFirst": EdgeKind.CODE_FIRST,
}

# Synonym lists become one triplet with the notes joined by ", "
JOINED_KINDS = {EdgeKind.INCLUSION_TERM, EdgeKind.INCLUDES}

# Instruction kinds inherited by descendants at query time
INHERITED_KINDS = {EdgeKind.EXCLUDES1, EdgeKind.USE_ADDITIONAL_CODE, EdgeKind.CODE_FIRST}

STRUCTURAL_ELEMENTS = {"name", "desc", "diag", "section", "sectionIndex", "sectionRef"}

_TRAILING_RANGE = re.compile(r"\s*\(([A-Z][0-9][0-9A-Z](?:\.[0-9A-Z]+)?-[A-Z][0-9][0-9A-Z](?:\.[0-9A-Z]+)?)\)\s*$")
_WHITESPACE = re.compile(r"\s+")


def parse_predicate(name: str) -> EdgeKind:
    """Resolve a serialized predicate name to an EdgeKind."""
    name = name.strip()
    if name in PREDICATE_ALIASES:
        return PREDICATE_ALIASES[name]
    return EdgeKind(name)


class Triplet(NamedTuple):
    """A single (subject, kind, object) edge."""

    subject: str
    kind: EdgeKind
    object: str

    def sort_key(self) -> tuple[str, str, str]:
        return (self.subject, self.kind.value, self.object)

    def serialize(self) -> str:
        return f"[{self.subject}, {self.kind.value}, {self.object}]"


class CodeRecord(BaseModel):
    """A code node with its incident edges grouped by kind."""

    code: str
    description: str | None = None
    parent: str | None = None
    ancestors: list[str] = []
    children: list[str] = []
    edges: dict[str, list[str]] = {}
    placeholder_extension: bool = False


class Subgraph(BaseModel):
    """Closed subgraph around a set of seed codes."""

    seed_codes: list[str] = []
    nodes: list[str] = []
    edges: list[Triplet] = []
    absent: list[str] = []
    core: list[str] = Field(default=[], description="Seed codes plus their ancestors")

    @property
    def is_empty(self) -> bool:
        return not self.edges and not self.nodes


class Conflict(NamedTuple):
    """A pair of co-assigned codes joined by an exclusion note."""

    code: str
    other: str
    kind: EdgeKind


class CodeGraph:
    """
    Immutable ICD-10-CM knowledge graph G = (V, E).

    Nodes are codes, code ranges (sections and chapters) and note texts. Edges
    are typed triplets. Query methods are read-only and safe to share across
    concurrent readers.
    """

    def __init__(
        self,
        triplets: Iterable[Triplet],
        version: str = "unknown",
        extension_roots: Iterable[str] = (),
        skipped: dict[str, int] | None = None,
    ) -> None:
        edges = {t for t in triplets if t.subject != t.object}
        self.version = version
        self.extension_roots = frozenset(extension_roots)
        self.skipped = dict(sorted((skipped or {}).items()))
        self._edges: tuple[Triplet, ...] = tuple(sorted(edges, key=Triplet.sort_key))

        out: dict[str, list[Triplet]] = defaultdict(list)
        incoming: dict[str, list[Triplet]] = defaultdict(list)
        parent: dict[str, str] = {}
        nodes: set[str] = set()
        for t in self._edges:
            out[t.subject].append(t)
            incoming[t.object].append(t)
            nodes.add(t.subject)
            nodes.add(t.object)
            if t.kind is EdgeKind.IS_ANCESTOR:
                parent[t.subject] = t.object

        self._out = dict(out)
        self._in = dict(incoming)
        self._parent = parent
        self._nodes = frozenset(nodes)
        code_nodes = set(parent) | set(parent.values()) | self._chapters_without_children()
        self._code_nodes = frozenset(code_nodes)
        self._chapters = frozenset(code_nodes - set(parent))

    def _chapters_without_children(self) -> set[str]:
        # A chapter with no sections has only a description edge
        found = set()
        for subject, edges in self._out.items():
            if subject in self._parent or not any(e.kind is EdgeKind.DESCRIPTION for e in edges):
                continue
            try:
                CodeRange.parse(subject)
            except InvalidCodeError:
                continue
            found.add(subject)
        return found

    @property
    def nodes(self) -> frozenset[str]:
        return self._nodes

    @property
    def edges(self) -> tuple[Triplet, ...]:
        return self._edges

    @property
    def code_nodes(self) -> frozenset[str]:
        return self._code_nodes

    @property
    def chapters(self) -> frozenset[str]:
        return self._chapters

    def codes(self) -> list[str]:
        """All code nodes that are individual codes (not ranges), sorted."""
        return sorted(n for n in self._code_nodes if "-" not in n)

    def out_edges(self, node: str) -> list[Triplet]:
        return list(self._out.get(node, []))

    def in_edges(self, node: str) -> list[Triplet]:
        return list(self._in.get(node, []))

    def parent(self, node: str) -> str | None:
        return self._parent.get(node)

    def ancestors(self, node: str) -> list[str]:
        """Ancestors from nearest to the chapter range."""
        chain: list[str] = []
        seen = {node}
        current = self._parent.get(node)
        while current is not None and current not in seen and len(chain) < MAX_DEPTH + 1:
            chain.append(current)
            seen.add(current)
            current = self._parent.get(current)
        return chain

    def chapter_of(self, node: str) -> str | None:
        chain = self.ancestors(node)
        if chain:
            return chain[-1]
        return node if node in self.chapters else None

    def description(self, node: str) -> str | None:
        for t in self._out.get(node, []):
            if t.kind is EdgeKind.DESCRIPTION:
                return t.object
        return None

    def resolve(self, code: str) -> tuple[str, bool] | None:
        """
        Resolve a code to its graph node.

        Returns (node, placeholder_extension) or None if absent. Seven-character
        codes resolve to their base when the base carries an extension definition.

        Raises:
            InvalidCodeError: If the code is syntactically invalid
        """
        normalized = normalize_code(code)
        if normalized in self._code_nodes:
            return normalized, self._requires_extension(normalized)
        base = strip_extension(normalized)
        if base is not None and base in self._code_nodes and self._requires_extension(base):
            return base, True
        return None

    def _requires_extension(self, node: str) -> bool:
        return node in self.extension_roots or any(
            a in self.extension_roots for a in self.ancestors(node)
        )

    def inherited_notes(self, node: str, kind: EdgeKind) -> list[tuple[str, str]]:
        """Notes of a kind on a node and all its ancestors, as (source node, text)."""
        notes = []
        for source in [node, *self.ancestors(node)]:
            for t in self._out.get(source, []):
                if t.kind is kind:
                    notes.append((source, t.object))
        return notes

    def stats(self) -> dict[str, Any]:
        """JSON stats object: nodes, edges_by_kind, skipped_by_kind, version."""
        counts = Counter(t.kind.value for t in self._edges)
        return {
            "nodes": len(self._nodes),
            "edges_by_kind": {kind.value: counts.get(kind.value, 0) for kind in EdgeKind},
            "skipped_by_kind": dict(self.skipped),
            "version": self.version,
        }

    def check_invariants(self) -> list[str]:
        """Return a list of invariant violations (empty when the graph is sound)."""
        problems = []
        for node in sorted(self._code_nodes):
            if node in self.chapters:
                continue
            parents = [t for t in self._out.get(node, []) if t.kind is EdgeKind.IS_ANCESTOR]
            if len(parents) != 1:
                problems.append(f"{node}: {len(parents)} ancestor edges")
                continue
            chain = self.ancestors(node)
            if len(chain) > MAX_DEPTH or chain[-1] not in self.chapters:
                problems.append(f"{node}: ancestor chain does not reach a chapter")
        for t in self._edges:
            if t.subject == t.object:
                problems.append(f"self-loop on {t.subject}")
            if t.kind is EdgeKind.EXCLUDES1 and t.object not in self._nodes:
                problems.append(f"dangling excludes1 object on {t.subject}")
        return problems

    def dump(self, path: str | Path) -> None:
        """Write the graph as triplet text with header comments."""
        header = [
            f"# version: {self.version}",
            f"# seventh-character: {' '.join(sorted(self.extension_roots))}",
            f"# skipped: {json.dumps(self.skipped, sort_keys=True)}",
        ]
        body = "\n".join(t.serialize() for t in self._edges)
        Path(path).write_text("\n".join(header) + "\n" + body + "\n", encoding="utf-8")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CodeGraph):
            return NotImplemented
        return self._edges == other._edges and self.version == other.version

    def __hash__(self) -> int:
        return hash((self._edges, self.version))


def _normalize_text(text: str | None) -> str:
    return _WHITESPACE.sub(" ", text or "").strip()


def _byte_offset(data: bytes, line: int, column: int) -> int:
    """Byte offset of a parser position; expat counts columns in characters."""
    lines = data.split(b"\n")
    index = min(max(line - 1, 0), len(lines) - 1)
    prefix = lines[index].decode("utf-8", errors="surrogateescape")[:column]
    return sum(len(raw) + 1 for raw in lines[:index]) + len(prefix.encode("utf-8", errors="surrogateescape"))


class _TabularBuilder:
    """Walk chapter -> section -> diag nesting and collect triplets."""

    def __init__(self) -> None:
        self.triplets: set[Triplet] = set()
        self.skipped: Counter[str] = Counter()
        self.extension_roots: set[str] = set()

    def add(self, subject: str, kind: EdgeKind, obj: str) -> None:
        if obj and subject != obj:
            self.triplets.add(Triplet(subject, kind, obj))

    def add_notes(self, element: ET.Element, subject: str) -> None:
        for child in element:
            tag = child.tag
            if tag in NOTE_ELEMENTS:
                kind = NOTE_ELEMENTS[tag]
                notes = [_normalize_text(n.text) for n in child.findall("note")]
                notes = [n for n in notes if n]
                if kind in JOINED_KINDS:
                    self.add(subject, kind, ", ".join(notes))
                else:
                    for note in notes:
                        self.add(subject, kind, note)
            elif tag == "sevenChrDef":
                self.extension_roots.add(subject)
                self.skipped[tag] += 1
            elif tag not in STRUCTURAL_ELEMENTS:
                self.skipped[tag] += 1

    def chapter(self, element: ET.Element) -> None:
        number = _normalize_text(element.findtext("name"))
        desc = _normalize_text(element.findtext("desc"))
        sections = element.findall("section")
        match = _TRAILING_RANGE.search(desc)
        if match:
            node = match.group(1)
            desc = desc[: match.start()].strip()
        elif sections:
            node = f"{sections[0].get('id', '').split('-')[0]}-{sections[-1].get('id', '').split('-')[-1]}"
        else:
            node = f"Chapter {number}"
        self.add(node, EdgeKind.DESCRIPTION, desc or f"Chapter {number}")
        self.add_notes(element, node)
        label = number or node
        for section in sections:
            self.section(section, node, label)

    def section(self, element: ET.Element, chapter_node: str, chapter: str) -> None:
        node = (element.get("id") or "").strip()
        desc = _normalize_text(element.findtext("desc"))
        match = _TRAILING_RANGE.search(desc)
        if match:
            node = node or match.group(1)
            desc = desc[: match.start()].strip()
        if not node:
            raise TabularStructureError("section element without an id", chapter)
        self.add(node, EdgeKind.IS_ANCESTOR, chapter_node)
        self.add(node, EdgeKind.DESCRIPTION, desc)
        self.add_notes(element, node)
        for diag in element.findall("diag"):
            self.diag(diag, node, chapter)

    def diag(self, element: ET.Element, parent: str, chapter: str) -> None:
        name = _normalize_text(element.findtext("name"))
        desc = _normalize_text(element.findtext("desc"))
        if not name or not desc:
            raise TabularStructureError(
                f"diag element without a code or description (name={name!r})", chapter
            )
        try:
            code = normalize_code(name)
        except InvalidCodeError as exc:
            raise TabularStructureError(f"diag element with invalid code {name!r}", chapter) from exc
        self.add(code, EdgeKind.IS_ANCESTOR, parent)
        self.add(code, EdgeKind.DESCRIPTION, desc)
        self.add_notes(element, code)
        for child in element.findall("diag"):
            self.diag(child, code, chapter)


def parse_tabular_list(
    source: str | Path | bytes | IO[bytes],
    version: str | None = None,
) -> CodeGraph:
    """
    Parse a CMS ICD-10-CM tabular-list XML document into a CodeGraph.

    Args:
        source: File path, raw bytes, or a binary stream
        version: Vintage tag; defaults to the document's <version> element

    Raises:
        TabularParseError: Malformed XML, with the byte offset of the error
        TabularStructureError: A diag element without a code or description
    """
    if isinstance(source, bytes):
        data = source
    elif isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    else:
        data = source.read()

    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, column = exc.position
        raise TabularParseError(f"Malformed tabular-list XML: {exc}", _byte_offset(data, line, column)) from exc

    builder = _TabularBuilder()
    for chapter in root.findall("chapter"):
        builder.chapter(chapter)

    graph = CodeGraph(
        builder.triplets,
        version=version or _normalize_text(root.findtext("version")) or "unknown",
        extension_roots=builder.extension_roots,
        skipped=dict(builder.skipped),
    )
    stats = graph.stats()
    logger.info(
        "Parsed tabular list %s: %d nodes, edges %s, skipped %s",
        graph.version,
        stats["nodes"],
        stats["edges_by_kind"],
        stats["skipped_by_kind"],
    )
    return graph


def lookup(graph: CodeGraph, code: str) -> CodeRecord | None:
    """
    Look up a code node with its incident edges grouped by kind.

    Returns None when the code does not exist in this vintage.

    Raises:
        InvalidCodeError: If the code string is syntactically invalid
    """
    resolved = graph.resolve(code)
    if resolved is None:
        return None
    node, extension = resolved
    grouped: dict[str, list[str]] = defaultdict(list)
    for t in graph.out_edges(node):
        grouped[t.kind.value].append(t.object)
    children = [t.subject for t in graph.in_edges(node) if t.kind is EdgeKind.IS_ANCESTOR]
    return CodeRecord(
        code=normalize_code(code),
        description=graph.description(node),
        parent=graph.parent(node),
        ancestors=graph.ancestors(node),
        children=sorted(children),
        edges=dict(grouped),
        placeholder_extension=extension,
    )


def extract_subgraph(graph: CodeGraph, candidates: Iterable[str]) -> Subgraph:
    """
    Retrieve the closed subgraph for a set of candidate codes.

    The core is the candidates and all their ancestors. Every edge incident to a
    core node is included, and every endpoint of an included edge is a node.
    Ordering is lexicographic so serialization is byte-stable.

    Raises:
        InvalidCodeError: If a candidate is syntactically invalid
    """
    seeds = sorted({normalize_code(c) for c in candidates})
    core: set[str] = set()
    absent = []
    for seed in seeds:
        resolved = graph.resolve(seed)
        if resolved is None:
            absent.append(seed)
            continue
        node = resolved[0]
        core.add(node)
        core.update(graph.ancestors(node))

    if absent:
        logger.warning("Codes absent from graph %s: %s", graph.version, ", ".join(absent))

    edges: set[Triplet] = set()
    for node in core:
        edges.update(graph.out_edges(node))
        edges.update(graph.in_edges(node))
    nodes = set(core)
    for t in edges:
        nodes.add(t.subject)
        nodes.add(t.object)

    return Subgraph(
        seed_codes=seeds,
        nodes=sorted(nodes),
        edges=sorted(edges, key=Triplet.sort_key),
        absent=absent,
        core=sorted(core),
    )


def serialize_triplets(sub: Subgraph | Iterable[Triplet]) -> str:
    """Serialize edges as one "[subject, predicate, object]" line each."""
    edges = sub.edges if isinstance(sub, Subgraph) else sorted(sub, key=Triplet.sort_key)
    return "\n".join(t.serialize() for t in edges)


def parse_triplets(text: str) -> list[Triplet]:
    """
    Parse serialized triplet text back into edges.

    Blank lines and lines starting with '#' are ignored.

    Raises:
        ValueError: On a line that is not a triplet
    """
    triplets = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if not (line.startswith("[") and line.endswith("]")):
            raise ValueError(f"line {number}: not a triplet: {line!r}")
        parts = line[1:-1].split(", ", 2)
        if len(parts) != 3:
            raise ValueError(f"line {number}: expected 3 fields: {line!r}")
        subject, predicate, obj = parts
        triplets.append(Triplet(subject, parse_predicate(predicate), obj))
    return triplets


def conflicts(graph: CodeGraph, codes: Iterable[str]) -> list[Conflict]:
    """
    Find pairs of codes where one (or an ancestor) excludes1 the other.

    Each unordered pair is reported once; absent codes are skipped with a warning.
    """
    present = []
    for code in sorted({normalize_code(c) for c in codes}):
        if graph.resolve(code) is None:
            logger.warning("Skipping absent code %s in conflict check", code)
            continue
        present.append(code)

    refs = {}
    for code in present:
        node = graph.resolve(code)[0]  # type: ignore[index]
        refs[code] = [
            ref for _, text in graph.inherited_notes(node, EdgeKind.EXCLUDES1) for ref in extract_code_refs(text)
        ]

    found: list[Conflict] = []
    reported: set[frozenset[str]] = set()
    for code in present:
        for other in present:
            if other == code or frozenset((code, other)) in reported:
                continue
            if any(ref.contains(other) for ref in refs[code]):
                found.append(Conflict(code, other, EdgeKind.EXCLUDES1))
                reported.add(frozenset((code, other)))
    return found


def load_graph(path: str | Path, version: str | None = None) -> CodeGraph:
    """Load a graph from a tabular-list XML file or a triplet dump."""
    path = Path(path)
    if path.suffix.lower() == ".xml":
        return parse_tabular_list(path, version=version)

    text = path.read_text(encoding="utf-8")
    header: dict[str, str] = {}
    for line in text.splitlines():
        if not line.startswith("#"):
            continue
        key, _, value = line[1:].partition(":")
        header[key.strip()] = value.strip()
    return CodeGraph(
        parse_triplets(text),
        version=version or header.get("version", "unknown"),
        extension_roots=header.get("seventh-character", "").split(),
        skipped=json.loads(header.get("skipped") or "{}"),
    )
