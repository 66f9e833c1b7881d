"""Coding-guideline store: table of contents, code routing and summaries."""

import bisect
import json
import logging
import re
from collections import defaultdict
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, field_validator

from .codes import CodeRange, category, normalize_code
from .errors import BackendError, GuidelineTocError, InvalidCodeError, SummaryError
from .gateway import LLMGateway, SummaryContract, UsageLedger
from .prompts import summariser_messages
from .summary_cache import SummaryCache

logger = logging.getLogger(__name__)

DEFAULT_GENERAL_SECTIONS = ("I.A", "I.B")

# Rough size of a printed guidelines page
CHARS_PER_PAGE = 3000

CHAPTER_RANGES: dict[int, tuple[str, str]] = {
    1: ("A00", "B99"),
    2: ("C00", "D49"),
    3: ("D50", "D89"),
    4: ("E00", "E89"),
    5: ("F01", "F99"),
    6: ("G00", "G99"),
    7: ("H00", "H59"),
    8: ("H60", "H95"),
    9: ("I00", "I99"),
    10: ("J00", "J99"),
    11: ("K00", "K95"),
    12: ("L00", "L99"),
    13: ("M00", "M99"),
    14: ("N00", "N99"),
    15: ("O00", "O9A"),
    16: ("P00", "P96"),
    17: ("Q00", "Q99"),
    18: ("R00", "R99"),
    19: ("S00", "T88"),
    20: ("V00", "Y99"),
    21: ("Z00", "Z99"),
    22: ("U00", "U85"),
}

_TOC_HEADER = re.compile(r"table\s+of\s+contents", re.IGNORECASE)
_LABEL = (
    r"(?:Section\s+(?P<roman>[IVX]+)\.|(?P<upper>[A-Z])\.|(?P<num>\d{1,2})\.|"
    r"(?P<lower>[a-z])\.|(?P<paren>\d{1,2})\))"
)
_TOC_LINE = re.compile(rf"^\s*{_LABEL}\s+(?P<title>.+?)\s*(?:\.\s*){{2,}}(?P<page>\d+)\s*$")
_HEADING = re.compile(rf"^\s*{_LABEL}\s+(?P<rest>.+?)\s*$")
_TITLE_RANGE = re.compile(r"\(([A-Z][0-9][0-9A-Z])\s*-\s*([A-Z][0-9][0-9A-Z])\)")
_CODE_MENTION = re.compile(r"(?<![A-Za-z0-9.])([A-Z][0-9][0-9A-Z](?:\.[0-9A-Z]{1,4})?)(?![A-Za-z0-9])")
_LEVELS = ("roman", "upper", "num", "lower", "paren")

# Non-ToC lines tolerated inside the ToC block (wrapped titles)
_TOC_GAP = 2


class TocEntry(BaseModel):
    """One table-of-contents entry with its byte span in the source document."""

    section_id: str
    title: str
    level: int
    code_range: tuple[str, str] | None = None
    start: int | None = None
    end: int | None = None
    degraded: bool = False

    @property
    def is_chapter_specific(self) -> bool:
        return self.section_id.startswith("I.C.")

    def contains_code(self, code: str) -> bool:
        if self.code_range is None:
            return False
        return CodeRange(*self.code_range).contains(code)


class GuidelineSection(BaseModel):
    """Narrative text of one ToC entry."""

    section_id: str
    title: str = ""
    text: str
    page_estimate: int


class GuidelineSummary(BaseModel):
    """Bullet-point distillation of the guideline rules applicable to one code."""

    code: str
    status: Literal["found", "not_found"]
    bullets: list[str] = []
    source_sections: list[str] = []
    version: str
    backend_fingerprint: str

    @field_validator("bullets")
    @classmethod
    def strip_bullets(cls, v: list[str]) -> list[str]:
        return [b.strip() for b in v if b and b.strip()]

    @property
    def found(self) -> bool:
        return self.status == "found"


def _normalize_title(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip().lower().rstrip(".:")


def _label_parts(match: re.Match[str]) -> tuple[int, str]:
    for level, group in enumerate(_LEVELS):
        value = match.group(group)
        if value is not None:
            return level, value
    raise ValueError("no label group matched")


def _resolve_range(section_id: str, title: str, parent: TocEntry | None) -> tuple[str, str] | None:
    if not section_id.startswith("I.C."):
        return None
    match = _TITLE_RANGE.search(title)
    if match:
        return (match.group(1), match.group(2))
    if parent is not None and parent.code_range is not None:
        return parent.code_range
    parts = section_id.split(".")
    if len(parts) >= 3 and parts[2].isdigit():
        return CHAPTER_RANGES.get(int(parts[2]))
    return None


def _split_lines(data: bytes) -> tuple[list[str], list[int]]:
    """Decode lines and return them with their starting byte offsets."""
    lines, offsets = [], []
    position = 0
    for raw in data.splitlines(keepends=True):
        offsets.append(position)
        lines.append(raw.decode("utf-8", errors="replace").rstrip("\r\n"))
        position += len(raw)
    return lines, offsets


def _parse_toc_block(lines: list[str]) -> tuple[list[tuple[int, str, str]], int]:
    """
    Parse ToC lines following the "Table of Contents" header.

    Returns (entries as (level, label, title), index of the first body line).
    """
    header = next((i for i, line in enumerate(lines) if _TOC_HEADER.search(line)), None)
    if header is None:
        return [], 0

    entries: list[tuple[int, str, str]] = []
    last_toc_line = header
    gap = 0
    for index in range(header + 1, len(lines)):
        line = lines[index]
        match = _TOC_LINE.match(line)
        if match:
            level, label = _label_parts(match)
            entries.append((level, label, match.group("title").strip()))
            last_toc_line = index
            gap = 0
        elif line.strip():
            gap += 1
            if entries and gap > _TOC_GAP:
                break
    return entries, last_toc_line + 1


def _assign_ids(raw: list[tuple[int, str, str]]) -> list[TocEntry]:
    entries: list[TocEntry] = []
    stack: list[tuple[int, TocEntry]] = []
    for level, label, title in raw:
        while stack and stack[-1][0] >= level:
            stack.pop()
        parent = stack[-1][1] if stack else None
        section_id = label if parent is None else f"{parent.section_id}.{label}"
        entry = TocEntry(
            section_id=section_id,
            title=title,
            level=section_id.count("."),
            code_range=_resolve_range(section_id, title, parent),
        )
        entries.append(entry)
        stack.append((level, entry))
    return entries


def _locate_headings(entries: list[TocEntry], lines: list[str], offsets: list[int], body_start: int) -> None:
    cursor = body_start
    for entry in entries:
        label = entry.section_id.rsplit(".", 1)[-1]
        wanted = _normalize_title(entry.title)
        found = None
        for index in range(cursor, len(lines)):
            match = _HEADING.match(lines[index])
            if not match or _label_parts(match)[1] != label:
                continue
            rest = _normalize_title(match.group("rest"))
            n = min(len(rest), len(wanted), 40)
            if n >= min(len(wanted), 8) and rest[:n] == wanted[:n]:
                found = index
                break
        if found is None:
            entry.degraded = True
            logger.warning("Guideline heading not found for %s (%s)", entry.section_id, entry.title)
            continue
        entry.start = offsets[found]
        cursor = found + 1


def _assign_ends(entries: list[TocEntry], total: int) -> None:
    located = sorted((e for e in entries if e.start is not None), key=lambda e: e.start or 0)
    for position, entry in enumerate(located):
        entry.end = total
        for later in located[position + 1 :]:
            if later.level <= entry.level:
                entry.end = later.start
                break
        if entry.end == entry.start:
            entry.degraded = True


def build_toc(source: str | Path | bytes, sidecar: str | Path | Sequence[dict[str, Any]] | None = None) -> list[TocEntry]:
    """
    Build the table of contents of a plain-text guidelines document.

    Args:
        source: Guidelines text (path or bytes)
        sidecar: Optional sidecar ToC, a JSON list of {section_id, title, code_range, line}

    Raises:
        GuidelineTocError: If the document has no parseable table of contents
    """
    data = source if isinstance(source, bytes) else Path(source).read_bytes()
    lines, offsets = _split_lines(data)

    if sidecar is not None:
        return _toc_from_sidecar(sidecar, offsets, len(data))

    raw, body_start = _parse_toc_block(lines)
    if not raw:
        raise GuidelineTocError(
            "No table of contents found in the guidelines text. "
            "Supply a sidecar ToC file (--toc) listing section_id, title, code_range and line."
        )
    entries = _assign_ids(raw)
    seen: set[str] = set()
    for entry in entries:
        if entry.section_id in seen:
            raise GuidelineTocError(
                f"Duplicate section id {entry.section_id} in table of contents; supply a sidecar ToC file (--toc)."
            )
        seen.add(entry.section_id)

    _locate_headings(entries, lines, offsets, body_start)
    _assign_ends(entries, len(data))
    degraded = sum(e.degraded for e in entries)
    logger.info("Built guideline ToC: %d entries, %d degraded", len(entries), degraded)
    return entries


def _toc_from_sidecar(
    sidecar: str | Path | Sequence[dict[str, Any]],
    offsets: list[int],
    total: int,
) -> list[TocEntry]:
    if isinstance(sidecar, (str, Path)):
        records = json.loads(Path(sidecar).read_text(encoding="utf-8"))
    else:
        records = list(sidecar)

    entries: list[TocEntry] = []
    by_id: dict[str, TocEntry] = {}
    for record in records:
        section_id = record["section_id"]
        if section_id in by_id:
            raise GuidelineTocError(f"Duplicate section id {section_id} in sidecar ToC")
        parent = by_id.get(section_id.rsplit(".", 1)[0]) if "." in section_id else None
        code_range = record.get("code_range")
        if isinstance(code_range, str):
            parsed = CodeRange.parse(code_range)
            code_range = (parsed.start, parsed.end)
        elif code_range is not None:
            code_range = (code_range[0], code_range[1])
        title = record.get("title", "")
        entry = TocEntry(
            section_id=section_id,
            title=title,
            level=section_id.count("."),
            code_range=tuple(code_range) if code_range else _resolve_range(section_id, title, parent),  # type: ignore[arg-type]
        )
        line = record.get("line")
        if isinstance(line, int) and 1 <= line <= len(offsets):
            entry.start = offsets[line - 1]
        else:
            entry.degraded = True
        entries.append(entry)
        by_id[section_id] = entry
    _assign_ends(entries, total)
    return entries


def sections_for_code(
    toc: Sequence[TocEntry],
    code: str,
    general_sections: Sequence[str] = DEFAULT_GENERAL_SECTIONS,
) -> list[str]:
    """
    Section ids applicable to a code: general sections first, then its chapter section.

    Raises:
        InvalidCodeError: If the code is syntactically invalid
    """
    code = normalize_code(code)
    known = {e.section_id for e in toc}
    result = [s for s in general_sections if s in known]
    chapters = [e for e in toc if e.is_chapter_specific and e.level == 2 and e.contains_code(code)]
    if chapters:
        result.append(chapters[0].section_id)
    else:
        logger.info("Code %s (category %s) is outside every chapter range", code, category(code))
    return result


def _chunk_sections(sections: Sequence[GuidelineSection], max_chars: int) -> list[list[GuidelineSection]]:
    """Group sections into chunks of at most max_chars, splitting oversized sections."""
    pieces: list[GuidelineSection] = []
    for section in sections:
        if len(section.text) <= max_chars:
            pieces.append(section)
            continue
        for part, offset in enumerate(range(0, len(section.text), max_chars), start=1):
            text = section.text[offset : offset + max_chars]
            pieces.append(
                GuidelineSection(
                    section_id=section.section_id,
                    title=f"{section.title} (part {part})",
                    text=text,
                    page_estimate=max(1, len(text) // CHARS_PER_PAGE),
                )
            )

    chunks: list[list[GuidelineSection]] = []
    current: list[GuidelineSection] = []
    size = 0
    for piece in pieces:
        if current and size + len(piece.text) > max_chars:
            chunks.append(current)
            current, size = [], 0
        current.append(piece)
        size += len(piece.text)
    if current:
        chunks.append(current)
    return chunks


async def summarise_for_code(
    code: str,
    sections: Sequence[GuidelineSection],
    gateway: LLMGateway,
    *,
    version: str,
    description: str | None = None,
    cache: SummaryCache | None = None,
    max_chars: int = 60_000,
    ledger: UsageLedger | None = None,
) -> GuidelineSummary:
    """
    Distil the rules applicable to one code from its guideline sections.

    Oversized section sets are summarised in deterministic chunks and the
    bullets merged in order. The result is written to the cache before returning.

    Raises:
        SummaryError: Backend failure after retries, carrying the sections
            that were summarised before the failure
    """
    code = normalize_code(code)
    fingerprint = gateway.fingerprint
    if cache is not None:
        cached = cache.get(code, version, fingerprint)
        if cached is not None:
            return cached

    bullets: list[str] = []
    summarised: list[str] = []
    source_ids = list(dict.fromkeys(s.section_id for s in sections))
    for chunk in _chunk_sections(sections, max_chars):
        messages = summariser_messages(code, description, chunk)
        try:
            reply = await gateway.complete(messages, SummaryContract(), step="3", ledger=ledger)
        except BackendError as exc:
            raise SummaryError(f"Summarising {code} failed: {exc}", code, summarised) from exc
        for bullet in reply.bullets if reply.found else []:
            if bullet not in bullets:
                bullets.append(bullet)
        summarised.extend(s.section_id for s in chunk if s.section_id not in summarised)

    summary = GuidelineSummary(
        code=code,
        status="found" if bullets else "not_found",
        bullets=bullets,
        source_sections=source_ids,
        version=version,
        backend_fingerprint=fingerprint,
    )
    if cache is not None:
        cache.put(summary)
    return summary


class GuidelineStore:
    """
    Immutable view over one guidelines vintage: text, ToC and a mention index.

    The summary cache is the only mutable state and tolerates concurrent writers.
    """

    def __init__(
        self,
        text: bytes,
        toc: list[TocEntry],
        version: str,
        general_sections: Sequence[str] = DEFAULT_GENERAL_SECTIONS,
        cache: SummaryCache | None = None,
        max_chars: int = 60_000,
    ) -> None:
        self.text = text
        self.toc = toc
        self.version = version
        self.general_sections = tuple(general_sections)
        self.cache = cache
        self.max_chars = max_chars
        self._by_id = {e.section_id: e for e in toc}
        self._mentions = self._build_mention_index()

    @classmethod
    def from_files(
        cls,
        guidelines: str | Path,
        version: str,
        toc_file: str | Path | None = None,
        **kwargs: Any,
    ) -> "GuidelineStore":
        data = Path(guidelines).read_bytes()
        return cls(data, build_toc(data, sidecar=toc_file), version, **kwargs)

    def _build_mention_index(self) -> dict[str, list[str]]:
        """Map verbatim code mentions to the deepest chapter-specific entry containing them."""
        located = sorted(
            (e for e in self.toc if e.start is not None and e.end is not None and e.is_chapter_specific),
            key=lambda e: (e.start, -e.level),
        )
        starts = [e.start for e in located]
        index: dict[str, list[str]] = defaultdict(list)
        if not located:
            return {}
        body = self.text.decode("utf-8", errors="replace")
        # Mentions are found on decoded text; map char positions back to bytes per line
        byte_pos = 0
        for line in body.splitlines(keepends=True):
            for match in _CODE_MENTION.finditer(line):
                position = byte_pos + len(line[: match.start()].encode("utf-8"))
                entry = self._deepest_at(located, starts, position)
                if entry is None:
                    continue
                try:
                    code = normalize_code(match.group(1))
                except InvalidCodeError:
                    continue
                if entry.section_id not in index[code]:
                    index[code].append(entry.section_id)
            byte_pos += len(line.encode("utf-8"))
        return dict(index)

    @staticmethod
    def _deepest_at(located: list[TocEntry], starts: list[int | None], position: int) -> TocEntry | None:
        best = None
        upper = bisect.bisect_right(starts, position)  # type: ignore[arg-type]
        for entry in located[:upper]:
            if entry.start is not None and entry.end is not None and entry.start <= position < entry.end:
                if best is None or entry.level > best.level:
                    best = entry
        return best

    def entry(self, section_id: str) -> TocEntry | None:
        return self._by_id.get(section_id)

    def section(self, section_id: str) -> GuidelineSection | None:
        entry = self._by_id.get(section_id)
        if entry is None or entry.start is None or entry.end is None:
            return None
        text = self.text[entry.start : entry.end].decode("utf-8", errors="replace")
        return GuidelineSection(
            section_id=section_id,
            title=entry.title,
            text=text,
            page_estimate=max(1, -(-len(text) // CHARS_PER_PAGE)),
        )

    def sections_for_code(self, code: str) -> list[str]:
        return sections_for_code(self.toc, code, self.general_sections)

    def related_sections(self, code: str) -> list[str]:
        """Chapter-specific sections in other chapters that mention the code verbatim."""
        code = normalize_code(code)
        related = []
        for section_id in self._mentions.get(code, []):
            chapter_id = ".".join(section_id.split(".")[:3])
            chapter = self._by_id.get(chapter_id)
            if chapter is not None and chapter.contains_code(code):
                continue
            related.append(section_id)
        return related

    def gather_sections(self, code: str) -> list[GuidelineSection]:
        """Routed sections plus related-range expansion, deduplicated, in order."""
        ids = list(dict.fromkeys([*self.sections_for_code(code), *self.related_sections(code)]))
        sections = []
        for section_id in ids:
            section = self.section(section_id)
            if section is not None and section.text.strip():
                sections.append(section)
        return sections

    async def summarise(
        self,
        code: str,
        gateway: LLMGateway,
        description: str | None = None,
        ledger: UsageLedger | None = None,
    ) -> GuidelineSummary:
        """Cache-first summary for a code over its gathered sections."""
        code = normalize_code(code)
        if self.cache is not None:
            cached = self.cache.get(code, self.version, gateway.fingerprint)
            if cached is not None:
                return cached
        sections = self.gather_sections(code)
        if not sections:
            summary = GuidelineSummary(
                code=code,
                status="not_found",
                version=self.version,
                backend_fingerprint=gateway.fingerprint,
            )
            if self.cache is not None:
                self.cache.put(summary)
            return summary
        return await summarise_for_code(
            code,
            sections,
            gateway,
            version=self.version,
            description=description,
            cache=self.cache,
            max_chars=self.max_chars,
            ledger=ledger,
        )

    def listing(self) -> list[dict[str, Any]]:
        """ToC listing for display."""
        return [
            {
                "section_id": e.section_id,
                "title": e.title,
                "code_range": f"{e.code_range[0]}-{e.code_range[1]}" if e.code_range else None,
                "degraded": e.degraded,
            }
            for e in self.toc
        ]

    def save(self, directory: str | Path) -> None:
        """Persist the store: source text, ToC and metadata. The cache lives in directory/cache."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "guidelines.txt").write_bytes(self.text)
        (directory / "toc.json").write_text(
            json.dumps([e.model_dump() for e in self.toc], indent=2), encoding="utf-8"
        )
        meta = {"version": self.version, "general_sections": list(self.general_sections)}
        (directory / "store.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")

    @classmethod
    def load(
        cls,
        directory: str | Path,
        cache_dir: str | Path | None = None,
        general_sections: Sequence[str] | None = None,
        max_chars: int = 60_000,
    ) -> "GuidelineStore":
        directory = Path(directory)
        meta = json.loads((directory / "store.json").read_text(encoding="utf-8"))
        toc = [TocEntry(**e) for e in json.loads((directory / "toc.json").read_text(encoding="utf-8"))]
        return cls(
            (directory / "guidelines.txt").read_bytes(),
            toc,
            meta["version"],
            general_sections=general_sections or meta.get("general_sections", DEFAULT_GENERAL_SECTIONS),
            cache=SummaryCache(cache_dir or directory / "cache"),
            max_chars=max_chars,
        )

    def export_summaries(self, path: str | Path) -> int:
        """Write all cached summaries as JSONL; returns the number written."""
        if self.cache is None:
            return 0
        return self.cache.export(path)

