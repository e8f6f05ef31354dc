"""Artifact bundle loading.

A bundle is one paper's worth of evidence: the LaTeX source, the solver
code, the bibliography, execution logs, an optional machine-readable claim
graph and a task manifest. Adapters map system-specific directory layouts
onto the canonical one; nothing absent is ever fabricated.

Canonical layout::

    bundle/
        paper.tex             mandatory
        paper_pdf.txt         optional, pre-extracted PDF text
        solution/             mandatory, at least one solver file
        references.bib        mandatory
        logs/                 optional, any text files
        claims.jsonl          optional claim graph
        search_metadata.json  optional node-label -> score map
        task.json             mandatory task manifest
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .errors import BundleLoadError

logger = logging.getLogger(__name__)

SOLVER_PLACEHOLDER = "{solver_path}"


@dataclass
class BibEntry:
    """One bibliography record, kept tolerant: raw text is never discarded."""

    key: str
    entry_type: str
    title: str = ""
    authors: list[str] = field(default_factory=list)
    year: Optional[int] = None
    venue: Optional[str] = None
    doi: Optional[str] = None
    arxiv_id: Optional[str] = None
    fields: dict[str, str] = field(default_factory=dict)
    raw: str = ""


@dataclass
class LogFile:
    """A log kept as dense 1-based lines; joining lines restores the bytes."""

    path: str
    text: str

    @property
    def lines(self) -> list[str]:
        return self.text.split("\n")

    def line(self, n: int) -> Optional[str]:
        """1-based line access; None when out of range."""
        if n < 1 or n > len(self.lines):
            return None
        return self.lines[n - 1]


@dataclass
class TaskSpec:
    """Task manifest: what was solved and how to re-score it."""

    task_id: str
    metric_name: str
    direction: str = "higher"
    score_reproducible: bool = True
    evaluator_command: str = ""
    timeout_s: float = 300.0
    evaluator_module: Optional[str] = None
    evaluator_aliases: list[str] = field(default_factory=list)
    evaluator_source: Optional[str] = None


@dataclass
class EvidenceLink:
    """One edge of the claim graph, pointing at a bundle artifact."""

    uri: str
    content_hash: Optional[str] = None
    extracted: Optional[str] = None

    def log_ref(self) -> Optional[tuple[str, int]]:
        """(path, 1-based line) when the URI is a log-line reference."""
        if self.uri.startswith(("cite:", "ablation:", "baseline:")):
            return None
        m = re.match(r"^(.+):(\d+)$", self.uri)
        if not m:
            return None
        return m.group(1), int(m.group(2))

    def cite_key(self) -> Optional[str]:
        if self.uri.startswith("cite:"):
            return self.uri[len("cite:"):]
        return None

    def node_key(self) -> Optional[str]:
        """Key into search metadata for ablation/baseline references."""
        for prefix in ("ablation:", "baseline:"):
            if self.uri.startswith(prefix):
                return self.uri[len(prefix):]
        return None


CLAIM_TYPES = ("numerical", "citation", "methodological", "conclusion")


@dataclass
class ClaimRecord:
    """One author-declared claim from claims.jsonl."""

    id: str
    claim_type: str
    section: str = ""
    sentence: str = ""
    value: Optional[float] = None
    unit: Optional[str] = None
    evidence: list[EvidenceLink] = field(default_factory=list)
    unsourced: bool = False
    malformed: bool = False
    parse_error: Optional[str] = None


@dataclass
class ArtifactBundle:
    """Everything the checks need about one paper, loaded once."""

    root: Path
    system: str
    seed: int
    task: TaskSpec
    paper_tex: str
    paper_pdf_text: Optional[str]
    solution: dict[str, str]
    bib: list[BibEntry]
    logs: list[LogFile]
    claims: Optional[list[ClaimRecord]]
    search_metadata: dict[str, float] = field(default_factory=dict)
    adapter: str = "canonical"

    @property
    def paper_id(self) -> str:
        return f"{self.system}:{self.task.task_id}:{self.seed}"

    def log(self, path: str) -> Optional[LogFile]:
        for lf in self.logs:
            if lf.path == path or Path(lf.path).name == path:
                return lf
        return None


# ---------------------------------------------------------------------------
# BibTeX parsing


_BIB_FIELD_RE = re.compile(r"^\s*([\w-]+)\s*=\s*", re.MULTILINE)


def _strip_braces(value: str) -> str:
    value = value.strip()
    while value.startswith("{") and value.endswith("}"):
        value = value[1:-1].strip()
    if value.startswith('"') and value.endswith('"'):
        value = value[1:-1].strip()
    value = re.sub(r"[{}]", "", value)
    return re.sub(r"\s+", " ", value)


def _split_fields(body: str) -> dict[str, str]:
    """Parse `name = value` pairs, honouring nested braces in values."""
    fields: dict[str, str] = {}
    pos = 0
    while True:
        m = _BIB_FIELD_RE.search(body, pos)
        if not m:
            break
        name = m.group(1).lower()
        i = m.end()
        depth = 0
        in_quote = False
        start = i
        while i < len(body):
            ch = body[i]
            if ch == '"' and depth == 0:
                in_quote = not in_quote
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
            elif ch == "," and depth == 0 and not in_quote:
                break
            i += 1
        fields[name] = body[start:i].strip()
        pos = i + 1
    return fields


_ARXIV_ID_RE = re.compile(r"(\d{4}\.\d{4,5})(v\d+)?")


def _entry_from_fields(key: str, entry_type: str, fields: dict[str, str],
                       raw: str) -> BibEntry:
    title = _strip_braces(fields.get("title", ""))
    authors = []
    if "author" in fields:
        cleaned = _strip_braces(fields["author"])
        authors = [a.strip() for a in re.split(r"\s+and\s+", cleaned) if a.strip()]
    year = None
    ym = re.search(r"\d{4}", fields.get("year", ""))
    if ym:
        year = int(ym.group())
    venue = None
    for vf in ("journal", "booktitle", "venue"):
        if fields.get(vf):
            venue = _strip_braces(fields[vf])
            break
    doi = _strip_braces(fields["doi"]) if fields.get("doi") else None
    arxiv_id = None
    eprint = _strip_braces(fields.get("eprint", ""))
    am = _ARXIV_ID_RE.search(eprint)
    if am:
        arxiv_id = am.group(1)
    else:
        for uf in ("url", "note", "howpublished"):
            um = re.search(r"arxiv\.org/abs/([0-9.v]+)", fields.get(uf, ""),
                           re.IGNORECASE)
            if um:
                am = _ARXIV_ID_RE.search(um.group(1))
                if am:
                    arxiv_id = am.group(1)
                break
    return BibEntry(key=key, entry_type=entry_type, title=title,
                    authors=authors, year=year, venue=venue, doi=doi,
                    arxiv_id=arxiv_id, fields=fields, raw=raw)


def parse_bib_with_warnings(text: str) -> tuple[list[BibEntry], list[str]]:
    """Tolerant BibTeX parse: bad records become raw-only entries plus a
    warning, duplicate keys get a suffix, nothing aborts."""
    entries: list[BibEntry] = []
    warnings: list[str] = []
    seen: dict[str, int] = {}
    pos = 0
    while True:
        at = text.find("@", pos)
        if at < 0:
            break
        m = re.match(r"@\s*([\w-]+)\s*\{", text[at:])
        if not m:
            pos = at + 1
            continue
        entry_type = m.group(1).lower()
        body_start = at + m.end()
        depth = 1
        i = body_start
        while i < len(text) and depth > 0:
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
            i += 1
        raw = text[at:i]
        if depth > 0:
            warnings.append(f"unterminated entry at offset {at}")
        pos = i
        if entry_type in ("comment", "string", "preamble"):
            continue
        body = text[body_start : i - 1] if depth == 0 else text[body_start:]
        km = re.match(r"\s*([^,\s{}]+)\s*,", body)
        if not km:
            key = f"unparsed-{len(entries) + 1}"
            warnings.append(f"entry at offset {at} has no key; kept raw only")
            entries.append(BibEntry(key=key, entry_type=entry_type, raw=raw))
            continue
        key = km.group(1)
        try:
            fields = _split_fields(body[km.end():])
            entry = _entry_from_fields(key, entry_type, fields, raw)
        except Exception as exc:  # defensive: parser must never abort
            warnings.append(f"could not parse entry '{key}': {exc}")
            entry = BibEntry(key=key, entry_type=entry_type, raw=raw)
        if key in seen:
            seen[key] += 1
            entry.key = f"{key}-dup{seen[key]}"
            warnings.append(f"duplicate key '{key}' kept as '{entry.key}'")
        else:
            seen[key] = 1
        entries.append(entry)
    for w in warnings:
        logger.warning("bib parse: %s", w)
    return entries, warnings


def parse_bib(text: str) -> list[BibEntry]:
    return parse_bib_with_warnings(text)[0]


# ---------------------------------------------------------------------------
# Claim graph parsing


def _parse_evidence_item(item: object) -> tuple[Optional[EvidenceLink], Optional[str]]:
    """Returns (link, error). A bare string is treated as a URI."""
    if isinstance(item, str):
        uri = item.strip()
    elif isinstance(item, dict):
        uri = str(item.get("uri") or item.get("source") or "").strip()
        if not uri:
            return None, "evidence item has no uri/source"
        link = EvidenceLink(
            uri=uri,
            content_hash=item.get("content_hash") or item.get("hash"),
            extracted=item.get("extracted"),
        )
        return _validate_link(link)
    else:
        return None, f"evidence item has unsupported type {type(item).__name__}"
    if not uri:
        return None, "empty evidence URI"
    return _validate_link(EvidenceLink(uri=uri))


def _validate_link(link: EvidenceLink) -> tuple[Optional[EvidenceLink], Optional[str]]:
    uri = link.uri
    if uri == "unsourced" or uri.startswith(("cite:", "ablation:", "baseline:")):
        return link, None
    if re.match(r"^(.+):(\d+)$", uri):
        return link, None
    if ":" in uri:
        # Looks like a log reference with a bad line part ("log.md:xx").
        return link, f"malformed evidence URI '{uri}'"
    return link, None


def parse_claims(text: str) -> list[ClaimRecord]:
    """Parse claims.jsonl. Malformed lines and evidence are retained and
    flagged, never silently discarded."""
    records: list[ClaimRecord] = []
    for idx, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("record is not an object")
        except (json.JSONDecodeError, ValueError) as exc:
            records.append(ClaimRecord(
                id=f"line-{idx}", claim_type="unknown", sentence=line.strip(),
                malformed=True, parse_error=f"line {idx}: {exc}"))
            continue
        rec = ClaimRecord(
            id=str(obj.get("id") or f"line-{idx}"),
            claim_type=str(obj.get("claim_type") or obj.get("type") or ""),
            section=str(obj.get("section") or ""),
            sentence=str(obj.get("sentence") or ""),
            unsourced=bool(obj.get("unsourced", False)),
            malformed=bool(obj.get("malformed", False)),
        )
        if rec.claim_type not in CLAIM_TYPES:
            rec.malformed = True
            rec.parse_error = f"line {idx}: unknown claim_type '{rec.claim_type}'"
        value = obj.get("value")
        try:
            if isinstance(value, dict):
                if value.get("number") is not None:
                    rec.value = float(value["number"])
                rec.unit = value.get("unit")
            elif isinstance(value, (list, tuple)) and value:
                rec.value = float(value[0])
                if len(value) > 1 and value[1] is not None:
                    rec.unit = str(value[1])
            elif isinstance(value, (int, float)):
                rec.value = float(value)
        except (TypeError, ValueError):
            rec.malformed = True
            rec.parse_error = f"line {idx}: unreadable value {value!r}"
        evidence = obj.get("evidence")
        if evidence is None:
            evidence = []
        elif not isinstance(evidence, list):
            evidence = [evidence]
        for item in evidence:
            link, err = _parse_evidence_item(item)
            if link is not None:
                if link.uri == "unsourced":
                    rec.unsourced = True
                else:
                    rec.evidence.append(link)
            if err:
                rec.malformed = True
                rec.parse_error = rec.parse_error or f"line {idx}: {err}"
        if not rec.evidence and not rec.unsourced and not rec.malformed:
            # No usable evidence edge at all: the claim is unsourced.
            rec.unsourced = True
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# Section extraction


_SECTION_RE = re.compile(r"\\section\*?\{([^{}]*)\}")


def extract_sections(tex: str) -> dict[str, str]:
    """Map section titles to body text, in document order.

    A paper with no \\section commands comes back as {"body": tex}.
    """
    matches = list(_SECTION_RE.finditer(tex))
    if not matches:
        return {"body": tex}
    sections: dict[str, str] = {}
    for i, m in enumerate(matches):
        title = m.group(1).strip() or f"section-{i + 1}"
        start = m.end()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(tex)
        body = tex[start:end]
        stop = body.find("\\end{document}")
        if stop >= 0:
            body = body[:stop]
        name = title
        n = 2
        while name in sections:
            name = f"{title} ({n})"
            n += 1
        sections[name] = body.strip()
    return sections


_METHOD_KEYWORDS = ("method", "approach", "algorithm")
_NON_METHOD_KEYWORDS = ("intro", "related")


def method_section(sections: dict[str, str]) -> Optional[tuple[str, str]]:
    """The section describing the method: first title containing a method
    keyword, else the longest non-intro/non-related section."""
    for name, body in sections.items():
        low = name.lower()
        if any(k in low for k in _METHOD_KEYWORDS):
            return name, body
    best: Optional[tuple[str, str]] = None
    for name, body in sections.items():
        low = name.lower()
        if any(k in low for k in _NON_METHOD_KEYWORDS):
            continue
        if best is None or len(body) > len(best[1]):
            best = (name, body)
    return best


# ---------------------------------------------------------------------------
# Adapters and loading


AdapterFn = Callable[[Path], dict[str, Optional[Path]]]

_ADAPTERS: dict[str, AdapterFn] = {}


def register_adapter(name: str) -> Callable[[AdapterFn], AdapterFn]:
    def deco(fn: AdapterFn) -> AdapterFn:
        _ADAPTERS[name] = fn
        return fn
    return deco


def adapter_names() -> list[str]:
    return sorted(_ADAPTERS)


@register_adapter("canonical")
def _canonical_adapter(root: Path) -> dict[str, Optional[Path]]:
    def opt(p: Path) -> Optional[Path]:
        return p if p.exists() else None

    return {
        "paper_tex": root / "paper.tex",
        "paper_pdf_text": opt(root / "paper_pdf.txt"),
        "solution_dir": root / "solution",
        "references": root / "references.bib",
        "logs_dir": opt(root / "logs"),
        "claims": opt(root / "claims.jsonl"),
        "search_metadata": opt(root / "search_metadata.json"),
        "task": root / "task.json",
    }


@register_adapter("flat")
def _flat_adapter(root: Path) -> dict[str, Optional[Path]]:
    """Everything in one directory; solver files are the root *.py files."""

    def opt(p: Path) -> Optional[Path]:
        return p if p.exists() else None

    return {
        "paper_tex": root / "paper.tex",
        "paper_pdf_text": opt(root / "paper_pdf.txt"),
        "solution_dir": root,
        "references": root / "references.bib",
        "logs_dir": opt(root / "logs"),
        "claims": opt(root / "claims.jsonl"),
        "search_metadata": opt(root / "search_metadata.json"),
        "task": root / "task.json",
    }


def _read_text(path: Path) -> str:
    return path.read_text(encoding="utf-8", errors="replace")


def _load_task(path: Path) -> tuple[TaskSpec, str, int]:
    try:
        obj = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise BundleLoadError(f"task manifest {path} is not valid JSON: {exc}")
    for required in ("task_id", "metric_name"):
        if required not in obj:
            raise BundleLoadError(f"task manifest missing '{required}'")
    direction = str(obj.get("direction", "higher")).lower()
    if direction in ("maximize", "max", "higher-better"):
        direction = "higher"
    if direction in ("minimize", "min", "lower-better"):
        direction = "lower"
    if direction not in ("higher", "lower"):
        raise BundleLoadError(f"task manifest direction '{direction}' unknown")
    command = str(obj.get("evaluator_command", ""))
    if obj.get("score_reproducible", True):
        if command.count(SOLVER_PLACEHOLDER) != 1:
            raise BundleLoadError(
                "evaluator_command must contain exactly one "
                f"{SOLVER_PLACEHOLDER} placeholder")
    task = TaskSpec(
        task_id=str(obj["task_id"]),
        metric_name=str(obj["metric_name"]),
        direction=direction,
        score_reproducible=bool(obj.get("score_reproducible", True)),
        evaluator_command=command,
        timeout_s=float(obj.get("timeout_s", 300.0)),
        evaluator_module=obj.get("evaluator_module"),
        evaluator_aliases=[str(a) for a in obj.get("evaluator_aliases", [])],
        evaluator_source=obj.get("evaluator_source"),
    )
    return task, str(obj.get("system", "unknown")), int(obj.get("seed", 0))


def load_bundle(root: Path | str, adapter: str = "canonical") -> ArtifactBundle:
    """Load a bundle directory through the named adapter.

    Raises BundleLoadError naming the missing part when a mandatory piece
    (paper source, solver file, bibliography, task manifest) is absent.
    """
    root = Path(root)
    if adapter not in _ADAPTERS:
        raise BundleLoadError(
            f"unknown adapter '{adapter}' (have: {', '.join(adapter_names())})")
    if not root.is_dir():
        raise BundleLoadError(f"bundle root {root} is not a directory")
    layout = _ADAPTERS[adapter](root)

    tex_path = layout["paper_tex"]
    if tex_path is None or not tex_path.is_file():
        raise BundleLoadError(f"missing paper source at {tex_path}")
    ref_path = layout["references"]
    if ref_path is None or not ref_path.is_file():
        raise BundleLoadError(f"missing bibliography at {ref_path}")
    task_path = layout["task"]
    if task_path is None or not task_path.is_file():
        raise BundleLoadError(f"missing task manifest at {task_path}")

    sol_dir = layout["solution_dir"]
    solution: dict[str, str] = {}
    if sol_dir is not None and sol_dir.is_dir():
        for p in sorted(sol_dir.rglob("*")):
            if not p.is_file():
                continue
            if adapter == "flat" and p.suffix != ".py":
                continue
            solution[str(p.relative_to(sol_dir))] = _read_text(p)
    if not solution:
        raise BundleLoadError(f"no solver files under {sol_dir}")

    task, system, seed = _load_task(task_path)

    logs: list[LogFile] = []
    logs_dir = layout["logs_dir"]
    if logs_dir is not None and logs_dir.is_dir():
        for p in sorted(logs_dir.rglob("*")):
            if p.is_file():
                logs.append(LogFile(str(p.relative_to(logs_dir)), _read_text(p)))

    claims = None
    if layout["claims"] is not None:
        claims = parse_claims(_read_text(layout["claims"]))

    search_metadata: dict[str, float] = {}
    if layout["search_metadata"] is not None:
        try:
            meta = json.loads(_read_text(layout["search_metadata"]))
            if isinstance(meta, dict):
                for k, v in meta.items():
                    try:
                        search_metadata[str(k)] = float(v)
                    except (TypeError, ValueError):
                        continue
        except json.JSONDecodeError:
            logger.warning("search metadata at %s unreadable; ignored",
                           layout["search_metadata"])

    pdf_text = None
    if layout["paper_pdf_text"] is not None:
        pdf_text = _read_text(layout["paper_pdf_text"])

    return ArtifactBundle(
        root=root, system=system, seed=seed, task=task,
        paper_tex=_read_text(tex_path), paper_pdf_text=pdf_text,
        solution=solution, bib=parse_bib(_read_text(ref_path)),
        logs=logs, claims=claims, search_metadata=search_metadata,
        adapter=adapter,
    )
