"""Aggregation of per-paper audits into per-system summaries.

The four headline columns per system: reported scores verified (of
non-skipped papers), specification violations flagged, hallucinated
references (per entry occurrence, unresolved entries excluded from both
sides), and method-code aligned papers. The structured rendering is
schema-versioned and round-trips losslessly; the tabular rendering
mirrors the same four fractions for reading.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

from . import __version__
from .claim_verifier import CprSummary
from .errors import ReportError
from .forensic_cpr import ForensicResult
from .method_alignment import I4Verdict
from .scholarly import ResolutionRecord
from .score_verify import I1Verdict
from .spec_violation import I2Verdict

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class PaperAudit:
    """Everything the audit concluded about one paper."""

    paper_id: str
    system: str
    seed: int
    task_id: str
    i1: Optional[I1Verdict] = None
    i2: Optional[I2Verdict] = None
    i3: Optional[list[ResolutionRecord]] = None
    i4: Optional[I4Verdict] = None
    cpr_native: Optional[CprSummary] = None
    cpr_forensic: Optional[ForensicResult] = None
    check_errors: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "paper_id": self.paper_id, "system": self.system,
            "seed": self.seed, "task_id": self.task_id,
            "i1": self.i1.to_dict() if self.i1 else None,
            "i2": self.i2.to_dict() if self.i2 else None,
            "i3": [r.to_dict() for r in self.i3] if self.i3 is not None else None,
            "i4": self.i4.to_dict() if self.i4 else None,
            "cpr_native": self.cpr_native.to_dict() if self.cpr_native else None,
            "cpr_forensic": (self.cpr_forensic.to_dict()
                             if self.cpr_forensic else None),
            "check_errors": dict(self.check_errors),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PaperAudit":
        i3 = obj.get("i3")
        return cls(
            paper_id=obj["paper_id"], system=obj["system"],
            seed=obj.get("seed", 0), task_id=obj.get("task_id", ""),
            i1=I1Verdict.from_dict(obj["i1"]) if obj.get("i1") else None,
            i2=I2Verdict.from_dict(obj["i2"]) if obj.get("i2") else None,
            i3=([ResolutionRecord.from_dict(r) for r in i3]
                if i3 is not None else None),
            i4=I4Verdict.from_dict(obj["i4"]) if obj.get("i4") else None,
            cpr_native=(CprSummary.from_dict(obj["cpr_native"])
                        if obj.get("cpr_native") else None),
            cpr_forensic=(ForensicResult.from_dict(obj["cpr_forensic"])
                          if obj.get("cpr_forensic") else None),
            check_errors=dict(obj.get("check_errors") or {}),
        )

    def has_violation(self, cpr_floor: Optional[float] = None) -> bool:
        """Does anything here warrant a non-zero exit."""
        if self.i1 is not None and self.i1.status == "mismatch":
            return True
        if self.i2 is not None and self.i2.flagged:
            return True
        if self.i3 is not None and any(
                r.status == "hallucinated" for r in self.i3):
            return True
        if self.i4 is not None and not self.i4.aligned:
            return True
        if cpr_floor is not None:
            if (self.cpr_native is not None
                    and self.cpr_native.rate is not None
                    and self.cpr_native.rate < cpr_floor):
                return True
            if (self.cpr_forensic is not None
                    and self.cpr_forensic.rate is not None
                    and self.cpr_forensic.rate < cpr_floor):
                return True
        return False


@dataclass
class NearMiss:
    paper_id: str
    check: str
    flags: int
    k: int
    detail: str = ""

    def to_dict(self) -> dict:
        return {"paper_id": self.paper_id, "check": self.check,
                "flags": self.flags, "k": self.k, "detail": self.detail}

    @classmethod
    def from_dict(cls, obj: dict) -> "NearMiss":
        return cls(paper_id=obj["paper_id"], check=obj["check"],
                   flags=obj["flags"], k=obj["k"],
                   detail=obj.get("detail", ""))


@dataclass
class SystemSummary:
    """One row of the headline table."""

    system: str
    papers: int = 0
    i1_pass: int = 0
    i1_denom: int = 0
    i1_skipped: int = 0
    i2_flagged: int = 0
    i2_denom: int = 0
    i3_hallucinated: int = 0
    i3_total: int = 0
    i3_unresolved: int = 0
    i4_aligned: int = 0
    i4_denom: int = 0
    near_misses: list[NearMiss] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "system": self.system, "papers": self.papers,
            "i1_pass": self.i1_pass, "i1_denom": self.i1_denom,
            "i1_skipped": self.i1_skipped,
            "i2_flagged": self.i2_flagged, "i2_denom": self.i2_denom,
            "i3_hallucinated": self.i3_hallucinated,
            "i3_total": self.i3_total, "i3_unresolved": self.i3_unresolved,
            "i4_aligned": self.i4_aligned, "i4_denom": self.i4_denom,
            "near_misses": [n.to_dict() for n in self.near_misses],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SystemSummary":
        return cls(
            system=obj["system"], papers=obj.get("papers", 0),
            i1_pass=obj.get("i1_pass", 0), i1_denom=obj.get("i1_denom", 0),
            i1_skipped=obj.get("i1_skipped", 0),
            i2_flagged=obj.get("i2_flagged", 0),
            i2_denom=obj.get("i2_denom", 0),
            i3_hallucinated=obj.get("i3_hallucinated", 0),
            i3_total=obj.get("i3_total", 0),
            i3_unresolved=obj.get("i3_unresolved", 0),
            i4_aligned=obj.get("i4_aligned", 0),
            i4_denom=obj.get("i4_denom", 0),
            near_misses=[NearMiss.from_dict(n)
                         for n in obj.get("near_misses") or []],
        )


def aggregate(audits: list[PaperAudit]) -> list[SystemSummary]:
    """Group audits by system. Duplicate paper ids are an error: the same
    paper counted twice would silently skew every denominator."""
    seen: set[str] = set()
    for audit in audits:
        if audit.paper_id in seen:
            raise ReportError(f"duplicate paper id '{audit.paper_id}'")
        seen.add(audit.paper_id)
    by_system: dict[str, SystemSummary] = {}
    for audit in sorted(audits, key=lambda a: (a.system, a.paper_id)):
        s = by_system.setdefault(audit.system, SystemSummary(audit.system))
        s.papers += 1
        if audit.i1 is not None:
            if audit.i1.status == "skipped":
                s.i1_skipped += 1
            else:
                s.i1_denom += 1
                if audit.i1.status == "match":
                    s.i1_pass += 1
        if audit.i2 is not None:
            s.i2_denom += 1
            if audit.i2.flagged:
                s.i2_flagged += 1
            if audit.i2.near_miss:
                s.near_misses.append(NearMiss(
                    paper_id=audit.paper_id, check="i2",
                    flags=audit.i2.vote_flags, k=audit.i2.vote_k,
                    detail=", ".join(audit.i2.categories)))
        if audit.i3 is not None:
            for rec in audit.i3:
                if rec.status == "unresolved":
                    s.i3_unresolved += 1
                    continue
                s.i3_total += 1
                if rec.status == "hallucinated":
                    s.i3_hallucinated += 1
        if audit.i4 is not None:
            s.i4_denom += 1
            if audit.i4.aligned:
                s.i4_aligned += 1
    return [by_system[k] for k in sorted(by_system)]


# ---------------------------------------------------------------------------
# Rendering


def render(summaries: list[SystemSummary], audits: list[PaperAudit],
           fmt: str = "structured", judge_backend: str = "none") -> str:
    if fmt in ("structured", "json"):
        return render_structured(summaries, audits, judge_backend)
    if fmt in ("table", "text"):
        return render_table(summaries, audits)
    raise ReportError(f"unknown report format '{fmt}'")


def render_structured(summaries: list[SystemSummary],
                      audits: list[PaperAudit],
                      judge_backend: str = "none") -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "paperaudit", "version": __version__},
        "judge_backend": judge_backend,
        "summaries": [s.to_dict() for s in summaries],
        "audits": [a.to_dict() for a in audits],
    }
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=True) + "\n"


def parse_report(text: str) -> tuple[list[SystemSummary], list[PaperAudit]]:
    """Inverse of render_structured."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportError(f"report is not valid JSON: {exc}")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ReportError(f"unsupported schema_version {version!r}")
    summaries = [SystemSummary.from_dict(s) for s in doc.get("summaries", [])]
    audits = [PaperAudit.from_dict(a) for a in doc.get("audits", [])]
    return summaries, audits


def _fraction(num: int, denom: int) -> str:
    return f"{num}/{denom}"


def render_table(summaries: list[SystemSummary],
                 audits: list[PaperAudit]) -> str:
    """Plain-text mirror of the structured summary."""
    headers = ["System", "Papers", "Score Verif.", "Spec. Violation",
               "Ref. Verif.", "Method-Code"]
    rows = []
    for s in summaries:
        rows.append([
            s.system, str(s.papers),
            _fraction(s.i1_pass, s.i1_denom),
            _fraction(s.i2_flagged, s.i2_denom),
            _fraction(s.i3_hallucinated, s.i3_total),
            _fraction(s.i4_aligned, s.i4_denom),
        ])
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = []
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(r)))
    unresolved = sum(s.i3_unresolved for s in summaries)
    if unresolved:
        lines.append("")
        lines.append(f"unresolved references excluded from totals: {unresolved}")

    findings = _finding_lines(audits)
    if findings:
        lines.append("")
        lines.append("Findings")
        lines.append("--------")
        lines.extend(findings)

    near = [n for s in summaries for n in s.near_misses]
    if near:
        lines.append("")
        lines.append("Near misses (flagged by some judges, short of majority)")
        lines.append("-------------------------------------------------------")
        for n in near:
            lines.append(f"  {n.paper_id}  {n.check}  {n.flags}/{n.k}"
                         + (f"  {n.detail}" if n.detail else ""))
    return "\n".join(lines) + "\n"


def _finding_lines(audits: list[PaperAudit]) -> list[str]:
    out = []
    for a in sorted(audits, key=lambda x: x.paper_id):
        entries = []
        if a.i1 is not None and a.i1.status == "mismatch":
            entries.append(
                f"i1 {a.i1.category} [{a.i1.sub_code}] {a.i1.detail}")
        if a.i2 is not None and a.i2.flagged:
            cats = ", ".join(a.i2.categories) or "unspecified"
            codes = ", ".join(a.i2.sub_codes)
            suffix = " (prescreen only)" if a.i2.prescreen_only else ""
            entries.append(f"i2 {cats} [{codes}]{suffix} {a.i2.detail}")
        if a.i3 is not None:
            for rec in a.i3:
                if rec.status == "hallucinated":
                    entries.append(
                        f"i3 {rec.key} [{rec.sub_code}] {rec.detail}")
        if a.i4 is not None and not a.i4.aligned:
            codes = ", ".join(a.i4.sub_codes)
            cats = ", ".join(sorted({f.category for f in a.i4.findings}))
            entries.append(f"i4 {cats or 'misaligned'} [{codes}] {a.i4.detail}")
        if a.cpr_native is not None and a.cpr_native.total:
            failed = a.cpr_native.total - a.cpr_native.passed
            if failed:
                entries.append(
                    f"cpr {a.cpr_native.passed}/{a.cpr_native.total} claims "
                    f"pass ({a.cpr_native.dropped} dropped)")
        for err_check, msg in sorted(a.check_errors.items()):
            entries.append(f"{err_check} check error: {msg}")
        for e in entries:
            out.append(f"  {a.paper_id}  {e}")
    return out
