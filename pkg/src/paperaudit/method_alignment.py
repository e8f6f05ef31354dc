"""Method-code alignment check (I4).

A k-judge vote compares the paper's method section against the solver
code. The bar: a faithful simplification is aligned; a fundamentally
different algorithm, broken or incomplete code, or dummy code presented
as the method is not. Findings from flagging judges are merged by
(category, file).

Sub-codes:
  MCA-0  aligned (implicit; never attached to findings)
  MCA-1  described component embellished, incomplete or broken
  MCA-2  different algorithm class, or component absent entirely
  MCA-3  orphan description: the code never ran (I1 saw evaluator_error)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from .bundle import ArtifactBundle, extract_sections, method_section
from .errors import CheckError, VoteError
from .judge import JudgeBackend, JudgeRequest, majority_vote

logger = logging.getLogger(__name__)

CATEGORIES = (
    "incomplete_broken",
    "algorithm_class_mismatch",
    "deceptive_dummy_code",
)


@dataclass
class I4Finding:
    category: str
    sub_code: str
    file: str
    paper_evidence: str = ""
    code_evidence: str = ""
    deception: bool = False

    def to_dict(self) -> dict:
        return {"category": self.category, "sub_code": self.sub_code,
                "file": self.file, "paper_evidence": self.paper_evidence,
                "code_evidence": self.code_evidence,
                "deception": self.deception}

    @classmethod
    def from_dict(cls, obj: dict) -> "I4Finding":
        return cls(category=obj["category"], sub_code=obj["sub_code"],
                   file=obj.get("file", ""),
                   paper_evidence=obj.get("paper_evidence", ""),
                   code_evidence=obj.get("code_evidence", ""),
                   deception=bool(obj.get("deception", False)))


@dataclass
class I4Verdict:
    aligned: bool
    findings: list[I4Finding] = field(default_factory=list)
    sub_codes: list[str] = field(default_factory=list)
    vote_flags: int = 0
    vote_k: int = 0
    method_section_name: str = ""
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "aligned": self.aligned,
            "findings": [f.to_dict() for f in self.findings],
            "sub_codes": list(self.sub_codes),
            "vote_flags": self.vote_flags, "vote_k": self.vote_k,
            "method_section_name": self.method_section_name,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "I4Verdict":
        return cls(
            aligned=obj["aligned"],
            findings=[I4Finding.from_dict(f) for f in obj.get("findings") or []],
            sub_codes=list(obj.get("sub_codes") or []),
            vote_flags=obj.get("vote_flags", 0), vote_k=obj.get("vote_k", 0),
            method_section_name=obj.get("method_section_name", ""),
            detail=obj.get("detail", ""),
        )


def _finding_sub_code(category: str, absent: bool) -> tuple[str, bool]:
    """(sub_code, deception marker) for a judge-reported finding."""
    if category == "incomplete_broken":
        return ("MCA-2" if absent else "MCA-1"), False
    if category == "algorithm_class_mismatch":
        return "MCA-2", False
    return "MCA-2", True  # deceptive_dummy_code


def check_alignment(bundle: ArtifactBundle, judge: JudgeBackend, k: int = 5,
                    i1_category: Optional[str] = None) -> I4Verdict:
    """Vote on alignment between the method section and the solver.

    When I1 recorded an evaluator_error for the same paper the MCA-3
    marker is attached: the described code demonstrably never produced
    the reported results.
    """
    sections = extract_sections(bundle.paper_tex)
    method = method_section(sections)
    if method is None or not method[1].strip():
        raise CheckError("paper has no non-empty method section")
    section_name, method_text = method

    files = sorted(bundle.solution)
    blob = "\n\n".join(f"# file: {name}\n{bundle.solution[name]}"
                       for name in files)[:30000]
    request = JudgeRequest(
        template_id="method_alignment",
        bindings={"method_text": method_text[:15000], "solver_code": blob},
        expected_schema=("flag",),
    )
    try:
        vote = majority_vote(judge, request, k=k)
    except VoteError as exc:
        raise CheckError(f"alignment vote unusable: {exc}")

    merged: dict[tuple[str, str], I4Finding] = {}
    if vote.majority:
        for v in vote.verdicts:
            if v.malformed or not v.flag:
                continue
            raw_findings = v.data.get("findings")
            if not isinstance(raw_findings, list):
                continue
            for rf in raw_findings:
                if not isinstance(rf, dict):
                    continue
                category = str(rf.get("category", ""))
                if category not in CATEGORIES:
                    continue
                file = str(rf.get("file") or (files[0] if files else ""))
                key = (category, file)
                if key in merged:
                    continue
                sub_code, deception = _finding_sub_code(
                    category, bool(rf.get("absent", False)))
                merged[key] = I4Finding(
                    category=category, sub_code=sub_code, file=file,
                    paper_evidence=str(rf.get("paper_evidence", ""))[:300],
                    code_evidence=str(rf.get("code_evidence", ""))[:300],
                    deception=deception)
        if not merged:
            # Majority said misaligned but no judge produced a structured
            # finding; record the disagreement itself.
            merged[("algorithm_class_mismatch", files[0] if files else "")] = (
                I4Finding(category="algorithm_class_mismatch",
                          sub_code="MCA-2",
                          file=files[0] if files else "",
                          paper_evidence=section_name,
                          code_evidence="(no structured finding)"))

    findings = sorted(merged.values(), key=lambda f: (f.category, f.file))
    sub_codes = []
    for f in findings:
        if f.sub_code not in sub_codes:
            sub_codes.append(f.sub_code)
    detail = ""
    if i1_category == "evaluator_error":
        if "MCA-3" not in sub_codes:
            sub_codes.append("MCA-3")
        detail = "orphan description: evaluator never ran successfully"
    return I4Verdict(
        aligned=not vote.majority, findings=findings, sub_codes=sub_codes,
        vote_flags=vote.flags, vote_k=vote.k,
        method_section_name=section_name, detail=detail,
    )
