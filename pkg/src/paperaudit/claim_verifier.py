"""Native claim-provenance verification.

Papers that ship a claims.jsonl declare, per claim, the evidence that
backs it. Each claim type gets its own deterministic check: numerical
claims are compared against the cited log line (a small line window and a
closed set of unit factors absorb formatting drift), citation claims are
resolved to the bibliography and judged against the cited abstract,
methodological claims need real content-word overlap with the cited log
region, and conclusion claims must be arithmetically consistent with the
numerical claims they lean on.

Break codes:
  B-UNSOURCED             claim carries no evidence at all (dropped)
  B-MALFORMED             claim or evidence annotation unreadable (dropped)
  B-MISSING-ARTIFACT      cited artifact absent, out of range, or altered
  B-VALUE-MISMATCH        no unit-normalised value match in the window
  B-KEY-UNRESOLVED        citation key not in the bibliography
  B-ABSTRACT-NOT-ENTAILED judged: abstract does not support the sentence
  B-OVERLAP-LOW           methodological overlap below the floor
  B-UNSUPPORTED-CONCLUSION comparison not backed by linked claims

Dropped claims (unsourced or malformed) are excluded from every CPR
total and reported separately; a pass additionally requires the evidence
content hash, when present, to match the bundle's current content.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from typing import Optional

from .bundle import (
    ArtifactBundle,
    BibEntry,
    ClaimRecord,
    EvidenceLink,
    LogFile,
    _strip_braces,
)
from .errors import (
    JudgeTransportError,
    MalformedVerdictError,
    ScriptedFixtureMissError,
    VoteError,
)
from .judge import JudgeBackend, JudgeRequest, query
from .textnum import (
    content_words,
    extract_claim_numbers,
    extract_numbers,
    has_comparison_language,
)

logger = logging.getLogger(__name__)

BREAK_CODES = (
    "B-UNSOURCED", "B-MALFORMED", "B-MISSING-ARTIFACT", "B-VALUE-MISMATCH",
    "B-KEY-UNRESOLVED", "B-ABSTRACT-NOT-ENTAILED", "B-OVERLAP-LOW",
    "B-UNSUPPORTED-CONCLUSION",
)

NUMERICAL_TOLERANCE = 0.05
UNIT_FACTORS = (1.0, 100.0, 0.01, 1000.0, 0.001)
LINE_WINDOW = 3
WINDOW_OFFSETS = (0, 1, -1, 2, -2, 3, -3)
OVERLAP_FLOOR = 0.30
CONCLUSION_TOLERANCE = 0.05


@dataclass
class ClaimVerdict:
    claim_id: str
    claim_type: str
    status: str  # pass | partial | fail | dropped
    break_code: Optional[str] = None
    detail: str = ""
    value: Optional[float] = None
    evidence_uri: Optional[str] = None

    def to_dict(self) -> dict:
        return {"claim_id": self.claim_id, "claim_type": self.claim_type,
                "status": self.status, "break_code": self.break_code,
                "detail": self.detail, "value": self.value,
                "evidence_uri": self.evidence_uri}

    @classmethod
    def from_dict(cls, obj: dict) -> "ClaimVerdict":
        return cls(claim_id=obj["claim_id"], claim_type=obj["claim_type"],
                   status=obj["status"], break_code=obj.get("break_code"),
                   detail=obj.get("detail", ""), value=obj.get("value"),
                   evidence_uri=obj.get("evidence_uri"))


@dataclass
class CprSummary:
    """Claim pass rates; rate is None (not zero) when nothing was checked."""

    total: int = 0
    passed: int = 0
    rate: Optional[float] = None
    per_type: dict[str, dict] = field(default_factory=dict)
    dropped: int = 0

    def to_dict(self) -> dict:
        return {"total": self.total, "passed": self.passed, "rate": self.rate,
                "per_type": self.per_type, "dropped": self.dropped}

    @classmethod
    def from_dict(cls, obj: dict) -> "CprSummary":
        return cls(total=obj.get("total", 0), passed=obj.get("passed", 0),
                   rate=obj.get("rate"),
                   per_type=dict(obj.get("per_type") or {}),
                   dropped=obj.get("dropped", 0))


def content_hash_for(text: str) -> str:
    """The digest claims.jsonl should carry for a cited line."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _values_match(claim_value: float, evidence_value: float,
                  tolerance: float = NUMERICAL_TOLERANCE,
                  ) -> Optional[float]:
    """The unit factor under which the values agree, or None.

    The factor scales the evidence value; the closed set covers percent
    against fraction and milli against base units in both directions.
    """
    for factor in UNIT_FACTORS:
        scaled = evidence_value * factor
        if scaled == 0:
            if claim_value == 0:
                return factor
            continue
        if abs(claim_value - scaled) / abs(scaled) <= tolerance:
            return factor
    return None


def _claim_value(claim: ClaimRecord) -> Optional[float]:
    if claim.value is not None:
        return claim.value
    numbers = extract_claim_numbers(claim.sentence)
    return numbers[0].value if numbers else None


def _check_content_hash(link: EvidenceLink, line_text: str) -> Optional[str]:
    """Error message when the recorded hash no longer matches the bundle."""
    if not link.content_hash:
        return None
    if content_hash_for(line_text) != link.content_hash:
        return "content hash mismatch: cited line changed since annotation"
    return None


# ---------------------------------------------------------------------------
# Numerical claims


def _verify_numerical_link(claim_value: float, link: EvidenceLink,
                           logs: list[LogFile],
                           baselines: dict[str, float]) -> ClaimVerdict:
    ref = link.log_ref()
    if ref is not None:
        path, lineno = ref
        log = _find_log(logs, path)
        if log is None:
            return _fail("B-MISSING-ARTIFACT", f"log '{path}' not in bundle")
        cited = log.line(lineno)
        if cited is None:
            return _fail("B-MISSING-ARTIFACT",
                         f"line {lineno} out of range for '{path}'")
        hash_err = _check_content_hash(link, cited)
        if hash_err:
            return _fail("B-MISSING-ARTIFACT", hash_err)
        for offset in WINDOW_OFFSETS:
            candidate = log.line(lineno + offset)
            if candidate is None:
                continue
            for tok in extract_numbers(candidate):
                factor = _values_match(claim_value, tok.value)
                if factor is not None:
                    where = f"{path}:{lineno + offset}"
                    note = "" if factor == 1.0 else f" (unit factor {factor:g})"
                    return ClaimVerdict(
                        claim_id="", claim_type="numerical", status="pass",
                        detail=f"matched {tok.value:g} at {where}{note}",
                        evidence_uri=link.uri)
        return _fail(
            "B-VALUE-MISMATCH",
            f"no value within {NUMERICAL_TOLERANCE:.0%} in "
            f"'{path}' lines {lineno}±{LINE_WINDOW}")
    node = link.node_key()
    if node is not None:
        if node not in baselines:
            return _fail("B-MISSING-ARTIFACT",
                         f"no recorded value for '{link.uri}'")
        value = baselines[node]
        factor = _values_match(claim_value, value)
        if factor is not None:
            return ClaimVerdict(
                claim_id="", claim_type="numerical", status="pass",
                detail=f"matched recorded value {value:g} for '{link.uri}'",
                evidence_uri=link.uri)
        return _fail("B-VALUE-MISMATCH",
                     f"claimed {claim_value:g} vs recorded {value:g} "
                     f"for '{link.uri}'")
    return _fail("B-MISSING-ARTIFACT",
                 f"evidence '{link.uri}' is not numeric evidence")


def _find_log(logs: list[LogFile], path: str) -> Optional[LogFile]:
    for lf in logs:
        if lf.path == path:
            return lf
    from pathlib import Path as _P

    name = _P(path).name
    for lf in logs:
        if _P(lf.path).name == name:
            return lf
    return None


def _fail(code: str, detail: str) -> ClaimVerdict:
    return ClaimVerdict(claim_id="", claim_type="", status="fail",
                        break_code=code, detail=detail)


def verify_numerical(claim: ClaimRecord, logs: list[LogFile],
                     baselines: Optional[dict[str, float]] = None,
                     ) -> ClaimVerdict:
    """Check a numerical claim against its cited evidence.

    The cited line and its ±3 neighbours are searched; a candidate value
    matches when, under one of the five unit factors, it is within 5%
    relative of the claimed value.
    """
    value = _claim_value(claim)
    if value is None:
        verdict = ClaimVerdict(claim_id=claim.id, claim_type="numerical",
                               status="dropped", break_code="B-MALFORMED",
                               detail="no extractable number in the claim")
        return verdict
    baselines = baselines or {}
    failure: Optional[ClaimVerdict] = None
    for link in claim.evidence:
        result = _verify_numerical_link(value, link, logs, baselines)
        result.claim_id = claim.id
        result.claim_type = "numerical"
        result.value = value
        if result.evidence_uri is None:
            result.evidence_uri = link.uri
        if result.status == "pass":
            return result
        if failure is None:
            failure = result
    if failure is None:
        failure = ClaimVerdict(claim_id=claim.id, claim_type="numerical",
                               status="fail", break_code="B-MISSING-ARTIFACT",
                               detail="no numeric evidence link", value=value)
    return failure


# ---------------------------------------------------------------------------
# Citation claims


def _resolve_bib_key(key: str, bib: list[BibEntry]) -> Optional[BibEntry]:
    for entry in bib:
        if entry.key == key:
            return entry
    # Duplicate keys were suffixed at parse time; accept the base key.
    for entry in bib:
        if entry.key.startswith(f"{key}-dup"):
            return entry
    return None


def verify_citation(claim: ClaimRecord, bib: list[BibEntry],
                    judge: Optional[JudgeBackend] = None) -> ClaimVerdict:
    """Resolve the cited key and judge whether the cited abstract entails
    what the sentence attributes to it."""
    key = None
    for link in claim.evidence:
        key = link.cite_key()
        if key is None and link.log_ref() is None and link.node_key() is None:
            key = link.uri  # bare key form
        if key:
            break
    if not key:
        return ClaimVerdict(claim_id=claim.id, claim_type="citation",
                            status="fail", break_code="B-KEY-UNRESOLVED",
                            detail="no citation key in evidence")
    entry = _resolve_bib_key(key, bib)
    if entry is None:
        return ClaimVerdict(claim_id=claim.id, claim_type="citation",
                            status="fail", break_code="B-KEY-UNRESOLVED",
                            detail=f"key '{key}' not in bibliography",
                            evidence_uri=f"cite:{key}")
    abstract = _strip_braces(entry.fields.get("abstract", ""))
    if not abstract:
        return ClaimVerdict(claim_id=claim.id, claim_type="citation",
                            status="partial", break_code="B-MISSING-ARTIFACT",
                            detail=f"no abstract available for '{key}'",
                            evidence_uri=f"cite:{key}")
    if judge is None:
        return ClaimVerdict(claim_id=claim.id, claim_type="citation",
                            status="partial", break_code="B-MISSING-ARTIFACT",
                            detail="no judge backend for entailment",
                            evidence_uri=f"cite:{key}")
    request = JudgeRequest(
        template_id="citation_entailment",
        bindings={"sentence": claim.sentence, "abstract": abstract[:4000],
                  "title": entry.title or key},
        expected_schema=("flag",),
    )
    try:
        verdict = query(judge, request)
    except (MalformedVerdictError, ScriptedFixtureMissError,
            JudgeTransportError, VoteError) as exc:
        return ClaimVerdict(claim_id=claim.id, claim_type="citation",
                            status="partial", break_code="B-MISSING-ARTIFACT",
                            detail=f"entailment judge unavailable: {exc}",
                            evidence_uri=f"cite:{key}")
    if verdict.flag:
        return ClaimVerdict(claim_id=claim.id, claim_type="citation",
                            status="pass", detail="abstract entails claim",
                            evidence_uri=f"cite:{key}")
    return ClaimVerdict(claim_id=claim.id, claim_type="citation",
                        status="fail", break_code="B-ABSTRACT-NOT-ENTAILED",
                        detail=f"abstract of '{key}' does not support the "
                               "sentence", evidence_uri=f"cite:{key}")


# ---------------------------------------------------------------------------
# Methodological claims


def overlap_score(sentence: str, region: str) -> float:
    """Fraction of the sentence's content words present in the region."""
    swords = content_words(sentence)
    if not swords:
        return 0.0
    rwords = content_words(region)
    return len(swords & rwords) / len(swords)


def verify_methodological(claim: ClaimRecord, logs: list[LogFile],
                          ) -> ClaimVerdict:
    """Require real content-word overlap with the cited log region."""
    failure: Optional[ClaimVerdict] = None
    for link in claim.evidence:
        ref = link.log_ref()
        if ref is None:
            continue
        path, lineno = ref
        log = _find_log(logs, path)
        if log is None:
            result = _fail("B-MISSING-ARTIFACT", f"log '{path}' not in bundle")
        else:
            cited = log.line(lineno)
            if cited is None:
                result = _fail("B-MISSING-ARTIFACT",
                               f"line {lineno} out of range for '{path}'")
            else:
                hash_err = _check_content_hash(link, cited)
                if hash_err:
                    result = _fail("B-MISSING-ARTIFACT", hash_err)
                else:
                    lo = max(1, lineno - LINE_WINDOW)
                    hi = lineno + LINE_WINDOW
                    region = "\n".join(
                        log.line(i) or "" for i in range(lo, hi + 1))
                    score = overlap_score(claim.sentence, region)
                    if score >= OVERLAP_FLOOR:
                        result = ClaimVerdict(
                            claim_id="", claim_type="methodological",
                            status="pass",
                            detail=f"overlap {score:.2f} with "
                                   f"'{path}' lines {lo}-{hi}")
                    else:
                        result = _fail(
                            "B-OVERLAP-LOW",
                            f"overlap {score:.2f} below {OVERLAP_FLOOR:.2f} "
                            f"for '{path}' line {lineno}")
        result.claim_id = claim.id
        result.claim_type = "methodological"
        result.evidence_uri = link.uri
        if result.status == "pass":
            return result
        if failure is None:
            failure = result
    if failure is None:
        failure = ClaimVerdict(claim_id=claim.id, claim_type="methodological",
                               status="fail", break_code="B-MISSING-ARTIFACT",
                               detail="no log-region evidence link")
    return failure


# ---------------------------------------------------------------------------
# Conclusion claims


_DELTA_RE = re.compile(
    r"by\s+\$?([-+]?\d+(?:\.\d+)?)\s*(\\?%|percent|percentage\s+points"
    r"|points|pp)?", re.IGNORECASE)
_PCT_COMPARATIVE_RE = re.compile(
    r"([-+]?\d+(?:\.\d+)?)\s*\\?%\s*(?:faster|slower|better|worse|higher"
    r"|lower|improvement|gain|reduction)", re.IGNORECASE)


def _parse_claimed_delta(sentence: str) -> Optional[tuple[float, bool]]:
    """(value, is_percent) for the stated margin, or None."""
    m = _DELTA_RE.search(sentence)
    if m:
        return float(m.group(1)), bool(m.group(2) and "%" in m.group(2)
                                       or m.group(2) and "percent" in
                                       m.group(2).lower())
    m = _PCT_COMPARATIVE_RE.search(sentence)
    if m:
        return float(m.group(1)), True
    return None


def _link_supporting(claim: ClaimRecord,
                     numericals: list[tuple[ClaimRecord, ClaimVerdict]],
                     ) -> list[float]:
    """Values of numerical claims linked by token-and-number overlap."""
    cwords = content_words(claim.sentence)
    cnumbers = {t.value for t in extract_claim_numbers(claim.sentence)}
    scored = []
    for idx, (rec, verdict) in enumerate(numericals):
        if verdict.value is None or verdict.status == "dropped":
            continue
        shared = len(cwords & content_words(rec.sentence))
        value_named = verdict.value in cnumbers
        if shared == 0 and not value_named:
            continue
        scored.append((shared + (3 if value_named else 0), -idx, verdict.value))
    scored.sort(reverse=True)
    return [v for _, _, v in scored[:2]]


def verify_conclusion(claim: ClaimRecord,
                      numericals: list[tuple[ClaimRecord, ClaimVerdict]],
                      ) -> ClaimVerdict:
    """Check a comparative statement against the claims it leans on.

    The stated margin (absolute, or percent converted against the
    baseline) must agree with the difference of the two linked values
    within 5% relative. A comparison whose margin cannot be parsed is
    partial, never a silent pass.
    """
    values = _link_supporting(claim, numericals)
    if len(values) < 2:
        return ClaimVerdict(
            claim_id=claim.id, claim_type="conclusion", status="fail",
            break_code="B-UNSUPPORTED-CONCLUSION",
            detail="no linkable supporting claims")
    hi, lo = max(values), min(values)
    actual = hi - lo
    parsed = _parse_claimed_delta(claim.sentence)
    if not has_comparison_language(claim.sentence) or parsed is None:
        return ClaimVerdict(
            claim_id=claim.id, claim_type="conclusion", status="partial",
            break_code="B-UNSUPPORTED-CONCLUSION",
            detail="margin not parseable from the sentence")
    stated, is_percent = parsed
    if is_percent:
        candidates = [abs(stated) / 100.0 * abs(b) for b in (lo, hi) if b != 0]
        if not candidates:
            candidates = [abs(stated) / 100.0]
    else:
        candidates = [abs(stated)]
    for cand in candidates:
        if actual == 0:
            if cand == 0:
                return _conclusion_pass(claim, cand, hi, lo)
            continue
        if abs(cand - actual) / abs(actual) <= CONCLUSION_TOLERANCE:
            return _conclusion_pass(claim, cand, hi, lo)
    return ClaimVerdict(
        claim_id=claim.id, claim_type="conclusion", status="fail",
        break_code="B-UNSUPPORTED-CONCLUSION",
        detail=f"stated margin {stated:g}{'%' if is_percent else ''} vs "
               f"actual difference {actual:g} ({hi:g} vs {lo:g})")


def _conclusion_pass(claim: ClaimRecord, cand: float, hi: float,
                     lo: float) -> ClaimVerdict:
    return ClaimVerdict(
        claim_id=claim.id, claim_type="conclusion", status="pass",
        detail=f"margin {cand:g} consistent with {hi:g} vs {lo:g}")


# ---------------------------------------------------------------------------
# Orchestration


def verify_all(claims: list[ClaimRecord], bundle: ArtifactBundle,
               judge: Optional[JudgeBackend] = None,
               ) -> tuple[list[ClaimVerdict], CprSummary]:
    """Verify every claim; conclusions run last, over the numerical
    results. Dropped claims never enter the totals."""
    verdicts: dict[str, ClaimVerdict] = {}
    numericals: list[tuple[ClaimRecord, ClaimVerdict]] = []
    order: list[str] = []
    for claim in claims:
        order.append(claim.id)
        if claim.malformed:
            verdicts[claim.id] = ClaimVerdict(
                claim_id=claim.id, claim_type=claim.claim_type or "unknown",
                status="dropped", break_code="B-MALFORMED",
                detail=claim.parse_error or "malformed record")
            continue
        if claim.unsourced:
            verdicts[claim.id] = ClaimVerdict(
                claim_id=claim.id, claim_type=claim.claim_type,
                status="dropped", break_code="B-UNSOURCED",
                detail="claim carries no evidence")
            continue
        if claim.claim_type == "numerical":
            v = verify_numerical(claim, bundle.logs, bundle.search_metadata)
            verdicts[claim.id] = v
            numericals.append((claim, v))
        elif claim.claim_type == "citation":
            verdicts[claim.id] = verify_citation(claim, bundle.bib, judge)
        elif claim.claim_type == "methodological":
            verdicts[claim.id] = verify_methodological(claim, bundle.logs)
    for claim in claims:
        if claim.id in verdicts:
            continue
        if claim.claim_type == "conclusion":
            verdicts[claim.id] = verify_conclusion(claim, numericals)
    ordered = [verdicts[cid] for cid in order if cid in verdicts]
    return ordered, build_cpr(ordered)


def build_cpr(verdicts: list[ClaimVerdict]) -> CprSummary:
    """Aggregate verdicts into pass rates, excluding dropped claims."""
    summary = CprSummary()
    for v in verdicts:
        if v.status == "dropped":
            summary.dropped += 1
            continue
        summary.total += 1
        bucket = summary.per_type.setdefault(
            v.claim_type, {"total": 0, "passed": 0, "rate": None})
        bucket["total"] += 1
        if v.status == "pass":
            summary.passed += 1
            bucket["passed"] += 1
    for bucket in summary.per_type.values():
        if bucket["total"]:
            bucket["rate"] = bucket["passed"] / bucket["total"]
    if summary.total:
        summary.rate = summary.passed / summary.total
    return summary
