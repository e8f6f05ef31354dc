"""Reference existence and metadata verification.

Each bibliography entry is resolved against the scholarly indexes in a
fixed order: arXiv id, then DOI, then title search across every source.
An id or DOI hit anchors a real record but never auto-verifies it; the
entry's title and metadata are cross-checked, which is what catches real
papers cited under invented titles.

Classification:
  RF-1  the cited work matches no record in any source
  RF-2  a real record exists but the entry's description is fabricated
        or corrupted (retitled record, or two or more metadata fields
        materially wrong)

Entries that cannot be decided because every source was unreachable (or,
in the ambiguous band, because no judge was available) are unresolved and
excluded from both sides of the hallucination rate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from .bundle import BibEntry
from .clients import ApiRecord, ClientSet, cached_get
from .errors import (
    ApiError,
    CacheMissError,
    JudgeTransportError,
    MalformedVerdictError,
    ScriptedFixtureMissError,
    VoteError,
)
from .judge import JudgeBackend, JudgeRequest, query
from .textnum import STOPWORDS, tokenize

logger = logging.getLogger(__name__)

AUTO_VERIFY_SIMILARITY = 0.90
AMBIGUOUS_SIMILARITY = 0.50


@dataclass
class ResolutionRecord:
    """The audit outcome for one bibliography entry."""

    key: str
    status: str  # verified | hallucinated | unresolved
    sub_code: Optional[str] = None  # RF-1 | RF-2
    method: Optional[str] = None  # id-match | doi-match | title-exact | title-judged
    similarity: Optional[float] = None
    matched: Optional[ApiRecord] = None
    detail: str = ""
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "key": self.key, "status": self.status, "sub_code": self.sub_code,
            "method": self.method, "similarity": self.similarity,
            "matched": self.matched.to_dict() if self.matched else None,
            "detail": self.detail, "errors": list(self.errors),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ResolutionRecord":
        matched = obj.get("matched")
        return cls(
            key=obj["key"], status=obj["status"],
            sub_code=obj.get("sub_code"), method=obj.get("method"),
            similarity=obj.get("similarity"),
            matched=ApiRecord.from_dict(matched) if matched else None,
            detail=obj.get("detail", ""), errors=list(obj.get("errors") or []),
        )


def title_similarity(a: str, b: str) -> float:
    """Case-, punctuation- and whitespace-insensitive token set overlap.

    1.0 exactly when the normalised token sets coincide, 0.0 when one side
    is empty and the other is not.
    """
    ta, tb = set(tokenize(a)), set(tokenize(b))
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


def _surnames(names: list[str]) -> set[str]:
    out = set()
    for name in names:
        parts = tokenize(name)
        if parts:
            out.add(parts[-1])
    return out


def _venue_acronym(venue: str) -> str:
    return "".join(t[0] for t in tokenize(venue) if t not in STOPWORDS)


def metadata_disagreements(entry: BibEntry, record: ApiRecord) -> list[str]:
    """Fields of {title, year, venue, authors} that materially disagree.

    The comparisons are deliberately lenient (off-by-one years and venue
    renamings are common between preprint and proceedings versions); a
    single disagreement never condemns an entry on its own.
    """
    fields = []
    if title_similarity(entry.title, record.title) < AMBIGUOUS_SIMILARITY:
        fields.append("title")
    if entry.year is not None and record.year is not None:
        if abs(entry.year - record.year) >= 2:
            fields.append("year")
    if entry.venue and record.venue:
        ea, ra = set(tokenize(entry.venue)), set(tokenize(record.venue))
        if ea and ra and not (ea & ra):
            acro_e = _venue_acronym(entry.venue)
            acro_r = _venue_acronym(record.venue)
            if acro_e not in "".join(ra) and acro_r not in "".join(ea):
                fields.append("venue")
    se, sr = _surnames(entry.authors), _surnames(record.authors)
    if se and sr and not (se & sr):
        fields.append("authors")
    return fields


def _judge_same_work(judge: JudgeBackend, entry: BibEntry,
                     record: ApiRecord) -> Optional[bool]:
    """One-shot judged disambiguation; None when no decision was possible."""
    request = JudgeRequest(
        template_id="reference_disambiguation",
        bindings={
            "bib_title": entry.title,
            "bib_authors": ", ".join(entry.authors) or "unknown",
            "bib_year": str(entry.year) if entry.year else "unknown",
            "candidate_title": record.title,
            "candidate_authors": ", ".join(record.authors) or "unknown",
            "candidate_year": str(record.year) if record.year else "unknown",
            "candidate_venue": record.venue or "unknown",
        },
        expected_schema=("flag",),
    )
    try:
        return query(judge, request).flag
    except (MalformedVerdictError, ScriptedFixtureMissError,
            JudgeTransportError, VoteError) as exc:
        logger.debug("disambiguation judge unavailable: %s", exc)
        return None


def _lookup_all(clients: ClientSet, kind: str, value: str,
                errors: list[str]) -> tuple[list[ApiRecord], bool]:
    """Query every source; returns (records, any_source_answered)."""
    records: list[ApiRecord] = []
    answered = False
    for client in clients:
        try:
            records.extend(cached_get(client, kind, value))
            answered = True
        except CacheMissError as exc:
            errors.append(f"cache-miss {client.name}: {exc}")
        except ApiError as exc:
            errors.append(f"api-error {client.name}: {exc}")
    return records, answered


def resolve_entry(entry: BibEntry, clients: ClientSet,
                  judge: Optional[JudgeBackend] = None) -> ResolutionRecord:
    """Resolve one bibliography entry to a verdict.

    Resolution order: arXiv id, DOI, then title search. Deterministic for
    a fixed cache state; with --offline and a warm cache no network is
    touched at all.
    """
    errors: list[str] = []
    anchored: Optional[tuple[ApiRecord, str]] = None
    any_answer = False

    if entry.arxiv_id:
        recs, answered = _lookup_all(clients, "arxiv", entry.arxiv_id, errors)
        any_answer = any_answer or answered
        if recs:
            anchored = (recs[0], "id-match")
    if anchored is None and entry.doi:
        recs, answered = _lookup_all(clients, "doi", entry.doi, errors)
        any_answer = any_answer or answered
        if recs:
            anchored = (recs[0], "doi-match")

    if anchored is not None:
        record, method = anchored
        sim = title_similarity(entry.title, record.title)
        bad_fields = metadata_disagreements(entry, record)
        if len(bad_fields) >= 2:
            return ResolutionRecord(
                key=entry.key, status="hallucinated", sub_code="RF-2",
                method=method, similarity=sim, matched=record,
                detail=f"real record, but {', '.join(bad_fields)} disagree",
                errors=errors)
        if sim >= AUTO_VERIFY_SIMILARITY:
            return ResolutionRecord(
                key=entry.key, status="verified", method=method,
                similarity=sim, matched=record, errors=errors)
        if sim >= AMBIGUOUS_SIMILARITY:
            if judge is not None:
                same = _judge_same_work(judge, entry, record)
                if same is True:
                    return ResolutionRecord(
                        key=entry.key, status="verified", method=method,
                        similarity=sim, matched=record,
                        detail="judged same work", errors=errors)
                if same is False:
                    return ResolutionRecord(
                        key=entry.key, status="hallucinated", sub_code="RF-2",
                        method=method, similarity=sim, matched=record,
                        detail="judged different from the anchored record",
                        errors=errors)
            return ResolutionRecord(
                key=entry.key, status="unresolved", method=method,
                similarity=sim, matched=record,
                detail="ambiguous title match, no judge decision",
                errors=errors)
        return ResolutionRecord(
            key=entry.key, status="hallucinated", sub_code="RF-2",
            method=method, similarity=sim, matched=record,
            detail="entry title does not describe the anchored record",
            errors=errors)

    if entry.title.strip():
        candidates, answered = _lookup_all(clients, "title", entry.title,
                                           errors)
        any_answer = any_answer or answered
    else:
        candidates, answered = [], False

    if not any_answer:
        return ResolutionRecord(
            key=entry.key, status="unresolved",
            detail="every source unreachable", errors=errors)

    scored = sorted(
        ((title_similarity(entry.title, c.title), c) for c in candidates),
        key=lambda t: t[0], reverse=True)
    if not scored or scored[0][0] < AMBIGUOUS_SIMILARITY:
        return ResolutionRecord(
            key=entry.key, status="hallucinated", sub_code="RF-1",
            similarity=scored[0][0] if scored else None,
            detail="no record with this title in any source", errors=errors)

    sim, best = scored[0]
    if sim >= AUTO_VERIFY_SIMILARITY:
        bad_fields = metadata_disagreements(entry, best)
        if len(bad_fields) >= 2:
            return ResolutionRecord(
                key=entry.key, status="hallucinated", sub_code="RF-2",
                method="title-exact", similarity=sim, matched=best,
                detail=f"real record, but {', '.join(bad_fields)} disagree",
                errors=errors)
        return ResolutionRecord(
            key=entry.key, status="verified", method="title-exact",
            similarity=sim, matched=best, errors=errors)

    if judge is not None:
        same = _judge_same_work(judge, entry, best)
        if same is True:
            bad_fields = metadata_disagreements(entry, best)
            if len(bad_fields) >= 2:
                return ResolutionRecord(
                    key=entry.key, status="hallucinated", sub_code="RF-2",
                    method="title-judged", similarity=sim, matched=best,
                    detail=f"real record, but {', '.join(bad_fields)} disagree",
                    errors=errors)
            return ResolutionRecord(
                key=entry.key, status="verified", method="title-judged",
                similarity=sim, matched=best, detail="judged same work",
                errors=errors)
        if same is False:
            return ResolutionRecord(
                key=entry.key, status="hallucinated", sub_code="RF-1",
                similarity=sim, matched=best,
                detail="closest record judged to be a different work",
                errors=errors)
    return ResolutionRecord(
        key=entry.key, status="unresolved", similarity=sim, matched=best,
        detail="ambiguous title match, no judge decision", errors=errors)


def classify_reference(res: ResolutionRecord) -> Optional[str]:
    """RF sub-code for a resolution: RF-2 when a real record was matched,
    RF-1 when nothing matched; None for verified or unresolved entries."""
    if res.status != "hallucinated":
        return None
    if res.sub_code:
        return res.sub_code
    return "RF-2" if res.matched is not None else "RF-1"


def audit_bibliography(entries: list[BibEntry], clients: ClientSet,
                       judge: Optional[JudgeBackend] = None,
                       ) -> list[ResolutionRecord]:
    """Resolve every entry exactly once, preserving bibliography order."""
    records = []
    for entry in entries:
        res = resolve_entry(entry, clients, judge)
        res.sub_code = classify_reference(res)
        records.append(res)
    return records
