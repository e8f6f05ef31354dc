"""Forensic claim-provenance scan.

For bundles that ship no claim graph, result sentences are recovered from
the paper itself: the text is segmented (math spans kept intact, the
bibliography dropped), each sentence is classified by the judge, and each
numerical result is searched for in the logs. A match needs the metric
name and the value on the same log line within 1% relative; when no
metric name could be extracted, a guarded value-only fallback applies
that refuses to match trivial values (0, 1, 100, small integers, years).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Optional

from .bundle import ArtifactBundle, LogFile
from .errors import (
    CheckError,
    JudgeTransportError,
    MalformedVerdictError,
    ScriptedFixtureMissError,
    VoteError,
)
from .judge import JudgeBackend, JudgeRequest, query
from .textnum import (
    STOPWORDS,
    extract_claim_numbers,
    extract_numbers,
    normalize_metric_token,
    split_sentences,
    strip_tex_comments,
    tokenize,
)

logger = logging.getLogger(__name__)

LABELS = ("numerical_result", "non_result", "ambiguous")

MATCH_TOLERANCE = 0.01

METRIC_LEXICON = frozenset("""
    accuracy f1 bleu rouge auc mse rmse mae latency throughput score cost
    error loss perplexity precision recall reward runtime speedup wer ndcg
    psnr ssim iou map exactmatch em chrf meteor
    """.split())


@dataclass
class CandidateClaim:
    """One classified sentence from the paper body."""

    sentence: str
    label: str
    value: Optional[float] = None
    metric_name: Optional[str] = None
    matched: Optional[bool] = None
    matched_at: Optional[str] = None  # "path:line" when matched

    def to_dict(self) -> dict:
        return {"sentence": self.sentence, "label": self.label,
                "value": self.value, "metric_name": self.metric_name,
                "matched": self.matched, "matched_at": self.matched_at}

    @classmethod
    def from_dict(cls, obj: dict) -> "CandidateClaim":
        return cls(sentence=obj["sentence"], label=obj["label"],
                   value=obj.get("value"), metric_name=obj.get("metric_name"),
                   matched=obj.get("matched"), matched_at=obj.get("matched_at"))


def is_trivial_value(value: float) -> bool:
    """Values too common to support a value-only match."""
    if value in (0.0, 1.0, 100.0):
        return True
    if float(value).is_integer():
        iv = int(value)
        if -10 <= iv <= 10:
            return True
        if 1900 <= iv <= 2099:
            return True
    return False


# ---------------------------------------------------------------------------
# Extraction


_BIBLIOGRAPHY_RE = re.compile(
    r"\\begin\{thebibliography\}.*?\\end\{thebibliography\}", re.DOTALL)
_BIBCMD_RE = re.compile(r"\\bibliography(?:style)?\{[^}]*\}")


def paper_body(tex: str) -> str:
    """The prose the forensic scan should read: comments and the
    bibliography removed."""
    text = strip_tex_comments(tex)
    text = _BIBLIOGRAPHY_RE.sub(" ", text)
    text = _BIBCMD_RE.sub(" ", text)
    return text


def _is_metric_like(raw_token: str) -> bool:
    if not any(c.isalpha() for c in raw_token):
        return False
    norm = normalize_metric_token(raw_token)
    if not norm or norm in STOPWORDS:
        return False
    if norm in METRIC_LEXICON:
        return True
    stripped = re.sub(r"[^A-Za-z]", "", raw_token)
    return len(stripped) >= 2 and stripped.isupper()


def _nearest_metric_token(sentence: str, value_start: int,
                          value_end: int) -> Optional[str]:
    """The metric-like token nearest the value, preferring the preceding
    side on ties."""
    tokens = [(m.group(), m.start(), m.end())
              for m in re.finditer(r"\S+", sentence)]
    before = [t for t in tokens if t[2] <= value_start]
    after = [t for t in tokens if t[1] >= value_end]
    for i in range(max(len(before), len(after))):
        if i < len(before):
            tok = before[len(before) - 1 - i][0]
            if _is_metric_like(tok):
                return tok
        if i < len(after):
            tok = after[i][0]
            if _is_metric_like(tok):
                return tok
    return None


def classify_sentence(judge: JudgeBackend, sentence: str) -> Optional[str]:
    """Judged sentence label; None when the judge could not answer."""
    request = JudgeRequest(
        template_id="forensic_claim_extract",
        bindings={"sentence": sentence},
        expected_schema=("label",),
        allowed={"label": LABELS},
    )
    try:
        verdict = query(judge, request)
    except (MalformedVerdictError, ScriptedFixtureMissError,
            JudgeTransportError, VoteError) as exc:
        logger.debug("sentence classification unavailable: %s", exc)
        return None
    label = verdict.data.get("label")
    return label if label in LABELS else None


def extract_claims(tex: str, judge: JudgeBackend) -> list[CandidateClaim]:
    """Segment the paper body and classify every sentence.

    Sentences the judge marks numerical_result get a deterministic value
    (first non-year, non-citation number) and metric name (nearest
    metric-like token); a result sentence with no extractable value is
    downgraded to ambiguous.
    """
    sentences = split_sentences(paper_body(tex))
    claims: list[CandidateClaim] = []
    answered = 0
    for sentence in sentences:
        if not sentence or len(sentence) < 3:
            continue
        label = classify_sentence(judge, sentence)
        if label is None:
            claims.append(CandidateClaim(sentence=sentence, label="ambiguous"))
            continue
        answered += 1
        if label != "numerical_result":
            claims.append(CandidateClaim(sentence=sentence, label=label))
            continue
        numbers = extract_claim_numbers(sentence)
        if not numbers:
            claims.append(CandidateClaim(sentence=sentence, label="ambiguous"))
            continue
        tok = numbers[0]
        metric = _nearest_metric_token(sentence, tok.start, tok.end)
        claims.append(CandidateClaim(
            sentence=sentence, label="numerical_result", value=tok.value,
            metric_name=metric))
    if sentences and claims and answered == 0:
        raise CheckError(
            "forensic extraction: judge answered none of "
            f"{len(sentences)} sentences")
    return claims


# ---------------------------------------------------------------------------
# Matching


@dataclass
class LineFeatures:
    path: str
    lineno: int
    tokens: frozenset[str]
    numbers: tuple[float, ...]


def prepare_log_features(logs: list[LogFile]) -> list[LineFeatures]:
    """Per-line token sets and numbers, computed once per bundle."""
    features = []
    for log in logs:
        for lineno, line in enumerate(log.lines, start=1):
            if not line.strip():
                continue
            features.append(LineFeatures(
                path=log.path, lineno=lineno,
                tokens=frozenset(normalize_metric_token(t)
                                 for t in tokenize(line)),
                numbers=tuple(t.value for t in extract_numbers(line))))
    return features


def _value_close(claim_value: float, log_value: float) -> bool:
    if log_value == 0:
        return claim_value == 0
    return abs(claim_value - log_value) / abs(log_value) <= MATCH_TOLERANCE


def match_evidence(claim: CandidateClaim, logs: list[LogFile],
                   features: Optional[list[LineFeatures]] = None,
                   ) -> CandidateClaim:
    """Search the logs for support for one numerical result.

    With a metric name: some line must carry the normalised metric token
    and a value within 1%. Without one: value-only, but never for trivial
    values. The claim is returned with matched/matched_at filled in.
    """
    if claim.label != "numerical_result" or claim.value is None:
        claim.matched = None
        return claim
    if features is None:
        features = prepare_log_features(logs)
    metric = (normalize_metric_token(claim.metric_name)
              if claim.metric_name else None)
    if not metric:
        if is_trivial_value(claim.value):
            claim.matched = False
            claim.matched_at = None
            return claim
    for lf in features:
        if metric:
            if metric not in lf.tokens:
                continue
        for v in lf.numbers:
            if _value_close(claim.value, v):
                claim.matched = True
                claim.matched_at = f"{lf.path}:{lf.lineno}"
                return claim
    claim.matched = False
    claim.matched_at = None
    return claim


def forensic_rate(claims: list[CandidateClaim]) -> Optional[float]:
    """Matched share of numerical_result claims; None when there are none."""
    results = [c for c in claims if c.label == "numerical_result"]
    if not results:
        return None
    matched = sum(1 for c in results if c.matched)
    return matched / len(results)


@dataclass
class ForensicResult:
    claims: list[CandidateClaim] = field(default_factory=list)
    rate: Optional[float] = None

    @property
    def total(self) -> int:
        return sum(1 for c in self.claims if c.label == "numerical_result")

    @property
    def matched(self) -> int:
        return sum(1 for c in self.claims
                   if c.label == "numerical_result" and c.matched)

    def to_dict(self) -> dict:
        return {"claims": [c.to_dict() for c in self.claims],
                "rate": self.rate}

    @classmethod
    def from_dict(cls, obj: dict) -> "ForensicResult":
        return cls(claims=[CandidateClaim.from_dict(c)
                           for c in obj.get("claims") or []],
                   rate=obj.get("rate"))


def forensic_audit(bundle: ArtifactBundle,
                   judge: JudgeBackend) -> ForensicResult:
    """Extract, match and rate in one pass over a bundle."""
    claims = extract_claims(bundle.paper_tex, judge)
    features = prepare_log_features(bundle.logs)
    for claim in claims:
        if claim.label == "numerical_result":
            match_evidence(claim, bundle.logs, features)
    return ForensicResult(claims=claims, rate=forensic_rate(claims))
