"""Reported-score verification (check I1).

The headline score is extracted from the paper, the bundled evaluator is
re-run n times on a fresh copy of the solver in a scrubbed environment,
and the reported value is compared against the rerun mean under an
adaptive tolerance: max(1%, three relative standard deviations). Failures
are classified, in a fixed order, into value mismatch, metric mismatch or
inversion, cross-stage cherry-picking, evaluator failure, and extraction
failure.

Sub-codes:
  SF-1  genuine discrepancy (including cherry-picked search nodes)
  SF-2  different metric or direction than the task defines
  SF-3  reciprocal of the rerun mean (inverted metric)
  SF-4  every rerun crashed
  SF-5  every rerun timed out
  SF-6  no extractable reported score
"""

from __future__ import annotations

import logging
import os
import re
import shlex
import shutil
import statistics
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .bundle import ArtifactBundle, TaskSpec
from .errors import (
    MalformedVerdictError,
    ScriptedFixtureMissError,
    JudgeTransportError,
    ToleranceUndefinedError,
    VoteError,
)
from .judge import JudgeBackend, JudgeRequest, query
from .textnum import extract_numbers, normalize_metric_token, rel_gap

logger = logging.getLogger(__name__)

SCORE_LINE_RE = re.compile(
    r"^\s*SCORE:\s*([-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\s*$")

MIN_RELATIVE_TOLERANCE = 0.01
SIGMA_MULTIPLIER = 3.0
ZERO_MEAN_FLOOR = 1e-9

DEFAULT_ENV_ALLOWLIST = (
    "PATH", "HOME", "LANG", "LC_ALL", "PYTHONPATH", "TMPDIR", "TEMP", "TMP",
)


@dataclass
class ScoreExtraction:
    """The paper's headline score as far as it could be recovered."""

    value: Optional[float] = None
    metric_name: Optional[str] = None
    direction: str = "unknown"
    source: str = "none"  # judged-tex | judged-pdf | pattern-tex | pattern-pdf
    machine_readable: bool = False
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "value": self.value, "metric_name": self.metric_name,
            "direction": self.direction, "source": self.source,
            "machine_readable": self.machine_readable, "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ScoreExtraction":
        return cls(value=obj.get("value"), metric_name=obj.get("metric_name"),
                   direction=obj.get("direction", "unknown"),
                   source=obj.get("source", "none"),
                   machine_readable=bool(obj.get("machine_readable", False)),
                   notes=list(obj.get("notes") or []))


@dataclass
class EvalRun:
    """One sandboxed evaluator execution."""

    index: int
    outcome: str  # score | crash | timeout
    score: Optional[float] = None
    exit_code: Optional[int] = None
    duration_s: float = 0.0
    stderr_tail: str = ""
    note: str = ""

    def to_dict(self) -> dict:
        return {"index": self.index, "outcome": self.outcome,
                "score": self.score, "exit_code": self.exit_code,
                "duration_s": self.duration_s, "stderr_tail": self.stderr_tail,
                "note": self.note}

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalRun":
        return cls(index=obj["index"], outcome=obj["outcome"],
                   score=obj.get("score"), exit_code=obj.get("exit_code"),
                   duration_s=obj.get("duration_s", 0.0),
                   stderr_tail=obj.get("stderr_tail", ""),
                   note=obj.get("note", ""))


@dataclass
class ReproductionStats:
    """Summary over the n reruns; sigma is the population deviation."""

    n: int
    runs: list[EvalRun] = field(default_factory=list)

    @property
    def scores(self) -> list[float]:
        return [r.score for r in self.runs
                if r.outcome == "score" and r.score is not None]

    @property
    def mean(self) -> Optional[float]:
        s = self.scores
        return statistics.fmean(s) if s else None

    @property
    def sigma(self) -> Optional[float]:
        s = self.scores
        return statistics.pstdev(s) if s else None

    def to_dict(self) -> dict:
        return {"n": self.n, "runs": [r.to_dict() for r in self.runs],
                "mean": self.mean, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, obj: dict) -> "ReproductionStats":
        return cls(n=obj["n"],
                   runs=[EvalRun.from_dict(r) for r in obj.get("runs", [])])


@dataclass
class I1Verdict:
    """match / mismatch / skipped, with the failure taxonomy on mismatch."""

    status: str
    reported: Optional[float] = None
    mean: Optional[float] = None
    sigma: Optional[float] = None
    tolerance: Optional[float] = None
    rel_gap: Optional[float] = None
    category: Optional[str] = None
    sub_code: Optional[str] = None
    detail: str = ""
    extraction: Optional[ScoreExtraction] = None
    stats: Optional[ReproductionStats] = None

    def to_dict(self) -> dict:
        return {
            "status": self.status, "reported": self.reported,
            "mean": self.mean, "sigma": self.sigma,
            "tolerance": self.tolerance, "rel_gap": self.rel_gap,
            "category": self.category, "sub_code": self.sub_code,
            "detail": self.detail,
            "extraction": self.extraction.to_dict() if self.extraction else None,
            "stats": self.stats.to_dict() if self.stats else None,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "I1Verdict":
        ext = obj.get("extraction")
        stats = obj.get("stats")
        return cls(
            status=obj["status"], reported=obj.get("reported"),
            mean=obj.get("mean"), sigma=obj.get("sigma"),
            tolerance=obj.get("tolerance"), rel_gap=obj.get("rel_gap"),
            category=obj.get("category"), sub_code=obj.get("sub_code"),
            detail=obj.get("detail", ""),
            extraction=ScoreExtraction.from_dict(ext) if ext else None,
            stats=ReproductionStats.from_dict(stats) if stats else None,
        )


# ---------------------------------------------------------------------------
# Extraction


def _metric_tokens(metric_name: str) -> set[str]:
    return {normalize_metric_token(t) for t in metric_name.split()} - {""}


_ABSTRACT_RE = re.compile(r"\\begin\{abstract\}(.*?)\\end\{abstract\}",
                          re.DOTALL)
_TABLE_RE = re.compile(r"\\begin\{(?:table|tabular)\*?\}(.*?)"
                       r"\\end\{(?:table|tabular)\*?\}", re.DOTALL)


def pattern_extract(text: str, metric_name: str) -> Optional[float]:
    """Deterministic fallback: the first number adjacent to the metric name,
    searching the abstract, then tables, then the whole text."""
    wanted = _metric_tokens(metric_name)
    if not wanted:
        return None
    regions = [m.group(1) for m in _ABSTRACT_RE.finditer(text)]
    regions += [m.group(1) for m in _TABLE_RE.finditer(text)]
    regions.append(text)
    for region in regions:
        for line in region.split("\n"):
            tokens = {normalize_metric_token(t) for t in line.split()}
            if not (wanted & tokens):
                continue
            numbers = extract_numbers(line)
            numbers = [t for t in numbers if not t.is_bare_year]
            if numbers:
                return numbers[0].value
    return None


def _direction_cue(text: str) -> str:
    low = text.lower()
    if "lower is better" in low:
        return "lower"
    if "higher is better" in low:
        return "higher"
    return "unknown"


def extract_reported_score(bundle: ArtifactBundle,
                           judge: Optional[JudgeBackend] = None,
                           ) -> ScoreExtraction:
    """Recover the paper's headline score for the task metric.

    With a judge, both the LaTeX source and the extracted PDF text are
    asked and LaTeX wins disagreements (with a note). Without one, a
    pattern fallback runs over the same sources.
    """
    metric = bundle.task.metric_name
    if judge is not None:
        tex_ans = _judged_extract(judge, bundle.paper_tex, metric)
        pdf_ans = None
        if bundle.paper_pdf_text:
            pdf_ans = _judged_extract(judge, bundle.paper_pdf_text, metric)
        if tex_ans is not None and tex_ans.get("found"):
            ext = ScoreExtraction(
                value=_as_float(tex_ans.get("value")),
                metric_name=tex_ans.get("metric_name") or metric,
                direction=str(tex_ans.get("direction") or "unknown"),
                source="judged-tex", machine_readable=True)
            if ext.value is None:
                ext.machine_readable = False
                ext.source = "none"
                ext.notes.append("judge found no usable number")
                return ext
            if pdf_ans is not None and pdf_ans.get("found"):
                pdf_value = _as_float(pdf_ans.get("value"))
                if pdf_value is not None and ext.value is not None:
                    if rel_gap(pdf_value, ext.value) > 1e-6:
                        ext.notes.append(
                            f"pdf extraction disagrees (pdf={pdf_value}); "
                            "tex value kept")
            return ext
        if pdf_ans is not None and pdf_ans.get("found"):
            value = _as_float(pdf_ans.get("value"))
            if value is not None:
                return ScoreExtraction(
                    value=value,
                    metric_name=pdf_ans.get("metric_name") or metric,
                    direction=str(pdf_ans.get("direction") or "unknown"),
                    source="judged-pdf", machine_readable=True)
        if tex_ans is not None or pdf_ans is not None:
            return ScoreExtraction(notes=["judge found no reported score"])
        # fall through to the pattern extractor when the judge was unusable

    value = pattern_extract(bundle.paper_tex, metric)
    if value is not None:
        return ScoreExtraction(value=value, metric_name=metric,
                               direction=_direction_cue(bundle.paper_tex),
                               source="pattern-tex", machine_readable=True)
    if bundle.paper_pdf_text:
        value = pattern_extract(bundle.paper_pdf_text, metric)
        if value is not None:
            return ScoreExtraction(value=value, metric_name=metric,
                                   direction=_direction_cue(bundle.paper_pdf_text),
                                   source="pattern-pdf", machine_readable=True)
    return ScoreExtraction(notes=["no number adjacent to the metric name"])


def _as_float(value) -> Optional[float]:
    try:
        return None if value is None else float(value)
    except (TypeError, ValueError):
        return None


def _judged_extract(judge: JudgeBackend, text: str,
                    metric: str) -> Optional[dict]:
    request = JudgeRequest(
        template_id="score_extract",
        bindings={"paper_text": text[:20000], "metric_name": metric},
        expected_schema=("found",),
    )
    try:
        return query(judge, request).data
    except (MalformedVerdictError, ScriptedFixtureMissError,
            JudgeTransportError, VoteError) as exc:
        logger.debug("judged score extraction unavailable: %s", exc)
        return None


# ---------------------------------------------------------------------------
# Evaluator reruns


def parse_score_output(stdout: str) -> Optional[float]:
    """Last stdout line of the form 'SCORE: <real>'."""
    score = None
    for line in stdout.split("\n"):
        m = SCORE_LINE_RE.match(line)
        if m:
            score = float(m.group(1))
    return score


def _materialise_solution(solution: dict[str, str] | Path,
                          dest: Path) -> Path:
    target = dest / "solution"
    if isinstance(solution, Path):
        shutil.copytree(solution, target)
        return target
    for rel, content in solution.items():
        path = target / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
    return target


def run_evaluator(task: TaskSpec, solution: dict[str, str] | Path, n: int = 5,
                  env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST,
                  ) -> ReproductionStats:
    """Run the task evaluator n times, each on a fresh solver copy.

    Each run gets its own scratch directory and an environment reduced to
    the allowlist, so solver state cannot leak between runs and ambient
    variables cannot steer the evaluator.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    stats = ReproductionStats(n=n)
    argv_template = shlex.split(task.evaluator_command)
    env = {k: os.environ[k] for k in env_allowlist if k in os.environ}
    for i in range(n):
        scratch = Path(tempfile.mkdtemp(prefix="paperaudit-eval-"))
        started = time.monotonic()
        try:
            solver_path = _materialise_solution(solution, scratch)
            argv = [a.replace("{solver_path}", str(solver_path))
                    for a in argv_template]
            try:
                proc = subprocess.run(
                    argv, cwd=scratch, env=env, capture_output=True,
                    text=True, timeout=task.timeout_s)
            except subprocess.TimeoutExpired:
                stats.runs.append(EvalRun(
                    index=i, outcome="timeout",
                    duration_s=time.monotonic() - started,
                    note=f"exceeded {task.timeout_s}s"))
                continue
            except OSError as exc:
                stats.runs.append(EvalRun(
                    index=i, outcome="crash", exit_code=None,
                    duration_s=time.monotonic() - started,
                    note=f"could not start evaluator: {exc}"))
                continue
            duration = time.monotonic() - started
            if proc.returncode != 0:
                stats.runs.append(EvalRun(
                    index=i, outcome="crash", exit_code=proc.returncode,
                    duration_s=duration, stderr_tail=proc.stderr[-500:]))
                continue
            score = parse_score_output(proc.stdout)
            if score is None:
                stats.runs.append(EvalRun(
                    index=i, outcome="crash", exit_code=proc.returncode,
                    duration_s=duration, stderr_tail=proc.stderr[-500:],
                    note="no score line on stdout"))
                continue
            stats.runs.append(EvalRun(index=i, outcome="score", score=score,
                                      exit_code=proc.returncode,
                                      duration_s=duration))
        finally:
            shutil.rmtree(scratch, ignore_errors=True)
    return stats


# ---------------------------------------------------------------------------
# Tolerance and verdict


def adaptive_tolerance(mean: float, sigma: float) -> float:
    """max(1%, 3 sigma / |mean|); undefined at mean zero."""
    if mean == 0:
        raise ToleranceUndefinedError("rerun mean is zero")
    return max(MIN_RELATIVE_TOLERANCE, SIGMA_MULTIPLIER * sigma / abs(mean))


def classify_i1_failure(extraction: ScoreExtraction,
                        stats: ReproductionStats, task: TaskSpec,
                        search_metadata: Optional[dict[str, float]] = None,
                        ) -> tuple[str, str, str]:
    """(category, sub_code, detail) for a non-matching verification.

    Decision order: extraction failure, evaluator failure, metric name or
    direction mismatch, reciprocal (inverted metric), cherry-picked search
    node, genuine discrepancy.
    """
    if extraction.value is None:
        return ("paper_score_unavailable", "SF-6",
                "no machine-readable reported score")
    scores = stats.scores
    if not scores:
        failures = [r.outcome for r in stats.runs]
        if failures and all(o == "timeout" for o in failures):
            return ("evaluator_error", "SF-5",
                    f"all {stats.n} reruns timed out")
        return ("evaluator_error", "SF-4", f"all {stats.n} reruns failed")
    mean = stats.mean or 0.0
    sigma = stats.sigma or 0.0
    if extraction.metric_name:
        reported_tokens = _metric_tokens(extraction.metric_name)
        task_tokens = _metric_tokens(task.metric_name)
        if reported_tokens and task_tokens and not (reported_tokens & task_tokens):
            return ("metric_mismatch", "SF-2",
                    f"paper reports '{extraction.metric_name}', task metric "
                    f"is '{task.metric_name}'")
    if extraction.direction != "unknown" and extraction.direction != task.direction:
        return ("metric_mismatch", "SF-2",
                f"paper direction '{extraction.direction}' contradicts task "
                f"'{task.direction}'")
    if mean != 0:
        tol = adaptive_tolerance(mean, sigma)
        reciprocal = 1.0 / mean
        if reciprocal != 0 and rel_gap(extraction.value, reciprocal) <= tol:
            return ("metric_mismatch", "SF-3",
                    f"reported value matches 1/mean ({reciprocal:.6g})")
        for node, score in sorted((search_metadata or {}).items()):
            if node == "selected":
                continue
            if score != 0 and rel_gap(extraction.value, score) <= tol:
                return ("cross_stage_cherry_pick", "SF-1",
                        f"reported value matches non-selected node "
                        f"'{node}' ({score:g})")
    return ("value_mismatch", "SF-1",
            f"reported {extraction.value:g} vs rerun mean {mean:g}")


def verify_score(bundle: ArtifactBundle, judge: Optional[JudgeBackend] = None,
                 n: int = 5,
                 env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST,
                 ) -> I1Verdict:
    """Full I1 pipeline for one bundle."""
    if not bundle.task.score_reproducible:
        return I1Verdict(status="skipped",
                         detail="task marked not score-reproducible")
    extraction = extract_reported_score(bundle, judge)
    stats = run_evaluator(bundle.task, bundle.solution, n=n,
                          env_allowlist=env_allowlist)
    mean = stats.mean
    sigma = stats.sigma
    verdict = I1Verdict(status="mismatch", reported=extraction.value,
                        mean=mean, sigma=sigma, extraction=extraction,
                        stats=stats)
    if extraction.value is not None and mean is not None:
        if mean == 0:
            # Relative tolerance is undefined; fall back to the absolute
            # spread of the reruns plus a tiny floor.
            bound = max((abs(s - mean) for s in stats.scores), default=0.0)
            bound += ZERO_MEAN_FLOOR
            gap = abs(extraction.value - mean)
            verdict.detail = (f"zero-mean fallback: |gap| {gap:g} vs "
                              f"bound {bound:g}")
            if gap <= bound:
                verdict.status = "match"
                return verdict
        else:
            tol = adaptive_tolerance(mean, sigma or 0.0)
            gap = rel_gap(extraction.value, mean)
            verdict.tolerance = tol
            verdict.rel_gap = gap
            if gap <= tol:
                verdict.status = "match"
                return verdict
    category, sub_code, detail = classify_i1_failure(
        extraction, stats, bundle.task, bundle.search_metadata)
    verdict.category = category
    verdict.sub_code = sub_code
    verdict.detail = detail if not verdict.detail else (
        f"{verdict.detail}; {detail}")
    return verdict
