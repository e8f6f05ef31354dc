"""Judged-decision plumbing: backends, single queries and majority votes.

Every subjective call in the audit goes through one narrow interface: a
JudgeRequest naming a prompt template, bindings and the JSON fields the
answer must contain. Backends are interchangeable; the scripted one replays
recorded verdicts keyed by request fingerprint so whole audits run
deterministically offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol

from .errors import (
    JudgeTransportError,
    MalformedVerdictError,
    ScriptedFixtureMissError,
    VoteError,
)

logger = logging.getLogger(__name__)

RUN_INDEX_BINDING = "run_index"

_TEMPLATE_DIR = Path(__file__).parent / "templates"


@dataclass(frozen=True)
class JudgeRequest:
    """One question for the judge.

    expected_schema lists the fields the JSON answer must contain; allowed
    restricts the values of enum-like fields. The reserved run_index
    binding distinguishes vote repetitions and is excluded from the
    fingerprint so one recorded fixture can answer a whole vote.
    """

    template_id: str
    bindings: dict[str, str] = field(default_factory=dict)
    expected_schema: tuple[str, ...] = ("flag",)
    allowed: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def fingerprint(self) -> str:
        payload = {
            "template": self.template_id,
            "bindings": {k: v for k, v in sorted(self.bindings.items())
                         if k != RUN_INDEX_BINDING},
            "schema": sorted(self.expected_schema),
        }
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def run_index(self) -> int:
        try:
            return int(self.bindings.get(RUN_INDEX_BINDING, "0"))
        except ValueError:
            return 0


@dataclass
class JudgeVerdict:
    """A parsed judge answer. malformed=True means an abstention."""

    flag: bool = False
    category: Optional[str] = None
    rationale: Optional[str] = None
    malformed: bool = False
    data: dict = field(default_factory=dict)
    raw: Optional[str] = None


@dataclass
class VoteResult:
    """Outcome of k independent queries on one request."""

    k: int
    flags: int
    threshold: int
    majority: bool
    verdicts: list[JudgeVerdict] = field(default_factory=list)

    @property
    def malformed(self) -> int:
        return sum(1 for v in self.verdicts if v.malformed)


def vote_threshold(k: int) -> int:
    """Strict majority: floor(k/2) + 1 flags carry the vote."""
    return k // 2 + 1


# ---------------------------------------------------------------------------
# Templates


_PLACEHOLDER_RE = re.compile(r"\$\{?([A-Za-z_][A-Za-z0-9_]*)\}?")


def render_template(template_id: str, bindings: dict[str, str],
                    templates_dir: Optional[Path] = None) -> str:
    """Fill the named prompt template; every placeholder must be bound."""
    directory = templates_dir or _TEMPLATE_DIR
    path = directory / f"{template_id}.txt"
    if not path.is_file():
        have = sorted(p.stem for p in directory.glob("*.txt"))
        raise ValueError(f"no template '{template_id}' (have: {', '.join(have)})")
    source = path.read_text(encoding="utf-8")
    needed = set(_PLACEHOLDER_RE.findall(source))
    missing = needed - set(bindings)
    if missing:
        raise ValueError(
            f"template '{template_id}' placeholders unbound: {sorted(missing)}")
    return string.Template(source).safe_substitute(bindings)


# ---------------------------------------------------------------------------
# Backends


class JudgeBackend(Protocol):
    name: str

    def complete(self, request: JudgeRequest, prompt: str) -> str:
        """Return the raw model answer for a rendered prompt."""
        ...


class ScriptedBackend:
    """Replays recorded verdicts.

    Fixtures map a request fingerprint (or the fallback key
    "template:<template_id>") to a verdict object, a raw JSON string, or a
    list of either; lists are cycled by run_index so split votes can be
    scripted.
    """

    name = "scripted"

    def __init__(self, fixtures: dict | str | Path | None = None):
        if isinstance(fixtures, (str, Path)):
            fixtures = json.loads(Path(fixtures).read_text(encoding="utf-8"))
        self.fixtures: dict = dict(fixtures or {})

    def complete(self, request: JudgeRequest, prompt: str) -> str:
        entry = self.fixtures.get(request.fingerprint())
        if entry is None:
            entry = self.fixtures.get(f"template:{request.template_id}")
        if entry is None:
            raise ScriptedFixtureMissError(
                f"no fixture for {request.template_id} "
                f"({request.fingerprint()[:12]})")
        if isinstance(entry, list):
            if not entry:
                raise ScriptedFixtureMissError(
                    f"empty fixture list for {request.template_id}")
            entry = entry[request.run_index() % len(entry)]
        if isinstance(entry, str):
            return entry
        return json.dumps(entry)


class RemoteBackend:
    """Minimal JSON-over-HTTP chat backend.

    Speaks the common chat-completions shape; the credential is read from
    an environment variable at call time, never stored.
    """

    name = "remote"

    def __init__(self, model: str, endpoint: str,
                 credential_env: str = "JUDGE_API_KEY",
                 timeout_s: float = 60.0, session=None):
        self.model = model
        self.endpoint = endpoint
        self.credential_env = credential_env
        self.timeout_s = timeout_s
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def complete(self, request: JudgeRequest, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.credential_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 1.0,
        }
        try:
            resp = self._session.post(self.endpoint, json=body,
                                      headers=headers, timeout=self.timeout_s)
        except Exception as exc:
            raise JudgeTransportError(f"judge endpoint unreachable: {exc}")
        if resp.status_code >= 500:
            raise JudgeTransportError(f"judge endpoint HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise MalformedVerdictError(
                f"judge endpoint HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            return payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedVerdictError(f"unexpected response shape: {exc}")


# ---------------------------------------------------------------------------
# Query and vote


def _extract_json(text: str) -> dict:
    """First JSON object embedded in the answer, prose tolerated around it."""
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise ValueError("no JSON object in answer")


def _validate(request: JudgeRequest, obj: dict) -> JudgeVerdict:
    for fieldname in request.expected_schema:
        if fieldname not in obj:
            raise ValueError(f"answer missing field '{fieldname}'")
    for fieldname, values in request.allowed.items():
        if fieldname in obj and obj[fieldname] is not None:
            if str(obj[fieldname]) not in values:
                raise ValueError(
                    f"field '{fieldname}' value {obj[fieldname]!r} not in "
                    f"{sorted(values)}")
    flag = obj.get("flag", False)
    if "flag" in request.expected_schema and not isinstance(flag, bool):
        if isinstance(flag, str) and flag.lower() in ("true", "false"):
            flag = flag.lower() == "true"
        else:
            raise ValueError(f"flag is not a boolean: {flag!r}")
    category = obj.get("category")
    return JudgeVerdict(
        flag=bool(flag),
        category=str(category) if category is not None else None,
        rationale=obj.get("rationale"),
        data=obj,
    )


def query(backend: JudgeBackend, request: JudgeRequest,
          templates_dir: Optional[Path] = None) -> JudgeVerdict:
    """One judged decision: render, ask, parse, validate; retry once on a
    schema-invalid answer, then raise MalformedVerdictError."""
    prompt = render_template(request.template_id, request.bindings,
                             templates_dir)
    last_error = None
    raw = None
    for attempt in range(2):
        try:
            raw = backend.complete(request, prompt)
        except JudgeTransportError:
            if attempt == 0:
                continue
            raise
        try:
            obj = _extract_json(raw)
            verdict = _validate(request, obj)
            verdict.raw = raw
            return verdict
        except ValueError as exc:
            last_error = exc
            logger.debug("malformed verdict (attempt %d): %s", attempt + 1, exc)
    raise MalformedVerdictError(f"{last_error} (raw: {str(raw)[:200]})")


def majority_vote(backend: JudgeBackend, request: JudgeRequest, k: int = 5,
                  templates_dir: Optional[Path] = None) -> VoteResult:
    """Ask the same question k times; flags at or above floor(k/2)+1 carry.

    Malformed answers and fixture misses count toward k but never toward
    flags. If every verdict is unusable there is no decision to report and
    a VoteError is raised.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    verdicts: list[JudgeVerdict] = []
    for i in range(k):
        run_request = replace(
            request, bindings={**request.bindings, RUN_INDEX_BINDING: str(i)})
        try:
            verdicts.append(query(backend, run_request, templates_dir))
        except (MalformedVerdictError, ScriptedFixtureMissError) as exc:
            verdicts.append(JudgeVerdict(malformed=True, rationale=str(exc)))
    usable = [v for v in verdicts if not v.malformed]
    if not usable:
        raise VoteError(f"no usable verdicts in {k} queries "
                        f"for '{request.template_id}'")
    flags = sum(1 for v in usable if v.flag)
    threshold = vote_threshold(k)
    return VoteResult(k=k, flags=flags, threshold=threshold,
                      majority=flags >= threshold, verdicts=verdicts)
