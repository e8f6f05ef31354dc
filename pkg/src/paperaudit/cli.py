"""Command line interface.

    paperaudit audit BUNDLE...   full audit, aggregated per system
    paperaudit refs BUNDLE       reference verification only
    paperaudit score BUNDLE      reported-score verification only
    paperaudit cpr BUNDLE        claim-provenance verification only

Exit codes: 0 clean, 1 at least one integrity violation, 2 execution
error (bad configuration, unloadable bundle, or a check that could not
run). Papers in a batch are isolated: one failing bundle never stops the
others.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .bundle import ArtifactBundle, load_bundle
from .claim_verifier import verify_all
from .clients import ClientSet
from .errors import AuditError, BundleLoadError, CheckError, ReportError
from .forensic_cpr import forensic_audit
from .judge import JudgeBackend, RemoteBackend, ScriptedBackend
from .method_alignment import check_alignment
from .report import PaperAudit, aggregate, render
from .scholarly import audit_bibliography
from .score_verify import verify_score
from .spec_violation import check_spec_violation

logger = logging.getLogger(__name__)

ALL_CHECKS = ("score", "spec", "refs", "align", "cpr")

EXIT_CLEAN = 0
EXIT_VIOLATION = 1
EXIT_ERROR = 2


@dataclass
class AuditConfig:
    """Everything the commands need beyond the bundle paths."""

    checks: tuple[str, ...] = ALL_CHECKS
    k: int = 5
    eval_runs: int = 5
    judge_backend: str = "scripted"
    judge_model: str = ""
    judge_endpoint: str = ""
    fixtures: Optional[Path] = None
    offline: bool = False
    cache_dir: Path = field(default_factory=lambda: Path(".paperaudit-cache"))
    jobs: int = 1
    output: Optional[Path] = None
    fmt: str = "table"
    adapter: str = "canonical"
    cpr_floor: Optional[float] = None

    def build_judge(self) -> Optional[JudgeBackend]:
        if self.judge_backend == "none":
            return None
        if self.judge_backend == "scripted":
            return ScriptedBackend(self.fixtures)
        if self.judge_backend == "remote":
            if self.offline:
                raise AuditError(
                    "--offline requires a scripted judge backend")
            if not self.judge_model or not self.judge_endpoint:
                raise AuditError(
                    "remote judge needs --judge-model and --judge-endpoint")
            return RemoteBackend(self.judge_model, self.judge_endpoint)
        raise AuditError(f"unknown judge backend '{self.judge_backend}'")


def audit_one(bundle: ArtifactBundle, config: AuditConfig,
              judge: Optional[JudgeBackend],
              clients: Optional[ClientSet]) -> PaperAudit:
    """Run the selected checks on one loaded bundle."""
    audit = PaperAudit(
        paper_id=bundle.paper_id, system=bundle.system, seed=bundle.seed,
        task_id=bundle.task.task_id)
    if "score" in config.checks:
        try:
            audit.i1 = verify_score(bundle, judge, n=config.eval_runs)
        except AuditError as exc:
            audit.check_errors["score"] = str(exc)
    if "spec" in config.checks:
        if judge is None:
            audit.check_errors["spec"] = "no judge backend configured"
        else:
            try:
                audit.i2 = check_spec_violation(bundle, judge, k=config.k)
            except AuditError as exc:
                audit.check_errors["spec"] = str(exc)
    if "refs" in config.checks and clients is not None:
        try:
            audit.i3 = audit_bibliography(bundle.bib, clients, judge)
        except AuditError as exc:
            audit.check_errors["refs"] = str(exc)
    if "align" in config.checks:
        if judge is None:
            audit.check_errors["align"] = "no judge backend configured"
        else:
            try:
                i1_category = audit.i1.category if audit.i1 else None
                audit.i4 = check_alignment(bundle, judge, k=config.k,
                                           i1_category=i1_category)
            except AuditError as exc:
                audit.check_errors["align"] = str(exc)
    if "cpr" in config.checks:
        try:
            if bundle.claims is not None:
                _, audit.cpr_native = verify_all(bundle.claims, bundle, judge)
            elif judge is not None:
                audit.cpr_forensic = forensic_audit(bundle, judge)
            else:
                audit.check_errors["cpr"] = (
                    "no claim graph and no judge backend for the forensic scan")
        except AuditError as exc:
            audit.check_errors["cpr"] = str(exc)
    return audit


def cmd_audit(config: AuditConfig, bundle_dirs: list[Path]) -> int:
    """Audit a batch of bundles and render the aggregate report."""
    try:
        judge = config.build_judge()
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    clients = None
    if "refs" in config.checks:
        clients = ClientSet.build(config.cache_dir, offline=config.offline)

    had_error = False
    audits: list[PaperAudit] = []

    def run_one(path: Path) -> PaperAudit:
        try:
            bundle = load_bundle(path, adapter=config.adapter)
        except BundleLoadError as exc:
            return PaperAudit(
                paper_id=str(path), system="unknown", seed=0, task_id="",
                check_errors={"load": str(exc)})
        return audit_one(bundle, config, judge, clients)

    if config.jobs > 1 and len(bundle_dirs) > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            audits = list(pool.map(run_one, bundle_dirs))
    else:
        audits = [run_one(p) for p in bundle_dirs]

    for audit in audits:
        if audit.check_errors:
            had_error = True
            for check, msg in sorted(audit.check_errors.items()):
                print(f"error: {audit.paper_id}: {check}: {msg}",
                      file=sys.stderr)

    try:
        summaries = aggregate(audits)
        text = render(summaries, audits, fmt=config.fmt,
                      judge_backend=config.judge_backend)
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _emit(text, config.output)
    if had_error:
        return EXIT_ERROR
    if any(a.has_violation(config.cpr_floor) for a in audits):
        return EXIT_VIOLATION
    return EXIT_CLEAN


def cmd_refs(config: AuditConfig, bundle_dir: Path) -> int:
    """Reference verification for a single bundle."""
    try:
        judge = config.build_judge()
        bundle = load_bundle(bundle_dir, adapter=config.adapter)
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    clients = ClientSet.build(config.cache_dir, offline=config.offline)
    records = audit_bibliography(bundle.bib, clients, judge)
    doc = {
        "schema_version": 1,
        "paper_id": bundle.paper_id,
        "records": [r.to_dict() for r in records],
        "hallucinated": sum(1 for r in records if r.status == "hallucinated"),
        "verified": sum(1 for r in records if r.status == "verified"),
        "unresolved": sum(1 for r in records if r.status == "unresolved"),
    }
    _emit(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=True) + "\n",
          config.output)
    return EXIT_VIOLATION if doc["hallucinated"] else EXIT_CLEAN


def cmd_score(config: AuditConfig, bundle_dir: Path) -> int:
    """Reported-score verification for a single bundle."""
    try:
        judge = config.build_judge()
        bundle = load_bundle(bundle_dir, adapter=config.adapter)
        verdict = verify_score(bundle, judge, n=config.eval_runs)
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    doc = {"schema_version": 1, "paper_id": bundle.paper_id,
           "verdict": verdict.to_dict()}
    _emit(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=True) + "\n",
          config.output)
    if verdict.status == "skipped":
        print("skipped: task marked not score-reproducible", file=sys.stderr)
        return EXIT_CLEAN
    return EXIT_VIOLATION if verdict.status == "mismatch" else EXIT_CLEAN


def cmd_cpr(config: AuditConfig, bundle_dir: Path) -> int:
    """Claim-provenance verification for a single bundle."""
    try:
        judge = config.build_judge()
        bundle = load_bundle(bundle_dir, adapter=config.adapter)
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    doc: dict = {"schema_version": 1, "paper_id": bundle.paper_id}
    rate: Optional[float] = None
    try:
        if bundle.claims is not None:
            verdicts, summary = verify_all(bundle.claims, bundle, judge)
            doc["mode"] = "native"
            doc["summary"] = summary.to_dict()
            doc["verdicts"] = [v.to_dict() for v in verdicts]
            rate = summary.rate
        else:
            if judge is None:
                print("error: no claim graph and no judge backend",
                      file=sys.stderr)
                return EXIT_ERROR
            result = forensic_audit(bundle, judge)
            doc["mode"] = "forensic"
            doc["summary"] = {"total": result.total,
                              "matched": result.matched,
                              "rate": result.rate}
            doc["claims"] = [c.to_dict() for c in result.claims]
            rate = result.rate
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _emit(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=True) + "\n",
          config.output)
    if (config.cpr_floor is not None and rate is not None
            and rate < config.cpr_floor):
        return EXIT_VIOLATION
    return EXIT_CLEAN


def _emit(text: str, output: Optional[Path]) -> None:
    if output is None:
        sys.stdout.write(text)
    else:
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Argument parsing


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checks", default=",".join(ALL_CHECKS),
                   help="comma list from score,spec,refs,align,cpr")
    p.add_argument("--k", type=int, default=5,
                   help="judges per majority vote")
    p.add_argument("--eval-runs", type=int, default=5,
                   help="evaluator reruns for score verification")
    p.add_argument("--judge-backend", default="scripted",
                   choices=["scripted", "remote", "none"])
    p.add_argument("--judge-model", default="",
                   help="model id for the remote judge")
    p.add_argument("--judge-endpoint", default="",
                   help="chat-completions endpoint for the remote judge")
    p.add_argument("--fixtures", type=Path, default=None,
                   help="scripted judge fixture file (JSON)")
    p.add_argument("--offline", action="store_true",
                   help="answer scholarly queries from the cache only")
    p.add_argument("--cache-dir", type=Path,
                   default=Path(".paperaudit-cache"))
    p.add_argument("--jobs", type=int, default=1,
                   help="bundles audited in parallel")
    p.add_argument("--output", type=Path, default=None,
                   help="write the report here instead of stdout")
    p.add_argument("--format", dest="fmt", default=None,
                   choices=["table", "structured", "json", "text"])
    p.add_argument("--adapter", default="canonical",
                   help="bundle layout adapter")
    p.add_argument("--cpr-floor", type=float, default=None,
                   help="claim pass rate below this is a violation")
    p.add_argument("-v", "--verbose", action="store_true")


def _to_config(args: argparse.Namespace, default_fmt: str) -> AuditConfig:
    checks = tuple(c.strip() for c in args.checks.split(",") if c.strip())
    for c in checks:
        if c not in ALL_CHECKS:
            raise AuditError(f"unknown check '{c}' "
                             f"(have: {', '.join(ALL_CHECKS)})")
    return AuditConfig(
        checks=checks, k=args.k, eval_runs=args.eval_runs,
        judge_backend=args.judge_backend, judge_model=args.judge_model,
        judge_endpoint=args.judge_endpoint, fixtures=args.fixtures,
        offline=args.offline, cache_dir=args.cache_dir, jobs=args.jobs,
        output=args.output, fmt=args.fmt or default_fmt,
        adapter=args.adapter, cpr_floor=args.cpr_floor)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paperaudit",
        description="Integrity audit for research paper artifact bundles")
    parser.add_argument("--version", action="version",
                        version=f"paperaudit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_audit = sub.add_parser("audit", help="run the full audit on bundles")
    p_audit.add_argument("bundles", nargs="+", type=Path)
    _common_flags(p_audit)

    for name, doc in (("refs", "verify references only"),
                      ("score", "verify the reported score only"),
                      ("cpr", "verify claim provenance only")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("bundle", type=Path)
        _common_flags(p)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "audit":
            config = _to_config(args, default_fmt="table")
            return cmd_audit(config, args.bundles)
        config = _to_config(args, default_fmt="json")
        if args.command == "refs":
            return cmd_refs(config, args.bundle)
        if args.command == "score":
            return cmd_score(config, args.bundle)
        if args.command == "cpr":
            return cmd_cpr(config, args.bundle)
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
