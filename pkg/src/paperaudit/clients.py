"""Scholarly index clients with caching, rate limiting and offline replay.

Four sources are queried (Semantic Scholar, arXiv, OpenAlex, Crossref),
all through one cache keyed by (source, query). Every response is written
atomically to the cache before use, so an audit can be re-run with
--offline and produce byte-identical results without touching the network.
A cache miss in offline mode is its own error, distinct from an API
failure.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .errors import ApiError, CacheMissError

logger = logging.getLogger(__name__)

SOURCES = ("semantic_scholar", "arxiv", "openalex", "crossref")

DEFAULT_MIN_INTERVALS = {
    "semantic_scholar": 1.1,
    "arxiv": 3.0,
    "openalex": 0.25,
    "crossref": 1.0,
}

USER_AGENT = "paperaudit/0.1 (research artifact integrity audit)"


@dataclass
class ApiRecord:
    """A bibliographic record normalised across sources."""

    source: str
    title: str
    authors: list[str] = field(default_factory=list)
    year: Optional[int] = None
    venue: Optional[str] = None
    doi: Optional[str] = None
    arxiv_id: Optional[str] = None
    url: Optional[str] = None
    abstract: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "source": self.source, "title": self.title,
            "authors": self.authors, "year": self.year, "venue": self.venue,
            "doi": self.doi, "arxiv_id": self.arxiv_id, "url": self.url,
            "abstract": self.abstract,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ApiRecord":
        return cls(
            source=obj.get("source", ""), title=obj.get("title", ""),
            authors=list(obj.get("authors") or []), year=obj.get("year"),
            venue=obj.get("venue"), doi=obj.get("doi"),
            arxiv_id=obj.get("arxiv_id"), url=obj.get("url"),
            abstract=obj.get("abstract"),
        )


class RateLimiter:
    """Per-source minimum spacing between requests. Thread-safe."""

    def __init__(self, min_intervals: Optional[dict[str, float]] = None,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.min_intervals = dict(min_intervals or DEFAULT_MIN_INTERVALS)
        self._clock = clock
        self._sleep = sleep
        self._last: dict[str, float] = {}
        self._lock = threading.Lock()

    def acquire(self, source: str) -> None:
        interval = self.min_intervals.get(source, 1.0)
        with self._lock:
            now = self._clock()
            last = self._last.get(source)
            if last is not None:
                wait = interval - (now - last)
                if wait > 0:
                    self._sleep(wait)
                    now = self._clock()
            self._last[source] = now


class ResponseCache:
    """Content-addressed response store: one JSON file per (source, query)."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def _path(self, source: str, query_key: str) -> Path:
        digest = hashlib.sha256(query_key.encode("utf-8")).hexdigest()
        return self.root / source / f"{digest}.json"

    def get(self, source: str, query_key: str) -> Optional[dict]:
        path = self._path(source, query_key)
        if not path.is_file():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            logger.warning("unreadable cache file %s; treating as miss", path)
            return None

    def put(self, source: str, query_key: str, payload: dict) -> None:
        path = self._path(source, query_key)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=True, indent=1)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _norm_query_value(kind: str, value: str) -> str:
    value = value.strip()
    if kind == "title":
        value = re.sub(r"\s+", " ", value.lower())
    elif kind == "doi":
        value = value.lower().removeprefix("https://doi.org/").removeprefix("doi:")
    return value


class ScholarlyClient:
    """Shared fetch pipeline: cache, offline gate, limiter, normalise."""

    name = "base"

    def __init__(self, cache: ResponseCache, limiter: RateLimiter,
                 offline: bool = False, session=None, timeout_s: float = 20.0):
        self.cache = cache
        self.limiter = limiter
        self.offline = offline
        self.timeout_s = timeout_s
        self._session = session

    @property
    def session(self):
        if self._session is None:
            import requests

            s = requests.Session()
            s.headers["User-Agent"] = USER_AGENT
            self._session = s
        return self._session

    def lookup(self, kind: str, value: str) -> list[ApiRecord]:
        """Records for an arxiv/doi/title query, cache first."""
        if kind not in ("arxiv", "doi", "title"):
            raise ValueError(f"unknown query kind '{kind}'")
        key = f"{kind}:{_norm_query_value(kind, value)}"
        cached = self.cache.get(self.name, key)
        if cached is not None:
            return [ApiRecord.from_dict(r) for r in cached.get("records", [])]
        if self.offline:
            raise CacheMissError(f"{self.name}: no cached answer for {key}")
        self.limiter.acquire(self.name)
        try:
            records = self._fetch(kind, _norm_query_value(kind, value))
        except (ApiError, CacheMissError):
            raise
        except Exception as exc:
            raise ApiError(f"{self.name}: {exc}")
        self.cache.put(self.name, key,
                       {"query": key, "records": [r.to_dict() for r in records]})
        return records

    def _fetch(self, kind: str, value: str) -> list[ApiRecord]:
        raise NotImplementedError

    def _get_json(self, url: str, params: Optional[dict] = None) -> dict:
        resp = self.session.get(url, params=params, timeout=self.timeout_s)
        if resp.status_code == 404:
            return {}
        if resp.status_code != 200:
            raise ApiError(f"{self.name}: HTTP {resp.status_code} for {url}")
        return resp.json()


class SemanticScholarClient(ScholarlyClient):
    name = "semantic_scholar"
    base = "https://api.semanticscholar.org/graph/v1"
    fields = "title,authors,year,venue,externalIds,abstract,url"

    def _fetch(self, kind: str, value: str) -> list[ApiRecord]:
        if kind == "arxiv":
            data = self._get_json(f"{self.base}/paper/arXiv:{value}",
                                  {"fields": self.fields})
            return [self._norm(data)] if data else []
        if kind == "doi":
            data = self._get_json(f"{self.base}/paper/DOI:{value}",
                                  {"fields": self.fields})
            return [self._norm(data)] if data else []
        data = self._get_json(f"{self.base}/paper/search",
                              {"query": value, "fields": self.fields,
                               "limit": 5})
        return [self._norm(item) for item in data.get("data", [])]

    def _norm(self, item: dict) -> ApiRecord:
        ext = item.get("externalIds") or {}
        return ApiRecord(
            source=self.name, title=item.get("title") or "",
            authors=[a.get("name", "") for a in item.get("authors") or []],
            year=item.get("year"), venue=item.get("venue") or None,
            doi=ext.get("DOI"), arxiv_id=ext.get("ArXiv"),
            url=item.get("url"), abstract=item.get("abstract"),
        )


class ArxivClient(ScholarlyClient):
    name = "arxiv"
    base = "http://export.arxiv.org/api/query"
    _ns = {"atom": "http://www.w3.org/2005/Atom"}

    def _fetch(self, kind: str, value: str) -> list[ApiRecord]:
        if kind == "doi":
            m = re.search(r"10\.48550/arxiv\.(.+)$", value, re.IGNORECASE)
            if not m:
                return []
            return self._fetch("arxiv", m.group(1))
        if kind == "arxiv":
            params = {"id_list": value, "max_results": "1"}
        else:
            params = {"search_query": f'ti:"{value}"', "max_results": "5"}
        resp = self.session.get(self.base, params=params,
                                timeout=self.timeout_s)
        if resp.status_code != 200:
            raise ApiError(f"{self.name}: HTTP {resp.status_code}")
        return self._parse_feed(resp.text)

    def _parse_feed(self, xml_text: str) -> list[ApiRecord]:
        root = ET.fromstring(xml_text)
        out = []
        for entry in root.findall("atom:entry", self._ns):
            title = (entry.findtext("atom:title", "", self._ns) or "").strip()
            if not title:
                continue
            authors = [
                (a.findtext("atom:name", "", self._ns) or "").strip()
                for a in entry.findall("atom:author", self._ns)
            ]
            arxiv_id = None
            ident = entry.findtext("atom:id", "", self._ns) or ""
            m = re.search(r"abs/([0-9.]+\d)", ident)
            if m:
                arxiv_id = re.sub(r"v\d+$", "", m.group(1))
            year = None
            published = entry.findtext("atom:published", "", self._ns) or ""
            if len(published) >= 4 and published[:4].isdigit():
                year = int(published[:4])
            out.append(ApiRecord(
                source=self.name, title=re.sub(r"\s+", " ", title),
                authors=[a for a in authors if a], year=year, venue="arXiv",
                arxiv_id=arxiv_id, url=ident or None,
                abstract=(entry.findtext("atom:summary", "", self._ns) or "").strip()
                or None,
            ))
        return out


class OpenAlexClient(ScholarlyClient):
    name = "openalex"
    base = "https://api.openalex.org"

    def _fetch(self, kind: str, value: str) -> list[ApiRecord]:
        if kind == "arxiv":
            return self._fetch("doi", f"10.48550/arxiv.{value}")
        if kind == "doi":
            data = self._get_json(f"{self.base}/works/https://doi.org/{value}")
            return [self._norm(data)] if data else []
        data = self._get_json(f"{self.base}/works",
                              {"filter": f"title.search:{value}", "per-page": 5})
        return [self._norm(item) for item in data.get("results", [])]

    def _norm(self, item: dict) -> ApiRecord:
        doi = item.get("doi")
        if doi:
            doi = doi.removeprefix("https://doi.org/")
        arxiv_id = None
        for loc in item.get("locations") or []:
            url = (loc.get("landing_page_url") or "")
            m = re.search(r"arxiv\.org/abs/([0-9.]+\d)", url)
            if m:
                arxiv_id = re.sub(r"v\d+$", "", m.group(1))
                break
        venue = None
        primary = item.get("primary_location") or {}
        if primary.get("source"):
            venue = primary["source"].get("display_name")
        return ApiRecord(
            source=self.name, title=item.get("display_name") or "",
            authors=[(a.get("author") or {}).get("display_name", "")
                     for a in item.get("authorships") or []],
            year=item.get("publication_year"), venue=venue, doi=doi,
            arxiv_id=arxiv_id, url=item.get("id"),
        )


class CrossrefClient(ScholarlyClient):
    name = "crossref"
    base = "https://api.crossref.org"

    def _fetch(self, kind: str, value: str) -> list[ApiRecord]:
        if kind == "arxiv":
            return []
        if kind == "doi":
            data = self._get_json(f"{self.base}/works/{value}")
            msg = data.get("message")
            return [self._norm(msg)] if msg else []
        data = self._get_json(f"{self.base}/works",
                              {"query.title": value, "rows": 5})
        items = (data.get("message") or {}).get("items", [])
        return [self._norm(item) for item in items]

    def _norm(self, item: dict) -> ApiRecord:
        titles = item.get("title") or [""]
        year = None
        issued = (item.get("issued") or {}).get("date-parts") or [[]]
        if issued[0]:
            year = issued[0][0]
        authors = []
        for a in item.get("author") or []:
            name = " ".join(x for x in (a.get("given"), a.get("family")) if x)
            if name:
                authors.append(name)
        venue = (item.get("container-title") or [None])[0]
        return ApiRecord(
            source=self.name, title=re.sub(r"\s+", " ", titles[0]),
            authors=authors, year=year, venue=venue, doi=item.get("DOI"),
            url=item.get("URL"),
        )


def cached_get(client: ScholarlyClient, kind: str, value: str) -> list[ApiRecord]:
    """Query one source through its cache. Kept as a plain function so the
    resolution layer does not care which client class it holds."""
    return client.lookup(kind, value)


@dataclass
class ClientSet:
    """The four index clients sharing one cache and limiter."""

    clients: list[ScholarlyClient]

    def __iter__(self):
        return iter(self.clients)

    @classmethod
    def build(cls, cache_dir: Path | str, offline: bool = False,
              session=None, min_intervals: Optional[dict[str, float]] = None,
              timeout_s: float = 20.0) -> "ClientSet":
        cache = ResponseCache(cache_dir)
        limiter = RateLimiter(min_intervals)
        kwargs = dict(cache=cache, limiter=limiter, offline=offline,
                      session=session, timeout_s=timeout_s)
        return cls(clients=[
            SemanticScholarClient(**kwargs),
            ArxivClient(**kwargs),
            OpenAlexClient(**kwargs),
            CrossrefClient(**kwargs),
        ])
