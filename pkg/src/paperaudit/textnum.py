"""Text and number primitives shared by the claim checks.

Tokenisation, numeric token extraction, metric-name normalisation and
math-aware sentence segmentation live here so that the native verifier and
the forensic scan agree on what counts as a number or a content word.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

NUMBER_RE = re.compile(
    r"(?<![\w.])[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?(?![\w.])"
)

# Bracketed runs of integers ("[12]", "[3, 7]") are citation markers, not data.
_CITE_BRACKET_RE = re.compile(r"\[\s*\d+(?:\s*,\s*\d+)*\s*\]")

_WORD_RE = re.compile(r"[a-z0-9]+(?:[-_][a-z0-9]+)*")

STOPWORDS = frozenset(
    """a an and are as at be been but by for from has have in is it its of on
    or our than that the their this to was we were which will with using use
    used between both each into over under during against through about
    while where when then also more most other some such only same so can may
    these those not no do does did done if out up new""".split()
)

_COMPARISON_WORDS = (
    "outperform",
    "outperforms",
    "outperformed",
    "exceeds",
    "exceed",
    "improves",
    "improve",
    "improvement",
    "faster",
    "slower",
    "better",
    "worse",
    "higher",
    "lower",
    "reduces",
    "reduction",
    "gains",
)


@dataclass(frozen=True)
class NumberToken:
    """A numeric literal found in text, with its source span."""

    value: float
    text: str
    start: int
    end: int

    @property
    def is_bare_year(self) -> bool:
        return self.text.isdigit() and 1900 <= int(self.text) <= 2099


def extract_numbers(text: str) -> list[NumberToken]:
    """All numeric tokens in *text*, in order of appearance."""
    out = []
    for m in NUMBER_RE.finditer(text):
        try:
            value = float(m.group())
        except ValueError:  # pragma: no cover - regex should prevent this
            continue
        out.append(NumberToken(value, m.group(), m.start(), m.end()))
    return out


def extract_claim_numbers(sentence: str) -> list[NumberToken]:
    """Numeric tokens eligible as claim values.

    Bare years (1900-2099) and integers inside citation brackets are
    excluded; they are dates and reference markers, not results.
    """
    cite_spans = [m.span() for m in _CITE_BRACKET_RE.finditer(sentence)]
    out = []
    for tok in extract_numbers(sentence):
        if tok.is_bare_year:
            continue
        if any(s <= tok.start and tok.end <= e for s, e in cite_spans):
            continue
        out.append(tok)
    return out


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens with punctuation stripped."""
    return _WORD_RE.findall(text.lower())


def normalize_metric_token(token: str) -> str:
    """Fold case, punctuation and trivial plurals ("scores" -> "score")."""
    tok = "".join(_WORD_RE.findall(token.lower()))
    if len(tok) > 3 and tok.endswith("s") and not tok.endswith("ss"):
        tok = tok[:-1]
    return tok


def content_words(text: str) -> set[str]:
    """Distinct non-stopword, non-numeric tokens."""
    return {
        t for t in tokenize(text)
        if t not in STOPWORDS and not t.replace("-", "").isdigit()
    }


def has_comparison_language(sentence: str) -> bool:
    low = sentence.lower()
    return any(w in low for w in _COMPARISON_WORDS)


def rel_gap(candidate: float, reference: float) -> float:
    """|candidate - reference| / |reference|; inf when only reference is 0."""
    if reference == 0:
        return 0.0 if candidate == 0 else float("inf")
    return abs(candidate - reference) / abs(reference)


def strip_tex_comments(text: str) -> str:
    """Drop unescaped %-comments, keeping literal \\% in place."""
    return re.sub(r"(?<!\\)%[^\n]*", "", text)


_ABBREVIATIONS = ("et al", "fig", "eq", "vs", "i.e", "e.g", "cf", "sec", "tab")


def split_sentences(text: str) -> list[str]:
    """Split on sentence punctuation outside math spans.

    Inline and display math ($..$, \\(..\\), \\[..\\]) never contribute
    boundaries, and a period between digits is a decimal point, not a stop.
    """
    sentences = []
    buf = []
    in_dollar = False
    in_paren_math = False
    in_bracket_math = False
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\\" and i + 1 < n:
            nxt = text[i + 1]
            if nxt == "(":
                in_paren_math = True
            elif nxt == ")":
                in_paren_math = False
            elif nxt == "[":
                in_bracket_math = True
            elif nxt == "]":
                in_bracket_math = False
            buf.append(text[i : i + 2])
            i += 2
            continue
        in_math = in_dollar or in_paren_math or in_bracket_math
        if ch == "$":
            in_dollar = not in_dollar
            buf.append(ch)
            i += 1
            continue
        if ch in ".!?" and not in_math:
            prev_ch = text[i - 1] if i > 0 else ""
            next_ch = text[i + 1] if i + 1 < n else ""
            if ch == "." and prev_ch.isdigit() and next_ch.isdigit():
                buf.append(ch)
                i += 1
                continue
            tail = "".join(buf).rstrip().lower()
            if ch == "." and any(tail.endswith(a) for a in _ABBREVIATIONS):
                buf.append(ch)
                i += 1
                continue
            buf.append(ch)
            sent = "".join(buf).strip()
            if sent:
                sentences.append(sent)
            buf = []
            i += 1
            continue
        buf.append(ch)
        i += 1
    sent = "".join(buf).strip()
    if sent:
        sentences.append(sent)
    return [re.sub(r"\s+", " ", s) for s in sentences]
