"""QA record handling, keyword filtering and normalised judge-score aggregation.

A judge score ``s`` in 1..5 maps to ``(s - 1) / 4`` on a 0..100 percent scale;
a set of records scores the mean of that.  Reports break the score down by the
twelve question categories, average categories within each subset (N, O, D)
and average all present categories for the overall figure.  Sums are kept as
exact integers until the final division, so record order never matters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

SUBSET_CATEGORIES = {
    "N": ("N1", "N2", "N3", "N4"),
    "O": ("O1", "O2", "O3"),
    "D": ("D1", "D2", "D3", "D4", "D5"),
}
CATEGORIES = tuple(c for cats in SUBSET_CATEGORIES.values() for c in cats)
SCORE_MIN, SCORE_MAX = 1, 5


class RecordError(ValueError):
    """Malformed QA record; ``line`` is the 1-based JSONL line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class QARecord:
    id: str
    category: str
    question: str
    answer: str
    prediction: str | None = None
    score: int | None = None

    def __post_init__(self):
        for name in ("id", "category", "question", "answer"):
            if not isinstance(getattr(self, name), str):
                raise RecordError(f"{name}: expected a string")
        if self.category not in CATEGORIES:
            raise RecordError(f"category: {self.category!r} is not one of {', '.join(CATEGORIES)}")
        if self.prediction is not None and not isinstance(self.prediction, str):
            raise RecordError("prediction: expected a string")
        if self.score is not None:
            if not isinstance(self.score, int) or isinstance(self.score, bool):
                raise RecordError(f"score: expected an integer, got {self.score!r}")
            if not SCORE_MIN <= self.score <= SCORE_MAX:
                raise RecordError(f"score: {self.score} outside {SCORE_MIN}..{SCORE_MAX}")

    @classmethod
    def from_json(cls, obj, line: int | None = None) -> "QARecord":
        if not isinstance(obj, dict):
            raise RecordError("expected a JSON object", line)
        known = {"id", "category", "question", "answer", "prediction", "score"}
        extra = sorted(set(obj) - known)
        if extra:
            raise RecordError(f"unknown field(s): {', '.join(extra)}", line)
        missing = [k for k in ("id", "category", "question", "answer") if k not in obj]
        if missing:
            raise RecordError(f"{missing[0]}: missing", line)
        try:
            return cls(**obj)
        except RecordError as exc:
            raise RecordError(str(exc), line) from None

    def to_json(self) -> dict:
        out = {"id": self.id, "category": self.category, "question": self.question, "answer": self.answer}
        if self.prediction is not None:
            out["prediction"] = self.prediction
        if self.score is not None:
            out["score"] = self.score
        return out


def parse_jsonl(text: str) -> list[QARecord]:
    records = []
    for n, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RecordError(f"invalid JSON ({exc.msg})", n) from None
        records.append(QARecord.from_json(obj, n))
    return records


def read_jsonl(path) -> list[QARecord]:
    return parse_jsonl(Path(path).read_text(encoding="utf-8"))


def write_jsonl(path, rows) -> None:
    """Write records (or plain dicts) one JSON object per line."""
    lines = [json.dumps(r.to_json() if isinstance(r, QARecord) else r, ensure_ascii=False) for r in rows]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# scoring


def score_fraction(records) -> Fraction:
    """Exact normalised score in percent."""
    records = list(records)
    if not records:
        raise EmptyInputError("cannot score an empty record list")
    total = 0
    for r in records:
        if r.score is None:
            raise RecordError(f"record {r.id!r} has no score")
        total += r.score - SCORE_MIN
    return Fraction(100 * total, (SCORE_MAX - SCORE_MIN) * len(records))


def normalize_scores(records) -> float:
    return float(score_fraction(records))


def _mean(values) -> float | None:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return float(sum(present, Fraction(0)) / len(present))


@dataclass
class ScoreReport:
    scores: dict[str, float | None]
    counts: dict[str, int]
    subset_avg: dict[str, float | None]
    avg: float | None
    record_mean: float | None
    _exact: dict[str, Fraction] = field(default_factory=dict, repr=False, compare=False)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_json(self) -> dict:
        return {
            "categories": {c: {"score": self.scores[c], "count": self.counts[c]} for c in CATEGORIES},
            "subsets": dict(self.subset_avg),
            "avg": self.avg,
            "record_mean": self.record_mean,
            "total": self.total,
        }

    def to_table(self) -> str:
        cols = list(CATEGORIES) + ["Avg"]

        def fmt(v):
            return "-" if v is None else f"{v:.2f}"

        rows = [
            ["", *cols],
            ["score", *(fmt(self.scores[c]) for c in CATEGORIES), fmt(self.avg)],
            ["count", *(str(self.counts[c]) for c in CATEGORIES), str(self.total)],
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(len(cols) + 1)]
        lines = [
            "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
            for r in rows
        ]
        subsets = "  ".join(f"Avg({s}) {fmt(v)}" for s, v in self.subset_avg.items())
        lines.append(f"{subsets}  record-mean {fmt(self.record_mean)}")
        return "\n".join(lines) + "\n"


def category_report(records) -> ScoreReport:
    """Per-category scores; subset and overall averages are unweighted category means."""
    records = list(records)
    by_cat: dict[str, list[QARecord]] = {c: [] for c in CATEGORIES}
    for r in records:
        by_cat[r.category].append(r)
    exact = {c: score_fraction(rs) for c, rs in by_cat.items() if rs}
    scores = {c: float(exact[c]) if c in exact else None for c in CATEGORIES}
    subset_avg = {s: _mean(exact.get(c) for c in cats) for s, cats in SUBSET_CATEGORIES.items()}
    return ScoreReport(
        scores=scores,
        counts={c: len(by_cat[c]) for c in CATEGORIES},
        subset_avg=subset_avg,
        avg=_mean(exact.get(c) for c in CATEGORIES),
        record_mean=normalize_scores(records) if records else None,
        _exact=exact,
    )


# ---------------------------------------------------------------------------
# filtering


@dataclass(frozen=True)
class FilterSpec:
    keywords: tuple[str, ...] = ()

    def __post_init__(self):
        kws = tuple(self.keywords)
        for k in kws:
            if not isinstance(k, str) or not k.strip():
                raise ValueError("filter keywords must be non-empty strings")
        object.__setattr__(self, "keywords", kws)

    @classmethod
    def parse(cls, text: str) -> "FilterSpec":
        """One keyword per line; ``#`` starts a comment line; blank lines are ignored."""
        kws = []
        for line in text.splitlines():
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                kws.append(stripped)
        return cls(tuple(kws))

    @classmethod
    def load(cls, path) -> "FilterSpec":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Removal:
    record: QARecord
    keyword: str
    field: str

    def to_json(self) -> dict:
        return {**self.record.to_json(), "reason": {"keyword": self.keyword, "field": self.field}}


def filter_records(records, spec: FilterSpec) -> tuple[list[QARecord], list[Removal]]:
    """Drop records whose question or answer contains a keyword (case-insensitive).

    The reason names the first keyword (in file order) that matches, checking
    the question before the answer.
    """
    lowered = [(k, k.casefold()) for k in spec.keywords]
    kept, removed = [], []
    for r in records:
        hit = None
        for kw, low in lowered:
            for name in ("question", "answer"):
                if low in getattr(r, name).casefold():
                    hit = Removal(r, kw, name)
                    break
            if hit:
                break
        if hit:
            removed.append(hit)
        else:
            kept.append(r)
    return kept, removed
