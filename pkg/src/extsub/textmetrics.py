"""n-gram repetition (rep-n) for spotting degenerate generations."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IoFailure, MalformedLine

DEFAULT_THRESHOLD = 20.0


def rep_n(tokens: list[str], n: int = 4) -> float:
    """Percentage of duplicated n-grams: ``100 * (1 - unique / total)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    grams = [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
    if not grams:
        return 0.0
    return 100.0 * (1.0 - len(set(grams)) / len(grams))


@dataclass
class RepScore:
    n: int
    per_text: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return sum(self.per_text) / len(self.per_text) if self.per_text else 0.0

    def summary(self, threshold: float = DEFAULT_THRESHOLD) -> dict:
        return {
            "n": self.n,
            "count": len(self.per_text),
            "mean": self.mean,
            "max": max(self.per_text, default=0.0),
            "over_threshold_count": sum(1 for s in self.per_text if s >= threshold),
        }


def read_texts(path: str | os.PathLike, fmt: str = "auto") -> list[str]:
    """One response per line; JSON-lines records carry it in ``"text"``.

    ``fmt="auto"`` picks JSON-lines for ``.jsonl`` files.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}", path=str(path)) from exc
    if fmt == "auto":
        fmt = "jsonl" if path.suffix == ".jsonl" else "lines"
    if fmt == "lines":
        return raw.splitlines()
    if fmt != "jsonl":
        raise ValueError(f"unknown format {fmt!r}")

    texts = []
    for lineno, line in enumerate(raw.splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(f"{path}:{lineno}: {exc.msg}", line=lineno) from exc
        if not isinstance(record, dict) or not isinstance(record.get("text"), str):
            raise MalformedLine(f'{path}:{lineno}: expected an object with a "text" string', line=lineno)
        texts.append(record["text"])
    return texts


def score_texts(texts: list[str], n: int = 4) -> RepScore:
    return RepScore(n, [rep_n(t.split(), n) for t in texts])


def score_file(path: str | os.PathLike, n: int = 4, tokenizer: str = "whitespace", fmt: str = "auto") -> RepScore:
    if tokenizer != "whitespace":
        raise ValueError(f"unsupported tokenizer {tokenizer!r}")
    return score_texts(read_texts(path, fmt), n)
