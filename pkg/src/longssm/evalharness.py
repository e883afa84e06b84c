"""Desk-scale evaluation mechanics: perplexity versus length and a passkey
retrieval task over raw token ids.

Perplexity is full-context: the stream is cut into non-overlapping windows
of the requested length, each window runs through the model in one pass, and
the natural-log cross-entropy of every next-token prediction (first target
is the window's second token) is averaged before exponentiating.

The passkey task hides a short key drawn from a reserved id range inside
filler drawn from a disjoint range, appends a query marker scaffold, and
scores generations by exact match and answer-prefix overlap. Disjoint ranges
make the answer occur exactly once by construction; tests verify it by scan.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import ModelBundle
from .runtime import RunMode, forward

__all__ = [
    "PerplexityEntry",
    "PerplexityReport",
    "PasskeyConfig",
    "PasskeyInstance",
    "PasskeyReport",
    "perplexity",
    "gen_passkey",
    "score_passkey",
    "emit_report",
    "read_report",
]


@dataclass(frozen=True)
class PerplexityEntry:
    length: int
    mean_ce: float      # nats
    perplexity: float   # exp(mean_ce)
    token_count: int


@dataclass(frozen=True)
class PerplexityReport:
    mode: str
    entries: list[PerplexityEntry]

    def rows(self):
        for e in self.entries:
            yield (self.mode, e.length, "mean_ce", e.mean_ce)
            yield (self.mode, e.length, "perplexity", e.perplexity)
            yield (self.mode, e.length, "token_count", e.token_count)

    def to_json_dict(self) -> dict:
        return {
            "kind": "perplexity",
            "mode": self.mode,
            "entries": [
                {
                    "length": e.length,
                    "mean_ce": e.mean_ce,
                    "perplexity": e.perplexity,
                    "token_count": e.token_count,
                }
                for e in self.entries
            ],
        }


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def perplexity(model, stream, lengths, mode: RunMode | None = None) -> PerplexityReport:
    """Cross-entropy and perplexity per window length.

    ``model`` is a ModelBundle or any callable mapping a token-id window to
    (L, vocab) logits (fixtures use callables).
    """
    stream = np.asarray(stream)
    lengths = sorted(int(s) for s in lengths)
    if len(stream) < max(lengths):
        raise ValueError(
            f"stream of {len(stream)} tokens is shorter than requested length {max(lengths)}"
        )
    if isinstance(model, ModelBundle):
        run = lambda window: forward(model, window, mode)
    else:
        run = model

    entries = []
    for s in lengths:
        n_windows = len(stream) // s
        total_nll = 0.0
        count = 0
        for w in range(n_windows):
            window = stream[w * s : (w + 1) * s]
            logp = _log_softmax(run(window))
            targets = window[1:]
            total_nll -= logp[np.arange(s - 1), targets].sum()
            count += s - 1
        mean_ce = total_nll / count
        entries.append(
            PerplexityEntry(
                length=s,
                mean_ce=float(mean_ce),
                perplexity=float(np.exp(mean_ce)),
                token_count=count,
            )
        )
    mode_name = mode.variant if isinstance(mode, RunMode) else "vanilla"
    return PerplexityReport(mode=mode_name, entries=entries)


@dataclass(frozen=True)
class PasskeyConfig:
    length: int                        # total stream length S, scaffold included
    key_length: int
    filler_range: tuple[int, int]      # [lo, hi) filler ids
    key_range: tuple[int, int]         # [lo, hi) key ids, disjoint from filler
    marker_id: int                     # query scaffold id, outside both ranges
    scaffold_len: int = 2

    def __post_init__(self):
        if self.key_length <= 0:
            raise ValueError("key_length must be positive")
        if self.length <= self.scaffold_len + self.key_length:
            raise ValueError(
                f"length {self.length} cannot fit key ({self.key_length}) "
                f"plus scaffold ({self.scaffold_len})"
            )
        f_lo, f_hi = self.filler_range
        k_lo, k_hi = self.key_range
        if not (f_lo < f_hi and k_lo < k_hi):
            raise ValueError("empty id range")
        if max(f_lo, k_lo) < min(f_hi, k_hi):
            raise ValueError("filler and key id ranges overlap")
        if f_lo <= self.marker_id < f_hi or k_lo <= self.marker_id < k_hi:
            raise ValueError("marker id collides with filler or key range")


@dataclass(frozen=True)
class PasskeyInstance:
    tokens: np.ndarray
    key_span: tuple[int, int]   # [start, end) of the key inside tokens
    answer: np.ndarray
    seed: int


def gen_passkey(config: PasskeyConfig, seed: int) -> PasskeyInstance:
    """Deterministic instance: filler, one embedded key, query scaffold."""
    rng = np.random.default_rng(seed)
    body_len = config.length - config.scaffold_len
    tokens = rng.integers(*config.filler_range, body_len, dtype=np.int64)
    answer = rng.integers(*config.key_range, config.key_length, dtype=np.int64)
    start = int(rng.integers(0, body_len - config.key_length + 1))
    tokens[start : start + config.key_length] = answer
    tokens = np.concatenate(
        [tokens, np.full(config.scaffold_len, config.marker_id, dtype=np.int64)]
    )
    return PasskeyInstance(
        tokens=tokens,
        key_span=(start, start + config.key_length),
        answer=answer,
        seed=seed,
    )


def score_passkey(generated, instance: PasskeyInstance) -> dict:
    """Exact match of the answer prefix plus common-prefix overlap fraction."""
    generated = np.asarray(generated)
    answer = instance.answer
    n = len(answer)
    prefix = generated[:n]
    lcp = 0
    for a, b in zip(prefix, answer):
        if a != b:
            break
        lcp += 1
    return {"exact": bool(len(prefix) == n and lcp == n), "token_overlap": lcp / n}


@dataclass(frozen=True)
class PasskeyReport:
    mode: str
    length: int
    n_instances: int
    exact_rate: float
    mean_overlap: float

    def rows(self):
        yield (self.mode, self.length, "exact_rate", self.exact_rate)
        yield (self.mode, self.length, "mean_overlap", self.mean_overlap)
        yield (self.mode, self.length, "n_instances", self.n_instances)

    def to_json_dict(self) -> dict:
        return {
            "kind": "passkey",
            "mode": self.mode,
            "length": self.length,
            "n_instances": self.n_instances,
            "exact_rate": self.exact_rate,
            "mean_overlap": self.mean_overlap,
        }


def emit_report(report, path, format: str = "csv", provenance: dict | None = None) -> Path:
    """Serialize a report deterministically; CSV columns mode,length,metric,value."""
    path = Path(path)
    if format == "csv":
        buf = io.StringIO()
        if provenance:
            for k in sorted(provenance):
                buf.write(f"# {k}={provenance[k]}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["mode", "length", "metric", "value"])
        for mode, length, metric, value in report.rows():
            writer.writerow([mode, length, metric, repr(value) if isinstance(value, float) else value])
        path.write_text(buf.getvalue())
    elif format == "json":
        doc = report.to_json_dict()
        if provenance:
            doc["provenance"] = provenance
        path.write_text(json.dumps(doc, indent=2) + "\n")
    else:
        raise ValueError(f"unknown report format {format!r}")
    return path


def read_report(path) -> list[tuple[str, int, str, float]]:
    """Parse a CSV report back into (mode, length, metric, value) rows."""
    rows = []
    with open(path, newline="") as fh:
        for record in csv.reader(line for line in fh if not line.startswith("#")):
            if record == ["mode", "length", "metric", "value"]:
                continue
            mode, length, metric, value = record
            rows.append((mode, int(length), metric, float(value)))
    return rows
