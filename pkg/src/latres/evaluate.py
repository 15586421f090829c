"""WER, log-linear interpolation, lambda tuning and WERR reports.

The first-pass score of a hypothesis is its negated lattice cost, so the
combined score is ``(1 - lam) * (-cost) + lam * rescore_logprob`` and higher is
better. Ties keep the first-pass order.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, NamedTuple

if TYPE_CHECKING:
    from latres.channel import Utterance
    from latres.model import RescoringModel, ScoredHypothesis

log = logging.getLogger(__name__)

SHALLOW, DEEP, UNKNOWN = "<=2", ">2", "unknown"


def word_errors(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int]:
    """Levenshtein distance over tokens and the reference length."""
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1], len(ref)


def combined_score(hyp: "ScoredHypothesis", lam: float) -> float:
    return (1.0 - lam) * (-hyp.first_pass_cost) + lam * hyp.rescore_logprob


def interpolate_and_rank(hyps: Sequence["ScoredHypothesis"], lam: float) -> list["ScoredHypothesis"]:
    """Sort by combined score, descending; input order breaks ties.

    Raises:
        ValueError: empty list or ``lam`` outside [0, 1].
    """
    if not hyps:
        raise ValueError("cannot rank an empty hypothesis list")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    order = sorted(range(len(hyps)), key=lambda i: (-combined_score(hyps[i], lam), i))
    return [hyps[i] for i in order]


def lambda_grid(step: float) -> list[float]:
    """``[0, step, 2*step, ..., 1]``; 1.0 is always the last value."""
    if not 0.0 < step <= 0.5:
        raise ValueError(f"grid step must be in (0, 0.5], got {step}")
    k = int(round(1.0 / step))
    if abs(k * step - 1.0) < 1e-9:
        return [round(i * step, 12) for i in range(k)] + [1.0]
    values = []
    i = 0
    while i * step < 1.0 - 1e-12:
        values.append(round(i * step, 12))
        i += 1
    return values + [1.0]


def _wer_at(utts: Sequence["Utterance"], scored: Sequence[Sequence["ScoredHypothesis"]], lam: float) -> tuple[int, int]:
    errs, words = 0, 0
    for u, hyps in zip(utts, scored):
        best = interpolate_and_rank(hyps, lam)[0]
        e, n = word_errors(u.ref, best.tokens)
        errs += e
        words += n
    return errs, words


def lambda_sweep(
    utts: Sequence["Utterance"], scored: Sequence[Sequence["ScoredHypothesis"]], step: float = 0.05
) -> list[tuple[float, float]]:
    out = []
    for lam in lambda_grid(step):
        e, n = _wer_at(utts, scored, lam)
        out.append((lam, e / n))
    return out


def tune_lambda(
    dev: Sequence["Utterance"],
    model: "RescoringModel | None",
    grid: float = 0.05,
    scored: Sequence[Sequence["ScoredHypothesis"]] | None = None,
) -> float:
    """Grid value with the lowest dev WER; the smaller lambda wins ties.

    Raises:
        ValueError: empty dev set.
    """
    if not dev:
        raise ValueError("development set is empty")
    if scored is None:
        from latres.model import score_hypotheses

        scored = score_hypotheses(model, dev)
    best_lam, best_err = 0.0, None
    for lam in lambda_grid(grid):
        e, _ = _wer_at(dev, scored, lam)
        if best_err is None or e < best_err:
            best_lam, best_err = lam, e
    return best_lam


def first_pass_wer(utts: Sequence["Utterance"]) -> float:
    errs = words = 0
    for u in utts:
        e, n = word_errors(u.ref, u.nbest[0][0])
        errs += e
        words += n
    return errs / words


def oracle_wer(utts: Sequence["Utterance"], n: int) -> float:
    """WER of the best of the top-``n`` first-pass hypotheses per utterance."""
    errs = words = 0
    for u in utts:
        if not u.nbest:
            raise ValueError(f"utterance {u.id} has no hypotheses")
        e = min(word_errors(u.ref, toks)[0] for toks, _ in u.nbest[:n])
        errs += e
        words += len(u.ref)
    return errs / words


def lattice_oracle_wer(utts: Sequence["Utterance"], limit: int = 100_000) -> float:
    """Oracle over every lattice path (brute force)."""
    from latres.lattice import enumerate_paths

    errs = words = 0
    for u in utts:
        e = min(word_errors(u.ref, toks)[0] for toks, _ in enumerate_paths(u.lattice, limit))
        errs += e
        words += len(u.ref)
    return errs / words


class UttResult(NamedTuple):
    id: str
    first_errors: int
    rescored_errors: int
    ref_len: int
    alt_count: int | None
    first_tokens: list[str]
    rescored_tokens: list[str]


def werr(first: float, rescored: float) -> float:
    """Relative WER reduction in percent (0 when the first pass is perfect)."""
    if first == 0:
        return 0.0
    return 100.0 * (first - rescored) / first


def partition_of(alt_count: int | None) -> str:
    if alt_count is None:
        return UNKNOWN
    return SHALLOW if alt_count <= 2 else DEEP


@dataclass
class EvalReport:
    rows: list[UttResult]
    lam: float
    meta: dict = field(default_factory=dict)

    def _agg(self, rows: Sequence[UttResult]) -> dict:
        words = sum(r.ref_len for r in rows)
        e1 = sum(r.first_errors for r in rows)
        e2 = sum(r.rescored_errors for r in rows)
        w1 = e1 / words if words else 0.0
        w2 = e2 / words if words else 0.0
        return {
            "utterances": len(rows),
            "words": words,
            "first_errors": e1,
            "rescored_errors": e2,
            "wer_first": w1,
            "wer_rescored": w2,
            "werr": werr(w1, w2),
        }

    @property
    def overall(self) -> dict:
        return self._agg(self.rows)

    @property
    def partitions(self) -> dict[str, dict]:
        groups: dict[str, list[UttResult]] = {SHALLOW: [], DEEP: []}
        for r in self.rows:
            groups.setdefault(partition_of(r.alt_count), []).append(r)
        return {k: self._agg(v) for k, v in groups.items()}

    @property
    def wer_first(self) -> float:
        return self.overall["wer_first"]

    @property
    def wer_rescored(self) -> float:
        return self.overall["wer_rescored"]

    @property
    def werr(self) -> float:
        return self.overall["werr"]

    def summary_dict(self) -> dict:
        return {"lambda": self.lam, "overall": self.overall, "partitions": self.partitions, **self.meta}

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "id": r.id,
                    "first_errors": r.first_errors,
                    "rescored_errors": r.rescored_errors,
                    "ref_len": r.ref_len,
                    "alt_count": r.alt_count,
                    "partition": partition_of(r.alt_count),
                    "first_pass": r.first_tokens,
                    "rescored": r.rescored_tokens,
                }
            )
            for r in self.rows
        ]
        return "\n".join(lines) + "\n"

    def summary_table(self, title: str = "Rescoring") -> str:
        o = self.overall
        p = self.partitions
        lines = [
            "# first-pass score = -lattice cost; combined = (1-lambda)*first_pass + lambda*rescore_logprob",
            f"# lambda = {self.lam:.2f}",
            f"{'Rescoring model':<48} {'WER first':>10} {'WER resc':>10} {'WERR %':>8} {'<=2 %':>8} {'>2 %':>8}",
            f"{title:<48} {100 * o['wer_first']:>10.2f} {100 * o['wer_rescored']:>10.2f} {o['werr']:>8.2f}"
            f" {p[SHALLOW]['werr']:>8.2f} {p[DEEP]['werr']:>8.2f}",
            f"# utterances: total {o['utterances']}, <=2 alternates {p[SHALLOW]['utterances']}, "
            f">2 alternates {p[DEEP]['utterances']}"
            + (f", unknown {p[UNKNOWN]['utterances']}" if UNKNOWN in p else ""),
        ]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, title: str = "Rescoring") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.jsonl").write_text(self.to_jsonl(), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(self.summary_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        (out / "summary.txt").write_text(self.summary_table(title), encoding="utf-8")


def evaluate(
    test: Sequence["Utterance"],
    model: "RescoringModel | None",
    lam: float,
    scored: Sequence[Sequence["ScoredHypothesis"]] | None = None,
) -> EvalReport:
    """Rescore ``test`` at interpolation weight ``lam`` and build the report."""
    if scored is None:
        from latres.model import score_hypotheses

        scored = score_hypotheses(model, test)
    rows = []
    unknown = 0
    for u, hyps in zip(test, scored):
        first = hyps[0]
        best = interpolate_and_rank(hyps, lam)[0]
        e1, n = word_errors(u.ref, first.tokens)
        e2, _ = word_errors(u.ref, best.tokens)
        alt = u.alt_count
        if alt is None:
            unknown += 1
        rows.append(UttResult(u.id, e1, e2, n, alt, list(first.tokens), list(best.tokens)))
    if unknown:
        log.warning("%d utterances without lattices placed in the %r partition", unknown, UNKNOWN)
    return EvalReport(rows, lam)


def first_pass_scored(utts: Sequence["Utterance"]) -> list[list["ScoredHypothesis"]]:
    """Hypotheses with rescore log-prob equal to the first-pass score (a null rescorer)."""
    from latres.model import ScoredHypothesis

    return [[ScoredHypothesis(t, c, -c) for t, c in u.nbest] for u in utts]
