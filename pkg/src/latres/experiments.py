"""Ablation tables on the synthetic corpus: mechanisms, lattice depth, encoder types.

Each table row is trained and evaluated once per seed; the table reports the
median over seeds. Results are cached as JSON keyed by a hash of the full
configuration, so reruns (and the acceptance suite) reuse finished runs.

Environment:
    LATRES_CACHE_DIR: cache directory (default ``~/.cache/latres``).
    LATRES_RECOMPUTE: set to 1 to ignore cached results.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from latres.channel import ChannelConfig, Dataset, generate_corpus
from latres.evaluate import DEEP, SHALLOW, evaluate, tune_lambda
from latres.model import EncoderSpec, ModelConfig, RescoringModel, score_hypotheses, vocabulary_for
from latres.train import TrainSchedule, token_accuracy, train

log = logging.getLogger(__name__)

CACHE_ENV = "LATRES_CACHE_DIR"
RECOMPUTE_ENV = "LATRES_RECOMPUTE"
CACHE_VERSION = 3  # bump when training or scoring changes meaning
DEFAULT_SEEDS = (1, 2, 3)
DEFAULT_UTTS = 6250  # 5000 / 625 / 625

WEIGHTED = ("wcs", "bfg", "batt", "weo", "wcs,bfg,batt", "wcs,bfg,weo")

TABLES: dict[str, list[tuple[str, EncoderSpec]]] = {
    "mechanisms": [("None (TreeLSTM)", EncoderSpec("lattice", mechanisms=""))]
    + [(m.upper().replace(",", " + "), EncoderSpec("lattice", mechanisms=m)) for m in WEIGHTED],
    "depth": [
        ("2-best lattice", EncoderSpec("lattice", lattice_nbest=2)),
        ("5-best lattice", EncoderSpec("lattice", lattice_nbest=5)),
        ("Full lattice", EncoderSpec("lattice")),
    ],
    "encoders": [
        ("No encoder (LSTM-LM)", EncoderSpec("none")),
        ("1-best encoder", EncoderSpec("one_best")),
        ("Lattice encoder", EncoderSpec("lattice")),
        ("Audio encoder", EncoderSpec("audio")),
        ("Audio + lattice encoders", EncoderSpec("audio", companion="lattice")),
    ],
}

EXTRA_ENCODERS = [
    ("5-best deliberation encoder", EncoderSpec("n_best", n=5)),
    ("Audio + 1-best encoders", EncoderSpec("audio", companion="one_best")),
]


@dataclass
class Setup:
    """Everything a table run depends on apart from the encoder and the seed."""

    channel: ChannelConfig = field(default_factory=ChannelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    n_utts: int = DEFAULT_UTTS
    nbest: int = 5
    grid: float = 0.05

    def to_dict(self) -> dict:
        return {
            "channel": self.channel.to_dict(),
            "model": self.model.to_dict(),
            "train": self.schedule.to_dict(),
            "n_utts": self.n_utts,
            "nbest": self.nbest,
            "grid": self.grid,
        }


def run_key(setup: Setup, spec: EncoderSpec, seed: int) -> str:
    payload = {"v": CACHE_VERSION, "setup": setup.to_dict(), "encoder": spec.to_dict(), "seed": seed}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "latres")


class Runner:
    """Trains and evaluates table rows, caching one JSON file per (config, encoder, seed)."""

    def __init__(self, setup: Setup | None = None, cache: str | Path | None = None, recompute: bool | None = None):
        self.setup = setup or Setup()
        self.cache = Path(cache) if cache is not None else cache_dir()
        if recompute is None:
            recompute = os.environ.get(RECOMPUTE_ENV, "") not in ("", "0")
        self.recompute = recompute
        self._data: Dataset | None = None

    @property
    def data(self) -> Dataset:
        if self._data is None:
            self._data = generate_corpus(self.setup.channel, self.setup.n_utts, self.setup.nbest)
        return self._data

    def run(self, spec: EncoderSpec, seed: int) -> dict:
        """One trained model's test result (WERR overall and per depth partition)."""
        key = run_key(self.setup, spec, seed)
        path = self.cache / f"{key}.json"
        if path.is_file() and not self.recompute:
            return json.loads(path.read_text(encoding="utf-8"))
        ds = self.data
        t0 = time.time()
        model_cfg = ModelConfig.from_dict({**self.setup.model.to_dict(), "seed": seed})
        sched = TrainSchedule.from_dict({**self.setup.schedule.to_dict(), "seed": seed})
        model = RescoringModel(model_cfg, spec, vocabulary_for(ds.vocab))
        history = train(model, ds["train"], sched, dev_utts=ds["dev"])
        dev_scored = score_hypotheses(model, ds["dev"])
        lam = tune_lambda(ds["dev"], model, self.setup.grid, scored=dev_scored)
        report = evaluate(ds["test"], model, lam, scored=score_hypotheses(model, ds["test"]))
        parts = report.partitions
        result = {
            "encoder": spec.to_dict(),
            "label": spec.label(),
            "seed": seed,
            "lambda": lam,
            "werr": report.werr,
            "werr_shallow": parts[SHALLOW]["werr"],
            "werr_deep": parts[DEEP]["werr"],
            "wer_first": report.wer_first,
            "wer_rescored": report.wer_rescored,
            "dev_token_accuracy": token_accuracy(model, ds["dev"]),
            "final_dev_loss": history[-1].get("dev_loss") if history else None,
            "seconds": round(time.time() - t0, 1),
            "config": self.setup.to_dict(),
        }
        self.cache.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(path)
        log.info("%s seed %d: WERR %.2f (%.0fs)", spec.label(), seed, result["werr"], result["seconds"])
        return result

    def row(self, name: str, spec: EncoderSpec, seeds=DEFAULT_SEEDS) -> dict:
        runs = [self.run(spec, s) for s in seeds]
        med = {k: statistics.median(r[k] for r in runs) for k in ("werr", "werr_shallow", "werr_deep")}
        return {"name": name, "encoder": spec.to_dict(), "runs": runs, **med}

    def table(self, name: str, seeds=DEFAULT_SEEDS, extra: bool = False) -> list[dict]:
        rows = list(TABLES[name])
        if extra and name == "encoders":
            rows += EXTRA_ENCODERS
        return [self.row(label, spec, seeds) for label, spec in rows]


def format_table(rows: list[dict], title: str) -> str:
    lines = [
        f"# {title}: median test WERR (%) over seeds",
        f"{'Rescoring model':<32} {'WERR':>8} {'<=2':>8} {'>2':>8}  per-seed WERR",
    ]
    for r in rows:
        seeds = " ".join(f"{x['werr']:.2f}" for x in r["runs"])
        lines.append(f"{r['name']:<32} {r['werr']:>8.2f} {r['werr_shallow']:>8.2f} {r['werr_deep']:>8.2f}  {seeds}")
    return "\n".join(lines) + "\n"
