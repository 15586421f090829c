"""Synthetic first-pass recognizer.

References are sampled from a fixed bigram source. Each reference is corrupted
into a sausage-shaped lattice: at a confused position the true token competes
with homophones (or fixed acoustic neighbours), with costs equal to the negative
log channel probability plus Gaussian noise. Occasional insertion and deletion
arcs are added. Every utterance also gets an utterance-level noise condition
that scales both the cost noise and the noise on the pseudo-acoustic frames.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from latres.errors import ConfigError, DataError
from latres.lattice import (
    Arc,
    EdgeLattice,
    count_paths,
    format_lattice_text,
    nbest_paths,
    parse_lattice_text,
    validate,
)

SPLITS = ("train", "dev", "test")

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "br", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_VARIANT_SUFFIXES = ["", "h", "e", "y"]


@dataclass
class ChannelConfig:
    vocab_size: int = 200
    homophone_classes: list[list[str]] | None = None
    n_homophone_classes: int = 50
    homophone_class_size: tuple[int, int] = (2, 3)
    n_neighbours: int = 0
    bigram_branching: int = 6
    bigram_smoothing: float = 0.05
    tied_homophones: bool = True
    class_prior_concentration: float = 1.0
    sub_rate: float = 0.25
    ins_rate: float = 0.03
    del_rate: float = 0.03
    max_confusables: int = 2
    true_prob: float = 0.8
    edit_prob: float = 0.3
    fp_lm_weight: float = 1.0
    fp_lm_smoothing: float = 0.1
    fp_token_bias: float = 2.5
    cost_noise: float = 0.3
    condition_spread: float = 0.5
    min_len: int = 3
    max_len: int = 10
    feature_dim: int = 16
    feature_noise: float = 1.0
    homophone_distinctness: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("sub_rate", "ins_rate", "del_rate"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if not 0.0 < self.true_prob <= 1.0:
            raise ConfigError(f"true_prob must be in (0, 1], got {self.true_prob}")
        if not 0.0 <= self.fp_lm_smoothing <= 1.0:
            raise ConfigError(f"fp_lm_smoothing must be in [0, 1], got {self.fp_lm_smoothing}")
        if not 0.0 < self.edit_prob < 1.0:
            raise ConfigError(f"edit_prob must be in (0, 1), got {self.edit_prob}")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.cost_noise < 0 or self.feature_noise < 0 or self.condition_spread < 0:
            raise ConfigError("noise scales must be non-negative")
        self.homophone_class_size = tuple(self.homophone_class_size)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["homophone_class_size"] = list(self.homophone_class_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown channel config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Utterance:
    id: str
    ref: list[str]
    lattice: EdgeLattice | None = None
    nbest: list[tuple[list[str], float]] = field(default_factory=list)
    features: np.ndarray | None = None

    @property
    def alt_count(self) -> int | None:
        """Alternate hypotheses in the lattice: path count minus one."""
        if self.lattice is None:
            return None
        return count_paths(self.lattice) - 1


@dataclass
class Dataset:
    splits: dict[str, list[Utterance]]
    vocab: list[str]
    config: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]

    def all(self) -> list[Utterance]:
        return [u for s in SPLITS for u in self.splits.get(s, [])]

    def find(self, utt_id: str) -> Utterance:
        for u in self.all():
            if u.id == utt_id:
                return u
        raise KeyError(utt_id)


class World:
    """Everything shared by all utterances of a corpus: vocabulary, source, confusions."""

    def __init__(self, cfg: ChannelConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        classes = self._homophones(cfg, rng)
        members = [t for c in classes for t in c]
        if len(members) > cfg.vocab_size:
            raise ConfigError(
                f"vocab_size {cfg.vocab_size} is smaller than the {len(members)} homophone class members"
            )
        taken = set(members)
        words = list(members)
        while len(words) < cfg.vocab_size:
            w = _pseudo_word(rng)
            if w not in taken:
                taken.add(w)
                words.append(w)
        self.tokens = sorted(words)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.classes = classes
        self.class_of: dict[str, list[str]] = {t: c for c in classes for t in c}
        V = len(self.tokens)

        self.start_probs = rng.dirichlet(np.full(V, 0.5))
        trans = np.full((V, V), cfg.bigram_smoothing / V)
        for i in range(V):
            succ = rng.choice(V, size=min(cfg.bigram_branching, V), replace=False)
            trans[i, succ] += (1.0 - cfg.bigram_smoothing) * rng.dirichlet(np.ones(len(succ)))
        self.transitions = trans / trans.sum(axis=1, keepdims=True)
        if cfg.tied_homophones:
            self._tie_classes(classes, rng)

        self.neighbours: dict[str, list[str]] = {}
        for t in self.tokens:
            others = [u for u in self.tokens if u != t and u not in self.class_of.get(t, ())]
            pick = rng.choice(len(others), size=min(cfg.n_neighbours, len(others)), replace=False)
            self.neighbours[t] = [others[k] for k in sorted(pick)]

        sig = rng.normal(size=(V, cfg.feature_dim))
        for c in classes:
            base = rng.normal(size=cfg.feature_dim)
            for t in c:
                sig[self.index[t]] = base + cfg.homophone_distinctness * rng.normal(size=cfg.feature_dim)
        self.signatures = sig
        # first-pass recognizer: a smoothed copy of the source bigram plus a
        # fixed per-token preference the second pass can learn to undo
        a = cfg.fp_lm_smoothing
        self.fp_start = -np.log((1 - a) * self.start_probs + a / V)
        self.fp_transitions = -np.log((1 - a) * self.transitions + a / V)
        self.fp_bias = rng.normal(0.0, 1.0, size=V) * cfg.fp_token_bias

    def _tie_classes(self, classes: list[list[str]], rng: np.random.Generator) -> None:
        """Give homophones one shared context; only a fixed in-class prior tells them apart."""
        for c in classes:
            idx = [self.index[t] for t in c]
            prior = rng.dirichlet(np.full(len(idx), self.cfg.class_prior_concentration))
            self.transitions[idx] = self.transitions[idx].mean(axis=0)
            mass = self.transitions[:, idx].sum(axis=1, keepdims=True)
            self.transitions[:, idx] = mass * prior
            self.start_probs[idx] = self.start_probs[idx].sum() * prior

    def first_pass_lm(self, prev: str | None, token: str) -> float:
        """Weighted first-pass LM cost of ``token`` after ``prev`` (None: sentence start)."""
        j = self.index[token]
        lm = self.fp_start[j] if prev is None else self.fp_transitions[self.index[prev], j]
        return self.cfg.fp_lm_weight * float(lm)

    def first_pass_cost(self, prev: str | None, token: str) -> float:
        """First-pass LM cost plus the token's fixed bias."""
        return self.first_pass_lm(prev, token) + float(self.fp_bias[self.index[token]])

    @staticmethod
    def _homophones(cfg: ChannelConfig, rng: np.random.Generator) -> list[list[str]]:
        if cfg.homophone_classes is not None:
            classes = [list(c) for c in cfg.homophone_classes]
            seen: set[str] = set()
            for c in classes:
                for t in c:
                    if t in seen:
                        raise ConfigError(f"token {t!r} appears in more than one homophone class")
                    if any(ch.isspace() for ch in t) or not t:
                        raise ConfigError(f"invalid token {t!r}")
                    seen.add(t)
            return classes
        classes = []
        seen = set()
        lo, hi = cfg.homophone_class_size
        while len(classes) < cfg.n_homophone_classes:
            stem = _pseudo_word(rng)
            size = int(rng.integers(lo, hi + 1))
            members = [stem + s for s in _VARIANT_SUFFIXES[:size]]
            if seen.isdisjoint(members):
                seen.update(members)
                classes.append(members)
        return classes

    def confusables(self, token: str) -> list[str]:
        cls = self.class_of.get(token)
        if cls is not None:
            return [t for t in cls if t != token]
        return self.neighbours[token]


def _pseudo_word(rng: np.random.Generator) -> str:
    n = int(rng.integers(2, 4))
    return "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n))


def utterance_rng(seed: int, utt_id: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(utt_id.encode()), stream])


def sample_reference(world: World, rng: np.random.Generator) -> list[str]:
    cfg = world.cfg
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    V = len(world.tokens)
    idx = [int(rng.choice(V, p=world.start_probs))]
    for _ in range(length - 1):
        idx.append(int(rng.choice(V, p=world.transitions[idx[-1]])))
    return [world.tokens[i] for i in idx]


def condition_scale(cfg: ChannelConfig, rng: np.random.Generator) -> float:
    """Utterance-level noise multiplier (log-normal around 1)."""
    return float(math.exp(cfg.condition_spread * rng.normal()))


def corrupt_to_lattice(
    ref: list[str], world: World, rng: np.random.Generator, scale: float = 1.0
) -> EdgeLattice:
    """Sausage lattice containing the reference path plus sampled confusions.

    State ids are assigned in topological order. Arcs leaving a state always
    have distinct labels, so the result is deterministic.
    """
    if not ref:
        raise DataError("cannot corrupt an empty reference")
    cfg = world.cfg
    sigma = cfg.cost_noise * scale
    L = len(ref)

    def noisy(prob: float) -> float:
        return -math.log(prob) + (sigma * float(rng.normal()) if sigma > 0 else 0.0)

    # decide the structure first so state ids can be laid out in order
    slots = []
    for t, tok in enumerate(ref):
        confused = rng.random() < cfg.sub_rate
        alts: list[str] = []
        if confused:
            pool = world.confusables(tok)
            k = int(rng.integers(1, cfg.max_confusables + 1))
            k = min(k, len(pool))
            if k:
                pick = rng.choice(len(pool), size=k, replace=False)
                alts = [pool[j] for j in sorted(pick)]
        inserted = None
        if rng.random() < cfg.ins_rate:
            inserted = world.tokens[int(rng.integers(len(world.tokens)))]
        deleted = t + 1 < L and rng.random() < cfg.del_rate
        slots.append((tok, alts, inserted, deleted))

    boundary: list[int] = []
    ins_state: dict[int, int] = {}
    next_id = 0
    for t in range(L):
        boundary.append(next_id)
        next_id += 1
        if slots[t][2] is not None:
            ins_state[t] = next_id
            next_id += 1
    boundary.append(next_id)
    next_id += 1

    arcs: list[Arc] = []
    out_labels: dict[int, set[str]] = {}

    def add(src: int, dst: int, label: str, cost: float) -> bool:
        labels = out_labels.setdefault(src, set())
        if label in labels:
            return False
        labels.add(label)
        arcs.append(Arc(src, dst, label, cost))
        return True

    def right_context(tok: str, t: int) -> float:
        # LM change on the next reference token when ``tok`` replaces ref[t];
        # zero on the reference path, so single-error paths get their exact
        # bigram cost even though a sausage keeps no per-path history
        if t + 1 >= L:
            return 0.0
        return world.first_pass_lm(tok, ref[t + 1]) - world.first_pass_lm(ref[t], ref[t + 1])

    for t, (tok, alts, inserted, deleted) in enumerate(slots):
        src, dst = boundary[t], boundary[t + 1]
        prev = ref[t - 1] if t > 0 else None
        if alts:
            p_alt = (1.0 - cfg.true_prob) / len(alts)
            true_cost = noisy(cfg.true_prob) + world.first_pass_cost(prev, tok)
            add(src, dst, tok, true_cost)
            for a in alts:
                add(src, dst, a, noisy(p_alt) + world.first_pass_cost(prev, a) + right_context(a, t))
        else:
            true_cost = noisy(1.0) + world.first_pass_cost(prev, tok)
            add(src, dst, tok, true_cost)
        if inserted is not None:
            mid = ins_state[t]
            # on a label clash the insertion is dropped and its state removed below
            if add(src, mid, inserted, noisy(cfg.edit_prob) + world.first_pass_cost(prev, inserted)):
                shift = world.first_pass_lm(inserted, tok) - world.first_pass_lm(prev, tok)
                add(mid, dst, tok, true_cost + shift)
        if deleted:
            nxt = ref[t + 1]
            skip = noisy(cfg.edit_prob) + noisy(1.0) + world.first_pass_cost(prev, nxt)
            add(src, boundary[t + 2], nxt, skip)

    lat = EdgeLattice(next_id, tuple(arcs), {boundary[L]: 0.0})
    return _drop_orphans(lat)


def _drop_orphans(lat: EdgeLattice) -> EdgeLattice:
    """Remove insertion states left without arcs after a label clash."""
    used = {0} | set(lat.finals)
    for a in lat.arcs:
        used.add(a.src)
        used.add(a.dst)
    if len(used) == lat.num_states:
        validate(lat)
        return lat
    mapping = {old: new for new, old in enumerate(sorted(used))}
    arcs = tuple(Arc(mapping[a.src], mapping[a.dst], a.label, a.cost) for a in lat.arcs)
    out = EdgeLattice(len(mapping), arcs, {mapping[s]: c for s, c in lat.finals.items()})
    validate(out)
    return out


def make_features(
    ref: list[str], world: World, rng: np.random.Generator, scale: float = 1.0
) -> np.ndarray:
    """Frames: 2-4 noisy copies of each token's signature, stored as float32."""
    if not ref:
        raise DataError("cannot make features for an empty reference")
    cfg = world.cfg
    rows = []
    for tok in ref:
        k = int(rng.integers(2, 5))
        sig = world.signatures[world.index[tok]]
        noise = rng.normal(size=(k, cfg.feature_dim)) * (cfg.feature_noise * scale)
        rows.append(sig[None, :] + noise)
    return np.concatenate(rows, axis=0).astype(np.float32)


def make_utterance(world: World, utt_id: str, nbest: int = 5) -> Utterance:
    seed = world.cfg.seed
    ref = sample_reference(world, utterance_rng(seed, utt_id, 0))
    crng = utterance_rng(seed, utt_id, 1)
    scale = condition_scale(world.cfg, crng)
    lat = corrupt_to_lattice(ref, world, crng, scale)
    feats = make_features(ref, world, utterance_rng(seed, utt_id, 2), scale)
    return Utterance(utt_id, ref, lat, nbest_paths(lat, nbest), feats)


def split_sizes(n_utts: int) -> dict[str, int]:
    if n_utts < 3:
        raise ConfigError(f"need at least 3 utterances (one per split), got {n_utts}")
    n_dev = max(1, n_utts // 10)
    n_test = max(1, n_utts // 10)
    return {"train": n_utts - n_dev - n_test, "dev": n_dev, "test": n_test}


def _make_chunk(args: tuple[dict, list[str], int]) -> list[Utterance]:
    cfg, ids, nbest = args
    world = World(ChannelConfig.from_dict(cfg))
    return [make_utterance(world, i, nbest) for i in ids]


def generate_corpus(cfg: ChannelConfig, n_utts: int, nbest: int = 5, jobs: int = 1) -> Dataset:
    """Deterministic 80/10/10 corpus.

    Every utterance has its own RNG stream derived from (seed, id), so the
    result does not depend on ``jobs``.
    """
    sizes = split_sizes(n_utts)
    world = World(cfg)
    ids = [f"utt{k:06d}" for k in range(n_utts)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        step = -(-n_utts // jobs)
        chunks = [(cfg.to_dict(), ids[i : i + step], nbest) for i in range(0, n_utts, step)]
        with ProcessPoolExecutor(jobs) as pool:
            utts = [u for part in pool.map(_make_chunk, chunks) for u in part]
    else:
        utts = [make_utterance(world, i, nbest) for i in ids]
    splits: dict[str, list[Utterance]] = {}
    k = 0
    for name in SPLITS:
        splits[name] = utts[k : k + sizes[name]]
        k += sizes[name]
    return Dataset(splits, list(world.tokens), {"channel": cfg.to_dict(), "n_utts": n_utts, "nbest": nbest})


# ---------------------------------------------------------------------------
# Dataset directory I/O


def write_features(path: Path, feats: np.ndarray) -> None:
    arr = np.ascontiguousarray(feats, dtype="<f4")
    rows, cols = arr.shape
    path.write_bytes(struct.pack("<II", rows, cols) + arr.tobytes())


def read_features(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated feature header")
    rows, cols = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * rows * cols:
        raise DataError(f"{path}: expected {rows}x{cols} floats, got {(len(raw) - 8) // 4}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(rows, cols).astype(np.float32)


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "lattices").mkdir(parents=True, exist_ok=True)
    (out / "feats").mkdir(exist_ok=True)
    with open(out / "nbest.jsonl", "w", encoding="utf-8") as fh:
        for u in ds.all():
            rec = {"id": u.id, "ref": u.ref, "hyps": [{"tokens": t, "cost": c} for t, c in u.nbest]}
            fh.write(json.dumps(rec) + "\n")
            if u.lattice is not None:
                (out / "lattices" / f"{u.id}.lat.txt").write_text(format_lattice_text(u.lattice), encoding="utf-8")
            if u.features is not None:
                write_features(out / "feats" / f"{u.id}.f32", u.features)
    manifest = {
        "splits": {name: [u.id for u in ds.splits[name]] for name in SPLITS},
        "split_sizes": {name: len(ds.splits[name]) for name in SPLITS},
        "vocab": ds.vocab,
        "config": ds.config,
        "seed": ds.config.get("channel", {}).get("seed"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(data_dir: str | Path) -> Dataset:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    records = {}
    with open(root / "nbest.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                records[rec["id"]] = rec
    splits = {}
    for name in SPLITS:
        utts = []
        for uid in manifest["splits"].get(name, []):
            if uid not in records:
                raise DataError(f"utterance {uid} listed in manifest but missing from nbest.jsonl")
            rec = records[uid]
            lat_path = root / "lattices" / f"{uid}.lat.txt"
            lat = parse_lattice_text(lat_path.read_text(encoding="utf-8")) if lat_path.exists() else None
            feat_path = root / "feats" / f"{uid}.f32"
            feats = read_features(feat_path) if feat_path.exists() else None
            nbest = [(list(h["tokens"]), float(h["cost"])) for h in rec["hyps"]]
            utts.append(Utterance(uid, list(rec["ref"]), lat, nbest, feats))
        splits[name] = utts
    return Dataset(splits, list(manifest["vocab"]), manifest.get("config", {}))
