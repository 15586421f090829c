"""Attention encoder-decoder rescoring model.

Encoders (1-best, n-best, lattice, audio) produce position sequences that a
two-layer LSTM decoder attends to. The decoder is run in teacher-forcing mode
to score fixed hypotheses. All computation is batched over utterances with
padding and masks; the per-utterance entry points wrap the batched ones.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from latres.channel import Utterance
from latres.errors import ConfigError, DataError
from latres.evaluate import word_errors
from latres.lattice import TokenVocabulary, prune_to_nbest
from latres.neural import (
    DTYPE,
    AttentionParams,
    MechanismFlags,
    ParameterStore,
    create_attention,
    create_lstm,
    input_projection,
    lattice_cell,
    lstm_step,
    multi_head_attention,
    safe_log,
    zero_state,
)
from latres.transform import NodeLattice, edge_to_node_lattice

ENCODER_KINDS = ("none", "one_best", "n_best", "lattice", "audio")
TEXT_KINDS = ("one_best", "n_best", "lattice")


@dataclass
class ModelConfig:
    embed_dim: int = 32
    encoder_units: int = 32
    audio_encoder_units: int = 48
    decoder_units: int = 32
    decoder_layers: int = 2
    attention_heads: int = 4
    vocab_size: int = 512
    feature_dim: int = 16
    seed: int = 0

    @classmethod
    def large(cls, **kw) -> "ModelConfig":
        base = dict(
            embed_dim=256,
            encoder_units=256,
            audio_encoder_units=768,
            decoder_units=256,
            decoder_layers=2,
            attention_heads=4,
            vocab_size=50_000,
        )
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        _reject_unknown(cls, d, "model")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EncoderSpec:
    kind: str = "lattice"
    companion: str | None = None
    n: int = 5
    mechanisms: MechanismFlags = field(default_factory=lambda: MechanismFlags(True, True, False, True))
    lattice_nbest: int | None = None  # prune encoder lattices to n-best; None = full lattice

    def __post_init__(self) -> None:
        if isinstance(self.mechanisms, str):
            self.mechanisms = MechanismFlags.parse(self.mechanisms)
        elif isinstance(self.mechanisms, (list, tuple)):
            self.mechanisms = MechanismFlags.parse(",".join(self.mechanisms))
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.companion is not None:
            if self.companion not in ENCODER_KINDS or self.companion == "none":
                raise ConfigError(f"invalid companion encoder {self.companion!r}")
            if self.kind == "none":
                raise ConfigError("the 'none' encoder (LSTM-LM) cannot have a companion")
            if self.companion == self.kind:
                raise ConfigError("companion must differ from the main encoder kind")
            if self.companion in TEXT_KINDS and self.kind in TEXT_KINDS:
                raise ConfigError("at most one text encoder (one_best, n_best or lattice) per model")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.lattice_nbest is not None and self.lattice_nbest < 1:
            raise ConfigError("lattice_nbest must be >= 1")

    @property
    def kinds(self) -> list[str]:
        if self.kind == "none":
            return []
        return [self.kind] + ([self.companion] if self.companion else [])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "companion": self.companion,
            "n": self.n,
            "mechanisms": self.mechanisms.as_list(),
            "lattice_nbest": self.lattice_nbest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        _reject_unknown(cls, d, "encoder")
        return cls(**d)

    def label(self) -> str:
        names = {
            "none": "No encoder (LSTM-LM)",
            "one_best": "1-best encoder",
            "n_best": f"{self.n}-best deliberation encoder",
            "audio": "Audio encoder",
        }

        def one(kind: str) -> str:
            if kind == "lattice":
                depth = "Full-lattice" if self.lattice_nbest is None else f"{self.lattice_nbest}-best lattice"
                return f"{depth} encoder [{self.mechanisms.label()}]"
            return names[kind]

        return " & ".join(one(k) for k in ([self.kind] + ([self.companion] if self.companion else [])))


def _reject_unknown(cls, d: dict, what: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {sorted(unknown)}")


class ScoredHypothesis(NamedTuple):
    tokens: list[str]
    first_pass_cost: float
    rescore_logprob: float


class Prepared(NamedTuple):
    """Per-utterance integer inputs, computed once and cached."""

    utt_id: str
    ref: list[int] | None
    hyps: list[list[int]]
    hyp_errors: list[int]
    text_seqs: list[list[int]]
    lattice: NodeLattice | None
    lattice_ids: list[int] | None
    features: np.ndarray | None


class EncoderOutput(NamedTuple):
    keys: torch.Tensor  # [B, N, d] attention inputs
    bias: torch.Tensor  # [B, N]
    mask: torch.Tensor  # [B, N]
    states: torch.Tensor  # [B, N, d] raw hidden states


class RescoringModel:
    def __init__(self, config: ModelConfig, spec: EncoderSpec, vocab: TokenVocabulary):
        self.config = dataclasses.replace(config, vocab_size=len(vocab))
        self.spec = spec
        self.vocab = vocab
        self.store = ParameterStore(config.seed)
        self._cache: dict[str, Prepared] = {}
        self.unk_count = 0
        cfg = self.config
        kinds = spec.kinds
        if cfg.decoder_units % cfg.attention_heads:
            raise ConfigError("attention_heads must divide decoder_units")
        if kinds and cfg.attention_heads % len(kinds):
            raise ConfigError(f"{cfg.attention_heads} heads cannot be split over {len(kinds)} encoders")
        s = self.store
        V = len(vocab)
        s.create("dec.embed", (V, cfg.embed_dim))
        self.dec_layers = []
        in_dim = cfg.embed_dim
        for layer in range(cfg.decoder_layers):
            self.dec_layers.append(create_lstm(s, f"dec.lstm{layer}", in_dim, cfg.decoder_units))
            in_dim = cfg.decoder_units
        head_dim = cfg.decoder_units // cfg.attention_heads
        self.attention: dict[str, AttentionParams] = {}
        ctx_dim = 0
        for kind in kinds:
            slot = "audio" if kind == "audio" else "text"
            if slot == "text":
                s.create("text.embed", (V, cfg.embed_dim))
                self.text_lstm = create_lstm(s, "text.lstm", cfg.embed_dim, cfg.encoder_units)
                key_dim = cfg.encoder_units
            else:
                self.audio_lstm = create_lstm(s, "audio.lstm", cfg.feature_dim, cfg.audio_encoder_units)
                key_dim = cfg.audio_encoder_units
            heads = cfg.attention_heads // len(kinds)
            self.attention[kind] = create_attention(s, f"att.{slot}", cfg.decoder_units, key_dim, heads, head_dim)
            ctx_dim += heads * head_dim
        s.create("dec.comb.W", (cfg.decoder_units + ctx_dim, cfg.decoder_units))
        s.create("dec.comb.b", (cfg.decoder_units,), init="const")
        s.create("dec.out.W", (cfg.decoder_units, V))
        s.create("dec.out.b", (V,), init="const")

    # ------------------------------------------------------------------
    # data preparation

    def ids(self, tokens: Sequence[str]) -> list[int]:
        out = []
        for t in tokens:
            if t in self.vocab:
                out.append(self.vocab.lookup(t))
            else:
                self.unk_count += 1
                out.append(self.vocab.unk_id)
        return out

    def prepare(self, utt: Utterance) -> Prepared:
        cached = self._cache.get(utt.id)
        if cached is not None:
            return cached
        kinds = self.spec.kinds
        bos, eos = self.vocab.bos_id, self.vocab.eos_id
        ref = self.ids(utt.ref) if utt.ref else None
        hyps = [self.ids(t) for t, _ in utt.nbest]
        errs = [word_errors(utt.ref, t)[0] for t, _ in utt.nbest] if utt.ref else []
        text_seqs: list[list[int]] = []
        nl = None
        nl_ids = None
        if "one_best" in kinds or "n_best" in kinds:
            n = 1 if "one_best" in kinds else self.spec.n
            if not utt.nbest:
                raise DataError(f"utterance {utt.id}: n-best list required by the {self.spec.kind} encoder")
            text_seqs = [[bos] + h + [eos] for h in hyps[:n]]
        if "lattice" in kinds:
            if utt.lattice is None:
                raise DataError(f"utterance {utt.id}: lattice required by the lattice encoder")
            lat = utt.lattice
            if self.spec.lattice_nbest is not None:
                lat = prune_to_nbest(lat, self.spec.lattice_nbest)
            nl = edge_to_node_lattice(lat)
            nl_ids = self.ids(nl.tokens)
        feats = None
        if "audio" in kinds:
            if utt.features is None:
                raise DataError(f"utterance {utt.id}: features required by the audio encoder")
            feats = np.asarray(utt.features, dtype=np.float64)
            if feats.shape[1] != self.config.feature_dim:
                raise DataError(
                    f"utterance {utt.id}: feature dim {feats.shape[1]} != model feature_dim {self.config.feature_dim}"
                )
        prep = Prepared(utt.id, ref, hyps, errs, text_seqs, nl, nl_ids, feats)
        self._cache[utt.id] = prep
        return prep

    def clear_cache(self) -> None:
        self._cache.clear()

    # ------------------------------------------------------------------
    # encoders

    def encode(self, batch: Sequence[Prepared]) -> dict[str, EncoderOutput]:
        out = {}
        for kind in self.spec.kinds:
            if kind in ("one_best", "n_best"):
                out[kind] = self._encode_text(batch)
            elif kind == "lattice":
                out[kind] = self._encode_lattice(batch)
            else:
                out[kind] = self._encode_audio(batch)
        return out

    def _run_lstm(self, p, xw: torch.Tensor) -> torch.Tensor:
        """Unroll an LSTM over ``xw [S, T, 4d]``; returns ``[S, T, d]``."""
        S, T = xw.shape[0], xw.shape[1]
        state = zero_state(p.hidden, S)
        hs = []
        for t in range(T):
            state = lstm_step(p, None, state, xw=xw[:, t])
            hs.append(state.h)
        return torch.stack(hs, dim=1)

    def _encode_text(self, batch: Sequence[Prepared]) -> EncoderOutput:
        seqs = [s for prep in batch for s in prep.text_seqs]
        owner = [b for b, prep in enumerate(batch) for _ in prep.text_seqs]
        T = max(len(s) for s in seqs)
        ids = torch.zeros((len(seqs), T), dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s)
        x = self.store["text.embed"][ids]
        H = self._run_lstm(self.text_lstm, input_projection(self.text_lstm, x))
        flat = H.reshape(-1, H.shape[-1])
        # concatenate each utterance's sequences along the position axis
        gather: list[list[int]] = [[] for _ in batch]
        for i, s in enumerate(seqs):
            gather[owner[i]].extend(i * T + t for t in range(len(s)))
        N = max(len(g) for g in gather)
        idx = torch.zeros((len(batch), N), dtype=torch.long)
        mask = torch.zeros((len(batch), N), dtype=DTYPE)
        for b, g in enumerate(gather):
            idx[b, : len(g)] = torch.tensor(g)
            mask[b, : len(g)] = 1.0
        states = flat[idx]
        return EncoderOutput(states, torch.zeros_like(mask), mask, states)

    def _encode_lattice(self, batch: Sequence[Prepared]) -> EncoderOutput:
        flags = self.spec.mechanisms
        p = self.text_lstm
        B = len(batch)
        N = max(len(prep.lattice.nodes) for prep in batch)
        P = 1
        pred_lists = []
        for prep in batch:
            preds = prep.lattice.predecessors()
            pred_lists.append(preds)
            P = max(P, max(len(x) for x in preds))
        ids = torch.zeros((B, N), dtype=torch.long)
        marg = torch.ones((B, N), dtype=DTYPE)
        mask = torch.zeros((B, N), dtype=DTYPE)
        # slot 0 holds the zero state fed to <s>; node j lives in slot j + 1
        pidx = torch.zeros((B, N, P), dtype=torch.long)
        pw = torch.ones((B, N, P), dtype=DTYPE)
        pmask = torch.zeros((B, N, P), dtype=DTYPE)
        for b, prep in enumerate(batch):
            nl = prep.lattice
            n = len(nl.nodes)
            ids[b, :n] = torch.tensor(prep.lattice_ids)
            marg[b, :n] = torch.tensor([node.marginal for node in nl.nodes], dtype=DTYPE)
            mask[b, :n] = 1.0
            pmask[b, 0, 0] = 1.0
            for e in range(1, n):
                for k, ai in enumerate(pred_lists[b][e]):
                    arc = nl.arcs[ai]
                    pidx[b, e, k] = arc.src + 1
                    pw[b, e, k] = arc.bwd
                    pmask[b, e, k] = 1.0
        x = self.store["text.embed"][ids]
        xw = input_projection(p, x)
        zero = zero_state(p.hidden, B)
        hs = [zero.h]
        cs = [zero.c]
        for j in range(N):
            Hs = torch.stack(hs, dim=1)
            Cs = torch.stack(cs, dim=1)
            gidx = pidx[:, j, :].unsqueeze(-1).expand(B, P, p.hidden)
            state = lattice_cell(p, xw[:, j], Hs.gather(1, gidx), Cs.gather(1, gidx), pw[:, j], pmask[:, j], flags)
            hs.append(state.h)
            cs.append(state.c)
        H = torch.stack(hs[1:], dim=1)
        keys = marg.unsqueeze(-1) * H if flags.weo else H
        bias = safe_log(marg) if flags.batt else torch.zeros_like(marg)
        return EncoderOutput(keys, bias, mask, H)

    def _encode_audio(self, batch: Sequence[Prepared]) -> EncoderOutput:
        p = self.audio_lstm
        B = len(batch)
        T = max(prep.features.shape[0] for prep in batch)
        x = torch.zeros((B, T, self.config.feature_dim), dtype=DTYPE)
        mask = torch.zeros((B, T), dtype=DTYPE)
        for b, prep in enumerate(batch):
            f = prep.features
            x[b, : f.shape[0]] = torch.as_tensor(f)
            mask[b, : f.shape[0]] = 1.0
        H = self._run_lstm(p, input_projection(p, x))
        return EncoderOutput(H, torch.zeros_like(mask), mask, H)

    # ------------------------------------------------------------------
    # decoder

    def decoder_states(self, seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Top-layer states for teacher-forced inputs ``<s> + seq``.

        Returns ``(states [R, T, d], targets [R, T], mask [R, T])`` where the
        targets are ``seq + </s>``.
        """
        bos, eos = self.vocab.bos_id, self.vocab.eos_id
        R = len(seqs)
        T = max(len(s) for s in seqs) + 1
        inp = torch.zeros((R, T), dtype=torch.long)
        tgt = torch.zeros((R, T), dtype=torch.long)
        mask = torch.zeros((R, T), dtype=DTYPE)
        for r, s in enumerate(seqs):
            L = len(s)
            inp[r, : L + 1] = torch.tensor([bos] + list(s))
            tgt[r, : L + 1] = torch.tensor(list(s) + [eos])
            mask[r, : L + 1] = 1.0
        h = self.store["dec.embed"][inp]
        for p in self.dec_layers:
            h = self._run_lstm(p, input_projection(p, h))
        return h, tgt, mask

    def decoder_logits(self, enc: dict[str, EncoderOutput], seqs: Sequence[Sequence[int]], owner: Sequence[int]):
        """Output logits for teacher-forced ``seqs``.

        ``owner[r]`` is the batch index whose encoder outputs sequence ``r``
        attends to. Returns ``(logits [R, T, V], targets, mask, attention)``
        where ``attention`` maps encoder kind to ``[R, heads, T, N]`` weights.
        """
        states, tgt, mask = self.decoder_states(seqs)
        own = torch.tensor(list(owner), dtype=torch.long)
        parts = [states]
        attn = {}
        for kind in self.spec.kinds:
            e = enc[kind]
            ctx, w = multi_head_attention(self.attention[kind], states, e.keys[own], e.bias[own], e.mask[own])
            parts.append(ctx)
            attn[kind] = w
        a = torch.tanh(torch.cat(parts, dim=-1) @ self.store["dec.comb.W"] + self.store["dec.comb.b"])
        logits = a @ self.store["dec.out.W"] + self.store["dec.out.b"]
        return logits, tgt, mask, attn

    def token_logprobs(self, enc, seqs, owner) -> torch.Tensor:
        """Per-position log-probabilities of ``seq + </s>``, ``[R, T]`` (padding is 0)."""
        logits, tgt, mask, _ = self.decoder_logits(enc, seqs, owner)
        return torch.log_softmax(logits, dim=-1).gather(-1, tgt.unsqueeze(-1)).squeeze(-1) * mask

    def sequence_logprobs(self, enc, seqs, owner) -> torch.Tensor:
        return self.token_logprobs(enc, seqs, owner).sum(dim=-1)

    # ------------------------------------------------------------------
    # checkpoints

    def state(self) -> dict[str, np.ndarray]:
        return self.store.to_numpy()

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.store.load_numpy(arrays)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.store.params.values())


def encode(model: RescoringModel, utt: Utterance) -> dict[str, EncoderOutput]:
    """Encoder bundle for one utterance (empty dict for the LSTM-LM)."""
    return model.encode([model.prepare(utt)])


def teacher_force_logprob(model: RescoringModel, bundle: dict[str, EncoderOutput], tokens: Sequence[str]) -> torch.Tensor:
    """``sum_t log P(token_t | tokens_<t, contexts)`` including the end token."""
    if not tokens:
        raise ValueError("tokens must be non-empty")
    return model.sequence_logprobs(bundle, [model.ids(tokens)], [0])[0]


def mle_losses(model: RescoringModel, batch: Sequence[Prepared]) -> torch.Tensor:
    """Per-utterance ``-log P(ref) / len(ref)``."""
    for prep in batch:
        if not prep.ref:
            raise DataError(f"utterance {prep.utt_id} has an empty reference")
    enc = model.encode(batch)
    lp = model.sequence_logprobs(enc, [prep.ref for prep in batch], list(range(len(batch))))
    lengths = torch.tensor([len(prep.ref) for prep in batch], dtype=DTYPE)
    return -lp / lengths


def mle_loss(model: RescoringModel, utt: Utterance) -> torch.Tensor:
    return mle_losses(model, [model.prepare(utt)])[0]


def expected_error_loss(logprobs: torch.Tensor, errors: torch.Tensor) -> torch.Tensor:
    """``sum_i softmax(logprobs)_i * (E_i - mean(E))``."""
    post = torch.softmax(logprobs, dim=-1)
    return (post * (errors - errors.mean())).sum()


def hypothesis_logprobs(model: RescoringModel, batch: Sequence[Prepared], enc=None) -> list[torch.Tensor]:
    """Teacher-forced log-probabilities of every n-best hypothesis, per utterance."""
    if enc is None:
        enc = model.encode(batch)
    seqs, owner = [], []
    for b, prep in enumerate(batch):
        for h in prep.hyps:
            seqs.append(h)
            owner.append(b)
    if not seqs:
        return [torch.zeros(0, dtype=DTYPE) for _ in batch]
    lp = model.sequence_logprobs(enc, seqs, owner)
    out = []
    k = 0
    for prep in batch:
        out.append(lp[k : k + len(prep.hyps)])
        k += len(prep.hyps)
    return out


def mwer_losses(model: RescoringModel, batch: Sequence[Prepared]) -> tuple[list[torch.Tensor], int]:
    """MWER terms for utterances with at least two hypotheses, plus the skipped count."""
    usable = [p for p in batch if len(p.hyps) >= 2]
    skipped = len(batch) - len(usable)
    if not usable:
        return [], skipped
    lps = hypothesis_logprobs(model, usable)
    losses = [
        expected_error_loss(lp, torch.tensor(prep.hyp_errors, dtype=DTYPE)) for lp, prep in zip(lps, usable)
    ]
    return losses, skipped


def mwer_loss(model: RescoringModel, utt: Utterance) -> torch.Tensor:
    losses, _ = mwer_losses(model, [model.prepare(utt)])
    return losses[0] if losses else torch.zeros((), dtype=DTYPE)


_WORKER_MODEL: "RescoringModel | None" = None


def _worker_init(payload: tuple) -> None:
    global _WORKER_MODEL
    torch.set_num_threads(1)
    config, spec, tokens, arrays = payload
    _WORKER_MODEL = RescoringModel(ModelConfig.from_dict(config), EncoderSpec.from_dict(spec), TokenVocabulary(tokens))
    _WORKER_MODEL.load_state(arrays)


def _worker_score(args: tuple) -> list[list[ScoredHypothesis]]:
    utts, batch_size = args
    return score_hypotheses(_WORKER_MODEL, utts, batch_size)


def score_hypotheses(
    model: RescoringModel, utts: Sequence[Utterance], batch_size: int = 64, jobs: int = 1
) -> list[list[ScoredHypothesis]]:
    """Rescore every n-best list; no gradients.

    With ``jobs > 1`` whole batches are farmed out to worker processes; batch
    boundaries are the same as in a single process, so scores are identical.
    """
    if jobs > 1 and len(utts) > batch_size:
        from concurrent.futures import ProcessPoolExecutor

        payload = (model.config.to_dict(), model.spec.to_dict(), model.vocab.tokens, model.state())
        per = batch_size * max(1, -(-len(utts) // (batch_size * jobs)))
        chunks = [(list(utts[i : i + per]), batch_size) for i in range(0, len(utts), per)]
        with ProcessPoolExecutor(jobs, initializer=_worker_init, initargs=(payload,)) as pool:
            return [hs for part in pool.map(_worker_score, chunks) for hs in part]
    out: list[list[ScoredHypothesis]] = []
    with torch.no_grad():
        for start in range(0, len(utts), batch_size):
            chunk = utts[start : start + batch_size]
            preps = [model.prepare(u) for u in chunk]
            lps = hypothesis_logprobs(model, preps)
            for u, lp in zip(chunk, lps):
                out.append([ScoredHypothesis(t, c, float(v)) for (t, c), v in zip(u.nbest, lp.tolist())])
    return out


# ----------------------------------------------------------------------
# checkpoint file: magic, u64 header length, JSON header, raw <f8 arrays

MAGIC = b"LATRESCKPT1\n"


def save_checkpoint(model: RescoringModel, path: str | Path, extra: dict | None = None) -> None:
    arrays = model.state()
    header = {
        "config": model.config.to_dict(),
        "encoder": model.spec.to_dict(),
        "vocab": model.vocab.tokens,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path}: not a latres checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path: str | Path) -> RescoringModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: not a latres checkpoint")
    off = len(MAGIC)
    (n,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    header = json.loads(raw[off : off + n].decode("utf-8"))
    off += n
    model = RescoringModel(
        ModelConfig.from_dict(header["config"]),
        EncoderSpec.from_dict(header["encoder"]),
        TokenVocabulary(header["vocab"]),
    )
    arrays = {}
    for item in header["params"]:
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        arr = np.frombuffer(raw[off : off + 8 * count], dtype="<f8").reshape(item["shape"])
        off += 8 * count
        arrays[item["name"]] = arr
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    model.load_state(arrays)
    return model


def vocabulary_for(tokens: Sequence[str]) -> TokenVocabulary:
    return TokenVocabulary(list(tokens))
