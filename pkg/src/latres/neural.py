"""Differentiable building blocks in float64 torch.

Reverse-mode gradients come from torch autograd; ``finite_difference_gradient``
is the independent oracle used to check them.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from latres.errors import NumericError
from latres.transform import MIN_WEIGHT, NodeLattice

DTYPE = torch.float64
FORGET_BIAS = 1.0
INIT_RANGE = 0.1


class ParameterStore:
    """Named float64 parameters with deterministic uniform initialization.

    Parameters are drawn in creation order from one numpy generator, so the
    same seed and the same sequence of ``create`` calls give bit-identical
    values.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.params: dict[str, torch.Tensor] = {}

    def create(self, name: str, shape: Sequence[int], init: str = "uniform", value: float = 0.0) -> torch.Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            data = self._rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
        elif init == "const":
            data = np.full(shape, value)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = torch.tensor(data, dtype=DTYPE, requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return math.sqrt(total)

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.params.items()}

    def load_numpy(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if tuple(v.shape) != tuple(self.params[k].shape):
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {tuple(self.params[k].shape)}")
            with torch.no_grad():
                self.params[k].copy_(torch.from_numpy(np.array(v, dtype=np.float64)))


class CellState(NamedTuple):
    h: torch.Tensor
    c: torch.Tensor


@dataclass(frozen=True)
class MechanismFlags:
    """Lattice-weight mechanisms; all off is the plain child-sum TreeLSTM."""

    wcs: bool = False
    bfg: bool = False
    batt: bool = False
    weo: bool = False

    @classmethod
    def parse(cls, text: str) -> "MechanismFlags":
        names = {t.strip().lower() for t in text.replace("+", ",").split(",") if t.strip()}
        names.discard("none")
        unknown = names - {"wcs", "bfg", "batt", "weo"}
        if unknown:
            raise ValueError(f"unknown mechanisms: {sorted(unknown)}")
        return cls(**{n: True for n in names})

    def label(self) -> str:
        on = [n.upper() for n in ("wcs", "bfg", "batt", "weo") if getattr(self, n)]
        return " + ".join(on) if on else "None (TreeLSTM)"

    def as_list(self) -> list[str]:
        return [n for n in ("wcs", "bfg", "batt", "weo") if getattr(self, n)]

    @classmethod
    def all_combinations(cls) -> list["MechanismFlags"]:
        return [cls(bool(k & 1), bool(k & 2), bool(k & 4), bool(k & 8)) for k in range(16)]


class LSTMParams(NamedTuple):
    W: torch.Tensor  # [in, 4d], gate blocks i, f, o, u
    U_iou: torch.Tensor  # [d, 3d]
    U_f: torch.Tensor  # [d, d]
    b: torch.Tensor  # [4d]

    @property
    def hidden(self) -> int:
        return self.U_f.shape[0]


def create_lstm(store: ParameterStore, prefix: str, in_dim: int, hidden: int) -> LSTMParams:
    W = store.create(f"{prefix}.W", (in_dim, 4 * hidden))
    U_iou = store.create(f"{prefix}.U_iou", (hidden, 3 * hidden))
    U_f = store.create(f"{prefix}.U_f", (hidden, hidden))
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = FORGET_BIAS
    b = store.create(f"{prefix}.b", (4 * hidden,), init="const")
    with torch.no_grad():
        b.copy_(torch.as_tensor(bias))
    return LSTMParams(W, U_iou, U_f, b)


def lstm_params(store: ParameterStore, prefix: str) -> LSTMParams:
    return LSTMParams(store[f"{prefix}.W"], store[f"{prefix}.U_iou"], store[f"{prefix}.U_f"], store[f"{prefix}.b"])


def _check_dims(p: LSTMParams, x: torch.Tensor, h: torch.Tensor) -> None:
    if x.shape[-1] != p.W.shape[0]:
        raise ValueError(f"input dim {x.shape[-1]} != {p.W.shape[0]}")
    if h.shape[-1] != p.hidden:
        raise ValueError(f"state dim {h.shape[-1]} != {p.hidden}")


def input_projection(p: LSTMParams, x: torch.Tensor) -> torch.Tensor:
    return x @ p.W + p.b


def lstm_step(p: LSTMParams, x: torch.Tensor, prev: CellState, xw: torch.Tensor | None = None) -> CellState:
    """Standard LSTM recurrence; ``xw`` may carry a precomputed ``x @ W + b``."""
    if xw is None:
        _check_dims(p, x, prev.h)
        xw = input_projection(p, x)
    d = p.hidden
    z = xw
    zi, zf, zo, zu = z[..., :d], z[..., d : 2 * d], z[..., 2 * d : 3 * d], z[..., 3 * d :]
    hu = prev.h @ p.U_iou
    i = torch.sigmoid(zi + hu[..., :d])
    o = torch.sigmoid(zo + hu[..., d : 2 * d])
    u = torch.tanh(zu + hu[..., 2 * d :])
    f = torch.sigmoid(zf + prev.h @ p.U_f)
    c = i * u + f * prev.c
    h = o * torch.tanh(c)
    return CellState(h, c)


def lattice_cell(
    p: LSTMParams,
    xw: torch.Tensor,
    h_pred: torch.Tensor,
    c_pred: torch.Tensor,
    weight: torch.Tensor,
    mask: torch.Tensor,
    flags: MechanismFlags,
) -> CellState:
    """Batched child-sum step.

    Args:
        xw: ``[B, 4d]`` input projection ``x @ W + b``.
        h_pred, c_pred: ``[B, P, d]`` predecessor states (padded).
        weight: ``[B, P]`` backward-normalized arc weights (1.0 on padding).
        mask: ``[B, P]`` 1.0 for real predecessors, 0.0 for padding.
    """
    d = p.hidden
    zi, zf, zo, zu = xw[..., :d], xw[..., d : 2 * d], xw[..., 2 * d : 3 * d], xw[..., 3 * d :]
    coef = mask * weight if flags.wcs else mask
    h_sum = (coef.unsqueeze(-1) * h_pred).sum(dim=-2)
    hu = h_sum @ p.U_iou
    i = torch.sigmoid(zi + hu[..., :d])
    o = torch.sigmoid(zo + hu[..., d : 2 * d])
    u = torch.tanh(zu + hu[..., 2 * d :])
    f_pre = zf.unsqueeze(-2) + h_pred @ p.U_f
    if flags.bfg:
        f_pre = f_pre + torch.log(weight.clamp_min(MIN_WEIGHT)).unsqueeze(-1)
    f = torch.sigmoid(f_pre)
    c = i * u + (mask.unsqueeze(-1) * (f * c_pred)).sum(dim=-2)
    h = o * torch.tanh(c)
    return CellState(h, c)


def latticelstm_step(
    p: LSTMParams,
    x: torch.Tensor,
    preds: Sequence[tuple[CellState, float | torch.Tensor]],
    flags: MechanismFlags,
) -> CellState:
    """One LatticeLSTM node update from a list of ``(state, w^B)`` predecessors.

    Raises:
        ValueError: empty predecessor list, non-positive weight, or shape mismatch.
    """
    if not preds:
        raise ValueError("latticelstm_step needs at least one predecessor")
    for _, w in preds:
        if float(w) <= 0.0:
            raise ValueError(f"backward weight must be positive, got {float(w)}")
    _check_dims(p, x, preds[0][0].h)
    h_pred = torch.stack([s.h for s, _ in preds], dim=-2)
    c_pred = torch.stack([s.c for s, _ in preds], dim=-2)
    weight = torch.stack([torch.as_tensor(w, dtype=DTYPE) for _, w in preds]).expand(h_pred.shape[:-1])
    mask = torch.ones_like(weight)
    return lattice_cell(p, input_projection(p, x), h_pred, c_pred, weight, mask, flags)


def zero_state(hidden: int, batch: int | None = None) -> CellState:
    shape = (hidden,) if batch is None else (batch, hidden)
    return CellState(torch.zeros(shape, dtype=DTYPE), torch.zeros(shape, dtype=DTYPE))


def safe_log(w: torch.Tensor) -> torch.Tensor:
    return torch.log(w.clamp_min(MIN_WEIGHT))


def encode_node_lattice(
    p: LSTMParams, embed: torch.Tensor, token_ids: Sequence[int], nl: NodeLattice, flags: MechanismFlags
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reference (unbatched) lattice encoder.

    ``<s>`` is fed a zero state with weight 1. Returns per-node hidden states,
    attention inputs (marginal-scaled when WEO is on) and attention biases
    (log marginals when BATT is on).
    """
    preds = nl.predecessors()
    zero = zero_state(p.hidden)
    states: list[CellState] = []
    for e, node in enumerate(nl.nodes):
        x = embed[token_ids[e]]
        if e == 0:
            plist = [(zero, 1.0)]
        else:
            plist = [(states[nl.arcs[i].src], nl.arcs[i].bwd) for i in preds[e]]
        states.append(latticelstm_step(p, x, plist, flags))
    H = torch.stack([s.h for s in states])
    marg = torch.tensor([n.marginal for n in nl.nodes], dtype=DTYPE)
    values = marg.unsqueeze(-1) * H if flags.weo else H
    bias = safe_log(marg) if flags.batt else torch.zeros_like(marg)
    return H, values, bias


class AttentionParams(NamedTuple):
    Wq: torch.Tensor  # [dq, heads * hd]
    Wk: torch.Tensor  # [dk, heads * hd]
    Wv: torch.Tensor  # [dk, heads * hd]
    heads: int


def create_attention(store: ParameterStore, prefix: str, query_dim: int, key_dim: int, heads: int, head_dim: int) -> AttentionParams:
    Wq = store.create(f"{prefix}.Wq", (query_dim, heads * head_dim))
    Wk = store.create(f"{prefix}.Wk", (key_dim, heads * head_dim))
    Wv = store.create(f"{prefix}.Wv", (key_dim, heads * head_dim))
    return AttentionParams(Wq, Wk, Wv, heads)


def multi_head_attention(
    p: AttentionParams,
    query: torch.Tensor,
    keys: torch.Tensor,
    bias: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention with an additive per-position bias.

    Args:
        query: ``[..., T, dq]`` decoder states.
        keys: ``[..., N, dk]`` encoder outputs, used as keys and values.
        bias: ``[..., N]`` added to every head's scores (log marginals for BATT).
        mask: ``[..., N]`` 1.0 for real positions.

    Returns:
        ``(context [..., T, heads*hd], weights [..., heads, T, N])``.
    """
    if keys.shape[-2] == 0:
        raise ValueError("attention over an empty key set")
    H = p.heads
    total = p.Wq.shape[1]
    if total % H:
        raise ValueError(f"{H} heads do not divide projection size {total}")
    hd = total // H
    q = query @ p.Wq
    k = keys @ p.Wk
    v = keys @ p.Wv
    q = q.unflatten(-1, (H, hd)).transpose(-3, -2)  # [..., H, T, hd]
    k = k.unflatten(-1, (H, hd)).transpose(-3, -2)  # [..., H, N, hd]
    v = v.unflatten(-1, (H, hd)).transpose(-3, -2)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)  # [..., H, T, N]
    if bias is not None:
        scores = scores + bias.unsqueeze(-2).unsqueeze(-2)
    if mask is not None:
        scores = scores.masked_fill(mask.unsqueeze(-2).unsqueeze(-2) == 0, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    ctx = weights @ v  # [..., H, T, hd]
    ctx = ctx.transpose(-3, -2).flatten(-2)
    return ctx, weights


def finite_difference_gradient(
    loss_fn: Callable[[], float | torch.Tensor],
    params: dict[str, torch.Tensor],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central differences ``(f(t+d) - f(t-d)) / 2d`` for every scalar entry.

    ``loss_fn`` is called with no arguments and must read the tensors in
    ``params``, which are perturbed in place and restored afterwards.

    Raises:
        ValueError: if ``step <= 0``.
        NumericError: if the loss is not finite.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def evaluate() -> float:
        with torch.no_grad():
            v = float(loss_fn())
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss {v}")
        return v

    evaluate()
    grads = {}
    for name, t in params.items():
        flat = t.data.view(-1)
        g = np.zeros(flat.numel())
        for j in range(flat.numel()):
            orig = float(flat[j])
            flat[j] = orig + step
            up = evaluate()
            flat[j] = orig - step
            down = evaluate()
            flat[j] = orig
            g[j] = (up - down) / (2 * step)
        grads[name] = g.reshape(tuple(t.shape))
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
