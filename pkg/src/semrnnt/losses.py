"""Training objectives over the (t, u) lattice, and enumeration oracles.

Lattice convention (0-based): ``grid[t, u]`` is the joint output after the
encoder has produced frame ``t`` and the semantic decoder has consumed the
first ``u`` target pairs.  A path starts at (0, 0); blank moves ``t -> t+1``,
emission of target ``u+1`` moves ``u -> u+1``; the path ends with the blank
leaving (T-1, U).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Utterance, feature_pipeline
from .model import ModelParams, ParamsLike, _bound, decoder_step, encode, intent_logits, joint, start_decoder
from .numerics import NEG_INF, Tensor, log_add

MAX_BRUTE_FORCE_PATHS = 10**6
SLOT_MODES = ("ce", "rnnt_align")


@dataclass
class Lattice:
    wp_logprobs: Tensor    # (T, U+1, V^w + 1)
    slot_logprobs: Tensor  # (T, U+1, V^s + 1)

    @property
    def T(self) -> int:
        return self.wp_logprobs.shape[0]

    @property
    def U(self) -> int:
        return self.wp_logprobs.shape[1] - 1


@dataclass(frozen=True)
class AlignmentPath:
    """Interleaving of T blanks ("b") and U emissions ("e")."""

    moves: tuple[str, ...]

    def positions(self) -> list[tuple[int, int]]:
        """Lattice node (t, u) at which each move is taken."""
        t = u = 0
        out = []
        for m in self.moves:
            out.append((t, u))
            if m == "b":
                t += 1
            else:
                u += 1
        return out

    def is_valid(self, T: int) -> bool:
        """A path may not emit after the final blank has left the lattice."""
        return all(t < T for t, _ in self.positions())


@dataclass
class LossWeights:
    wp: float = 1.0
    slot: float = 1.0
    intent: float = 1.0

    def __post_init__(self):
        vals = (self.wp, self.slot, self.intent)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValueError("loss weights must be non-negative with at least one positive")


# -- model forward under teacher forcing ----------------------------------------


@dataclass
class ForwardOutputs:
    lattice: Lattice
    intent_logprobs: Tensor


def forward_utterance(params: ParamsLike, utt: Utterance) -> ForwardOutputs:
    p = _bound(params)
    feats = feature_pipeline(utt.features)
    H = encode(p, feats)
    if H.shape[0] == 0:
        raise ValueError("utterance has no frames")
    g, state = start_decoder(p)
    rows = [g]
    for w, s in zip(utt.tokens, utt.slots):
        g, state = decoder_step(p, state, w, s)
        rows.append(g)
    G = nx.stack(rows)
    T, E = H.shape
    wp, slot = joint(p, nx.reshape(H, (T, 1, E)), nx.reshape(G, (1, len(rows), G.shape[1])))
    return ForwardOutputs(Lattice(wp, slot), intent_logits(p, state.g_w))


def build_lattice(params: ParamsLike, utterance: Utterance) -> Lattice:
    return forward_utterance(params, utterance).lattice


# -- transducer forward-backward ------------------------------------------------


def _alpha(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    T, U1 = blank.shape
    alpha = np.full((T, U1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            a = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else NEG_INF
            b = alpha[t, u - 1] + emit[t, u - 1] if u > 0 else NEG_INF
            alpha[t, u] = log_add(a, b)
    return alpha


def _beta(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    T, U1 = blank.shape
    beta = np.full((T, U1), NEG_INF)
    for t in range(T - 1, -1, -1):
        for u in range(U1 - 1, -1, -1):
            if t == T - 1 and u == U1 - 1:
                beta[t, u] = blank[t, u]
                continue
            a = blank[t, u] + beta[t + 1, u] if t < T - 1 else NEG_INF
            b = emit[t, u] + beta[t, u + 1] if u < U1 - 1 else NEG_INF
            beta[t, u] = log_add(a, b)
    return beta


def transducer_nll(blank, emit) -> Tensor:
    """-log of the total path probability for gathered lattice scores.

    ``blank`` is (T, U+1) with the blank log-prob at each node; ``emit`` is
    (T, U) with the log-prob of the next target at each node.  The gradient is
    the negative posterior occupancy of each arc, from alpha/beta.
    """
    blank, emit = nx.constant(blank), nx.constant(emit)
    T, U1 = blank.shape
    if T == 0:
        raise ValueError("transducer loss needs at least one frame")
    if emit.shape != (T, U1 - 1):
        raise nx.ShapeError("transducer_nll", blank.shape, emit.shape)
    bv, ev = blank.value, emit.value
    alpha = _alpha(bv, ev)
    log_z = alpha[T - 1, U1 - 1] + bv[T - 1, U1 - 1]

    def vjp(g):
        beta = _beta(bv, ev)
        d_blank = np.zeros_like(bv)
        d_emit = np.zeros_like(ev)
        if T > 1:
            d_blank[:-1] = -np.exp(alpha[:-1] + bv[:-1] + beta[1:] - log_z)
        d_blank[T - 1, U1 - 1] = -1.0
        if U1 > 1:
            d_emit[:] = -np.exp(alpha[:, :-1] + ev + beta[:, 1:] - log_z)
        return g * d_blank, g * d_emit

    return nx.record("transducer_nll", np.asarray(-log_z), (blank, emit), vjp)


def _gather(grid: Tensor, targets: Sequence[int]) -> tuple[Tensor, Tensor]:
    T, U1, V1 = grid.shape
    targets = [int(y) for y in targets]
    if len(targets) != U1 - 1:
        raise nx.ShapeError("rnnt_loss (targets vs lattice rows)", (len(targets),), grid.shape)
    if any(not 0 <= y < V1 - 1 for y in targets):
        raise ValueError("targets must be label indices below the blank index")
    blank = grid[:, :, V1 - 1]
    if not targets:
        return blank, Tensor(np.zeros((T, 0)))
    tt = np.repeat(np.arange(T), U1 - 1).reshape(T, U1 - 1)
    uu = np.tile(np.arange(U1 - 1), (T, 1))
    yy = np.tile(np.array(targets), (T, 1))
    return blank, grid[tt, uu, yy]


def rnnt_loss(grid, targets: Sequence[int]) -> Tensor:
    """Transducer negative log-likelihood of ``targets`` on a (T, U+1, V+1) grid.

    The blank is the last column of the grid.
    """
    grid = nx.constant(grid)
    if grid.ndim != 3:
        raise nx.ShapeError("rnnt_loss", grid.shape)
    if grid.shape[0] == 0:
        raise ValueError("rnnt_loss: no frames")
    blank, emit = _gather(grid, targets)
    return transducer_nll(blank, emit)


def enumerate_alignments(T: int, U: int) -> list[AlignmentPath]:
    """All C(T+U, U) interleavings of T blanks and U emissions."""
    n = math.comb(T + U, U)
    if n > MAX_BRUTE_FORCE_PATHS:
        raise ValueError(f"{n} alignments exceed the enumeration limit {MAX_BRUTE_FORCE_PATHS}")
    out = []
    for emit_pos in itertools.combinations(range(T + U), U):
        moves = ["b"] * (T + U)
        for k in emit_pos:
            moves[k] = "e"
        out.append(AlignmentPath(tuple(moves)))
    return out


def _path_sum(T: int, U: int, move_logprob) -> float:
    total = NEG_INF
    for path in enumerate_alignments(T, U):
        if not path.is_valid(T):
            continue
        lp = sum(move_logprob(m, t, u) for m, (t, u) in zip(path.moves, path.positions()))
        total = log_add(total, lp)
    return -total


def rnnt_loss_bruteforce(grid, targets: Sequence[int]) -> float:
    """Same quantity as :func:`rnnt_loss` by summing every alignment explicitly."""
    g = grid.value if isinstance(grid, Tensor) else np.asarray(grid, dtype=np.float64)
    T, U1, V1 = g.shape
    if T == 0:
        raise ValueError("no frames")
    blank_idx = V1 - 1

    def lp(move, t, u):
        return g[t, u, blank_idx] if move == "b" else g[t, u, targets[u]]

    return _path_sum(T, U1 - 1, lp)


def aligned_loss_bruteforce(wp_grid, slot_grid, tokens: Sequence[int], slots: Sequence[int]) -> float:
    """Product-lattice term by enumeration: each move scores p_wp * p_slot."""
    w = np.asarray(getattr(wp_grid, "value", wp_grid), dtype=np.float64)
    s = np.asarray(getattr(slot_grid, "value", slot_grid), dtype=np.float64)
    T, U1, _ = w.shape
    bw, bs = w.shape[2] - 1, s.shape[2] - 1

    def lp(move, t, u):
        if move == "b":
            return w[t, u, bw] + s[t, u, bs]
        return w[t, u, tokens[u]] + s[t, u, slots[u]]

    return _path_sum(T, U1 - 1, lp)


# -- multi-task objectives ------------------------------------------------------


def ce_intent_loss(intent_logprobs, y_i: int) -> Tensor:
    lp = nx.constant(intent_logprobs)
    if not 0 <= y_i < lp.shape[-1]:
        raise IndexError(f"intent index {y_i} outside [0, {lp.shape[-1]})")
    return -lp[int(y_i)]


def ce_slot_loss(lattice: Lattice, slots: Sequence[int]) -> Tensor:
    """Cross entropy of the next slot tag at each decoder state, averaged over frames.

    Decoder state ``u`` (having consumed ``u`` targets) is scored against
    ``slots[u]`` at every frame; the blank column is never a target.
    """
    grid = lattice.slot_logprobs
    T, U1, V1 = grid.shape
    if len(slots) != U1 - 1:
        raise nx.ShapeError("ce_slot_loss", (len(slots),), grid.shape)
    if not slots:
        raise ValueError("ce_slot_loss needs at least one slot target")
    if any(not 0 <= s < V1 - 1 for s in slots):
        raise ValueError("slot targets must be below the blank index")
    uu = np.arange(U1 - 1)
    picked = grid[:, uu, np.asarray(slots)]  # (T, U)
    return -nx.sum_(picked) * (1.0 / T)


def aligned_rnnt_loss(lattice: Lattice, tokens: Sequence[int], slots: Sequence[int]) -> Tensor:
    """Slot transducer loss plus the transducer loss of the product lattice.

    In the product lattice every emission scores ``log p_wp(next token) +
    log p_slot(next tag)`` and every blank scores ``log p_wp(blank) + log
    p_slot(blank)``.
    """
    slot_term = rnnt_loss(lattice.slot_logprobs, slots)
    wb, we = _gather(lattice.wp_logprobs, tokens)
    sb, se = _gather(lattice.slot_logprobs, slots)
    return slot_term + transducer_nll(wb + sb, we + se)


def utterance_losses(params: ParamsLike, utt: Utterance, slot_mode: str) -> dict[str, Tensor]:
    out = forward_utterance(params, utt)
    lat = out.lattice
    comps = {"wp": rnnt_loss(lat.wp_logprobs, utt.tokens),
             "intent": ce_intent_loss(out.intent_logprobs, utt.intent)}
    if slot_mode == "ce":
        comps["slot"] = ce_slot_loss(lat, utt.slots) if utt.slots else Tensor(0.0)
    elif slot_mode == "rnnt_align":
        comps["slot"] = aligned_rnnt_loss(lat, utt.tokens, utt.slots)
    else:
        raise ValueError(f"slot_mode must be one of {SLOT_MODES}, got {slot_mode!r}")
    return comps


def batch_loss(params: ParamsLike, batch: Sequence[Utterance], weights: LossWeights,
               slot_mode: str = "ce") -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted multi-task loss summed over ``batch``, plus per-component sums."""
    if not batch:
        raise ValueError("empty batch")
    sums: dict[str, Tensor] = {}
    for utt in batch:
        for k, v in utterance_losses(params, utt, slot_mode).items():
            sums[k] = v if k not in sums else sums[k] + v
    total = sums["wp"] * weights.wp + sums["slot"] * weights.slot + sums["intent"] * weights.intent
    return total, sums


@dataclass
class LossResult:
    total: float
    components: dict[str, float]
    grads: dict[str, np.ndarray]
    tape: nx.Tape = field(repr=False)


def total_loss(params: ModelParams, batch: Sequence[Utterance], weights: LossWeights | None = None,
               slot_mode: str = "ce") -> LossResult:
    """Evaluate the batch loss on a fresh tape and backpropagate to every parameter."""
    weights = weights or LossWeights()
    tape = nx.Tape()
    bound = params.bind(tape)
    total, comps = batch_loss(bound, batch, weights, slot_mode)
    value = total.item()
    grads = nx.backward(tape, total) if math.isfinite(value) else {}
    return LossResult(value, {k: v.item() for k, v in comps.items()}, grads, tape)
