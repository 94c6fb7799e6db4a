"""Greedy and semantic beam-search decoding, streaming sessions, exhaustive oracle.

The beam search is frame synchronous.  At every frame each live hypothesis is
expanded repeatedly; an expansion is either the word-piece blank (the
hypothesis moves on to the next frame) or a (word piece, slot tag) pair (it
stays on the frame with one more label).  Candidates are pruned per
hypothesis to ``B_local`` and globally to ``B_beam`` at every expansion step.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import model as M
from .model import DecoderState, ParamsLike

MAX_EXHAUSTIVE = 10**6


@dataclass(frozen=True)
class BeamConfig:
    """Semantic beam sizes, in the order ``(B_wp, B_slot, B_local, B_beam)``.

    ``max_emits_per_frame`` caps label emissions per frame; once reached the
    blank is forced.  ``max_output_len`` optionally caps the total number of
    emitted labels the same way.
    """

    B_wp: int = 1
    B_slot: int = 1
    B_local: int = 1
    B_beam: int = 1
    max_emits_per_frame: int = 5
    max_output_len: int | None = None

    def __post_init__(self):
        for name in ("B_wp", "B_slot", "B_local", "B_beam", "max_emits_per_frame"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.max_output_len is not None and self.max_output_len < 0:
            raise ValueError("max_output_len must be non-negative")

    @classmethod
    def parse(cls, text: str, **kwargs) -> "BeamConfig":
        """Parse ``"Bwp,Bslot,Blocal,Bbeam"`` (e.g. ``"10,2,10,8"``)."""
        parts = [p.strip() for p in str(text).strip().strip("()").split(",")]
        if len(parts) != 4 or any(not p for p in parts):
            raise ValueError(f"beam tuple must have four comma-separated sizes, got {text!r}")
        try:
            sizes = [int(p) for p in parts]
        except ValueError:
            raise ValueError(f"beam sizes must be integers, got {text!r}") from None
        return cls(*sizes, **kwargs)

    def astuple(self) -> tuple[int, int, int, int]:
        return (self.B_wp, self.B_slot, self.B_local, self.B_beam)


GREEDY = BeamConfig(1, 1, 1, 1)


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    slots: tuple[int, ...]
    score: float
    state: DecoderState
    g: object  # fused decoder output for the current state
    frames_consumed: int = 0

    @property
    def key(self) -> tuple:
        return (self.tokens, self.slots)


@dataclass
class NBestEntry:
    tokens: list[int]
    slots: list[int]
    score: float


@dataclass
class DecodeResult:
    n_best: list[NBestEntry]
    intent: int
    intent_logprobs: np.ndarray

    @property
    def best(self) -> NBestEntry:
        return self.n_best[0]

    def same_as(self, other: "DecodeResult") -> bool:
        """Exact equality: sequences, bitwise scores, intent distribution."""
        if len(self.n_best) != len(other.n_best) or self.intent != other.intent:
            return False
        for a, b in zip(self.n_best, other.n_best):
            if a.tokens != b.tokens or a.slots != b.slots or a.score != b.score:
                return False
        return bool(np.array_equal(self.intent_logprobs, other.intent_logprobs))

    def to_json(self) -> dict:
        return {
            "n_best": [{"tokens": e.tokens, "slots": e.slots, "score": e.score} for e in self.n_best],
            "intent": self.intent,
            "intent_logprobs": self.intent_logprobs.tolist(),
        }


def _rows(H) -> np.ndarray:
    H = H.value if hasattr(H, "value") else np.asarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise ValueError(f"encoder output must be (T, E), got shape {H.shape}")
    return H


def _scores(params, h, g) -> tuple[np.ndarray, np.ndarray]:
    wp, slot = M.joint(params, h, g)
    return wp.value, slot.value


def _topk(values: np.ndarray, k: int) -> np.ndarray:
    # stable: ties resolve to the lower index, matching np.argmax
    return np.argsort(-values, kind="stable")[:k]


def _initial_hypothesis(params) -> Hypothesis:
    g, state = M.start_decoder(params)
    return Hypothesis((), (), 0.0, state, g, 0)


def _result(params, hyps: list[Hypothesis]) -> DecodeResult:
    top = hyps[0]
    lp = M.intent_logits(params, top.state.g_w).value
    return DecodeResult([NBestEntry(list(h.tokens), list(h.slots), h.score) for h in hyps],
                        int(np.argmax(lp)), lp)


def _sort(hyps) -> list[Hypothesis]:
    return sorted(hyps, key=lambda h: (-h.score, h.tokens, h.slots))


# -- greedy -----------------------------------------------------------------


def greedy_decode(params: ParamsLike, H, max_emits_per_frame: int = 5,
                  max_output_len: int | None = None) -> DecodeResult:
    """Argmax decoding: emit (argmax word piece, argmax slot) until blank wins."""
    cfg = params.config
    blank = cfg.blank_wp
    hyp = _initial_hypothesis(params)
    tokens, slots, score, state, g = [], [], hyp.score, hyp.state, hyp.g
    for h in _rows(H):
        emitted = 0
        while True:
            lp_w, lp_s = _scores(params, h, g)
            forced = emitted >= max_emits_per_frame or (
                max_output_len is not None and len(tokens) >= max_output_len)
            w = blank if forced else int(np.argmax(lp_w))
            if w == blank:
                score = score + lp_w[blank]
                break
            s = int(np.argmax(lp_s[:cfg.n_slot]))
            score = score + (lp_w[w] + lp_s[s])
            g, state = M.decoder_step(params, state, w, s)
            tokens.append(w)
            slots.append(s)
            emitted += 1
    final = Hypothesis(tuple(tokens), tuple(slots), float(score), state, g, len(_rows(H)))
    return _result(params, [final])


# -- semantic beam search -----------------------------------------------------


@dataclass
class _Candidate:
    score: float
    parent: Hypothesis
    wp: int | None = None  # None: blank
    slot: int | None = None


class _BeamSearch:
    """Frame-synchronous search state; one :meth:`advance` per encoder frame."""

    def __init__(self, params: ParamsLike, config: BeamConfig):
        self.params = params
        self.config = config
        self.beam = [_initial_hypothesis(params)]
        self.frames = 0

    def _expand(self, hyp: Hypothesis, h: np.ndarray, step: int) -> list[_Candidate]:
        cfg, bc = self.params.config, self.config
        blank = cfg.blank_wp
        lp_w, lp_s = _scores(self.params, h, hyp.g)
        forced = step >= bc.max_emits_per_frame or (
            bc.max_output_len is not None and len(hyp.tokens) >= bc.max_output_len)
        if forced:
            return [_Candidate(hyp.score + lp_w[blank], hyp)]
        local = []  # (local log-prob, wp, slot)
        top_slots = _topk(lp_s[:cfg.n_slot], bc.B_slot)
        for w in _topk(lp_w, bc.B_wp):
            w = int(w)
            if w == blank:
                local.append((lp_w[blank], None, None))
            else:
                for s in top_slots:
                    local.append((lp_w[w] + lp_s[s], w, int(s)))
        order = sorted(range(len(local)), key=lambda i: -local[i][0])[:bc.B_local]
        return [_Candidate(hyp.score + local[i][0], hyp, local[i][1], local[i][2]) for i in order]

    def advance(self, h: np.ndarray) -> None:
        bc = self.config
        active = self.beam
        finished: dict[tuple, Hypothesis] = {}
        step = 0
        while active:
            pool = []
            for hyp in active:
                pool.extend(self._expand(hyp, h, step))
            pool = sorted(pool, key=lambda c: -c.score)[:bc.B_beam]
            grown: dict[tuple, Hypothesis] = {}
            for cand in pool:
                par = cand.parent
                if cand.wp is None:
                    key = par.key
                    if key in finished:
                        finished[key].score = float(np.logaddexp(finished[key].score, cand.score))
                    else:
                        finished[key] = Hypothesis(par.tokens, par.slots, float(cand.score),
                                                   par.state, par.g, self.frames + 1)
                else:
                    key = (par.tokens + (cand.wp,), par.slots + (cand.slot,))
                    if key in grown:
                        grown[key].score = float(np.logaddexp(grown[key].score, cand.score))
                    else:
                        g, state = M.decoder_step(self.params, par.state, cand.wp, cand.slot)
                        grown[key] = Hypothesis(key[0], key[1], float(cand.score), state, g, self.frames)
            active = list(grown.values())
            step += 1
        self.beam = _sort(finished.values())[:bc.B_beam]
        self.frames += 1

    def result(self) -> DecodeResult:
        return _result(self.params, _sort(self.beam))


def semantic_beam_search(params: ParamsLike, H, config: BeamConfig) -> DecodeResult:
    """Decode encoder outputs ``H`` (T, enc_out) with the semantic beam search."""
    search = _BeamSearch(params, config)
    for h in _rows(H):
        search.advance(h)
    return search.result()


class StreamingSession:
    """Incremental decoder over post-pipeline feature frames.

    Frames are encoded one at a time and the beam advances per frame, so the
    final result equals :func:`semantic_beam_search` on the full input.
    """

    def __init__(self, params: ParamsLike, config: BeamConfig):
        self.params = params
        self._search = _BeamSearch(params, config)
        self._enc_state = M.initial_encoder_state(params)
        self._closed = False

    @property
    def frames_consumed(self) -> int:
        return self._search.frames

    def push_frames(self, chunk) -> None:
        if self._closed:
            raise RuntimeError("push_frames after finalize()")
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.size == 0:
            return
        if chunk.ndim == 1:
            chunk = chunk[None, :]
        for x_t in chunk:
            h, self._enc_state = M.encoder_step(self.params, self._enc_state, x_t)
            self._search.advance(h.value)

    def partial(self) -> DecodeResult:
        """Current n-best after the frames pushed so far."""
        return self._search.result()

    def finalize(self) -> DecodeResult:
        self._closed = True
        return self._search.result()


def streaming_session(params: ParamsLike, config: BeamConfig) -> StreamingSession:
    return StreamingSession(params, config)


# -- exhaustive oracle ----------------------------------------------------------


def sequence_logprob(params: ParamsLike, H, tokens, slots,
                     max_emits_per_frame: int | None = None) -> float:
    """log of the summed probability of every alignment of one label sequence.

    Alignments emitting more than ``max_emits_per_frame`` labels on a frame are
    excluded.  Uses the decoding joint, so numbers are on the beam's scale.
    """
    cfg = params.config
    rows = _rows(H)
    T, U = len(rows), len(tokens)
    cap = U if max_emits_per_frame is None else max_emits_per_frame
    g, state = M.start_decoder(params)
    gs = [g]
    for w, s in zip(tokens, slots):
        g, state = M.decoder_step(params, state, w, s)
        gs.append(g)
    blank = np.empty((T, U + 1))
    emit = np.empty((T, U))
    for t in range(T):
        for u in range(U + 1):
            lp_w, lp_s = _scores(params, rows[t], gs[u])
            blank[t, u] = lp_w[cfg.blank_wp]
            if u < U:
                emit[t, u] = lp_w[tokens[u]] + lp_s[slots[u]]
    enter = np.full(U + 1, -np.inf)
    enter[0] = 0.0
    for t in range(T):
        within = [enter]
        for _ in range(cap):
            prev = within[-1]
            nxt = np.full(U + 1, -np.inf)
            nxt[1:] = prev[:-1] + emit[t]
            within.append(nxt)
        reach = np.logaddexp.reduce(np.stack(within), axis=0)
        enter = reach + blank[t]
    return float(enter[U])


def exhaustive_decode(params: ParamsLike, H, max_len: int,
                      max_emits_per_frame: int | None = None) -> NBestEntry:
    """Best label sequence of length <= ``max_len`` by total alignment probability."""
    cfg = params.config
    T = len(_rows(H))
    pairs = [(w, s) for w in range(cfg.n_wp) for s in range(cfg.n_slot)]
    size = len(pairs) ** max_len * math.comb(T + max_len, max_len)
    if size > MAX_EXHAUSTIVE:
        raise ValueError(f"exhaustive search space {size} exceeds {MAX_EXHAUSTIVE}")
    best = None
    for L in range(max_len + 1):
        for seq in itertools.product(pairs, repeat=L):
            tokens = [w for w, _ in seq]
            slots = [s for _, s in seq]
            score = sequence_logprob(params, H, tokens, slots, max_emits_per_frame)
            if best is None or score > best.score:
                best = NBestEntry(tokens, slots, score)
    return best
