"""ASR and NLU error rates: WER, SemER, IRER, ICER, relative reductions."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

OTHER = "Other"


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_counts(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> EditCounts:
    """Levenshtein alignment of ``hyp`` against ``ref``.

    Among minimum-distance alignments the one with the most substitutions is
    chosen, so swapping the arguments swaps deletions and insertions exactly.
    """
    n, m = len(ref), len(hyp)
    # cell = (distance, insertions + deletions, subs, dels, ins)
    prev = [(j, j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i, 0, i, 0)]
        for j in range(1, m + 1):
            d, gaps, s, dl, ins = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (d, gaps, s, dl, ins)
            else:
                diag = (d + 1, gaps, s + 1, dl, ins)
            d, gaps, s, dl, ins = prev[j]
            up = (d + 1, gaps + 1, s, dl + 1, ins)
            d, gaps, s, dl, ins = cur[j - 1]
            left = (d + 1, gaps + 1, s, dl, ins + 1)
            cur.append(min(diag, up, left, key=lambda c: (c[0], c[1])))
        prev = cur
    _, _, s, dl, ins = prev[m]
    return EditCounts(s, dl, ins)


def wer(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> float:
    if len(ref) == 0:
        raise ValueError("WER is undefined for an empty reference")
    return edit_counts(ref, hyp).errors / len(ref)


def corpus_wer(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    total = sum(len(r) for r, _ in pairs)
    if total == 0:
        raise ValueError("WER is undefined for empty references")
    return sum(edit_counts(r, h).errors for r, h in pairs) / total


# -- semantic error rate --------------------------------------------------------


@dataclass(frozen=True)
class SlotChunk:
    tag: str
    value: tuple


def slot_chunks(tokens: Sequence, tags: Sequence, other: str = OTHER) -> list[SlotChunk]:
    """Collapse runs of equal non-``other`` tags into (tag, token span) chunks."""
    if len(tokens) != len(tags):
        raise ValueError(f"{len(tokens)} tokens but {len(tags)} slot tags")
    chunks: list[SlotChunk] = []
    cur_tag, cur = None, []
    for tok, tag in zip(tokens, tags):
        if tag == cur_tag:
            cur.append(tok)
            continue
        if cur_tag is not None and cur_tag != other:
            chunks.append(SlotChunk(cur_tag, tuple(cur)))
        cur_tag, cur = tag, [tok]
    if cur_tag is not None and cur_tag != other:
        chunks.append(SlotChunk(cur_tag, tuple(cur)))
    return chunks


@dataclass(frozen=True)
class SemErrCounts:
    correct: int = 0
    deletion: int = 0
    insertion: int = 0
    substitution: int = 0
    intent_error: bool = False

    def __add__(self, other: "SemErrCounts") -> "SemErrCounts":
        return SemErrCounts(self.correct + other.correct, self.deletion + other.deletion,
                            self.insertion + other.insertion, self.substitution + other.substitution,
                            self.intent_error or other.intent_error)

    @property
    def errors(self) -> int:
        return self.deletion + self.insertion + self.substitution

    @property
    def denominator(self) -> int:
        return self.correct + self.deletion + self.substitution

    @property
    def rate(self) -> float:
        # zero denominator: no reference slots and a correct intent
        return self.errors / max(self.denominator, 1)

    def to_json(self) -> dict:
        return asdict(self)


def semer_counts(ref_tokens, ref_slots, ref_intent, hyp_tokens, hyp_slots, hyp_intent,
                 other: str = OTHER) -> SemErrCounts:
    ref = slot_chunks(ref_tokens, ref_slots, other)
    hyp = slot_chunks(hyp_tokens, hyp_slots, other)
    unused = list(hyp)
    correct = deletion = substitution = 0
    for chunk in ref:
        exact = next((h for h in unused if h == chunk), None)
        if exact is not None:
            unused.remove(exact)
            correct += 1
            continue
        same_tag = next((h for h in unused if h.tag == chunk.tag), None)
        if same_tag is not None:
            unused.remove(same_tag)
            substitution += 1
        else:
            deletion += 1
    intent_error = ref_intent != hyp_intent
    return SemErrCounts(correct, deletion, len(unused), substitution + int(intent_error), intent_error)


def semer(ref_tokens, ref_slots, ref_intent, hyp_tokens, hyp_slots, hyp_intent,
          other: str = OTHER) -> tuple[float, SemErrCounts]:
    """Semantic error rate of one hypothesis.

    Chunks are matched greedily in reference order: same tag and value is
    correct, same tag with another value a substitution, an unmatched
    reference chunk a deletion, a leftover hypothesis chunk an insertion.  A
    wrong intent adds one substitution.
    """
    counts = semer_counts(ref_tokens, ref_slots, ref_intent, hyp_tokens, hyp_slots, hyp_intent, other)
    return counts.rate, counts


def corpus_semer(counts: Sequence[SemErrCounts]) -> float:
    total = sum(counts, SemErrCounts())
    return total.errors / max(total.denominator, 1)


def irer(counts: Sequence[SemErrCounts]) -> float:
    """Fraction of utterances with any slot or intent error."""
    if not counts:
        raise ValueError("IRER needs at least one utterance")
    return sum(1 for c in counts if c.errors > 0 or c.intent_error) / len(counts)


def icer(ref_intents: Sequence, hyp_intents: Sequence) -> float:
    if not ref_intents:
        raise ValueError("ICER needs at least one utterance")
    if len(ref_intents) != len(hyp_intents):
        raise ValueError("reference and hypothesis intent lists differ in length")
    return sum(r != h for r, h in zip(ref_intents, hyp_intents)) / len(ref_intents)


def relative_reduction(baseline: float, candidate: float) -> float:
    """Relative error-rate reduction of ``candidate`` over ``baseline`` in percent."""
    if baseline <= 0:
        raise ValueError("relative reduction needs a positive baseline rate")
    return 100.0 * (baseline - candidate) / baseline
