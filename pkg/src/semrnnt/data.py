"""Synthetic SLU corpora, vocabularies, dataset files and the feature front-end."""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FRAME_DIM = 64
STACK = 3
BOS = "<s>"
OTHER = "Other"

_PLACEHOLDER = re.compile(r"^<([^<>]+)>$")


@dataclass
class Vocabulary:
    """Closed label sets.

    Index 0 of ``word_pieces`` and ``slot_tags`` is the start symbol fed to the
    prediction networks before any label.  Blank indices sit one past the end
    of each list and therefore never name a real label.
    """

    word_pieces: list[str]
    slot_tags: list[str]
    intents: list[str]

    def __post_init__(self):
        for label, items in (("word_pieces", self.word_pieces), ("slot_tags", self.slot_tags),
                             ("intents", self.intents)):
            if len(set(items)) != len(items):
                raise ValueError(f"duplicate entries in {label}")
            if not items:
                raise ValueError(f"{label} is empty")
        if OTHER not in self.slot_tags:
            raise ValueError(f"slot_tags must contain {OTHER!r}")
        self._wp = {w: i for i, w in enumerate(self.word_pieces)}
        self._slot = {s: i for i, s in enumerate(self.slot_tags)}
        self._intent = {s: i for i, s in enumerate(self.intents)}

    @property
    def n_wp(self) -> int:
        return len(self.word_pieces)

    @property
    def n_slot(self) -> int:
        return len(self.slot_tags)

    @property
    def n_intent(self) -> int:
        return len(self.intents)

    @property
    def blank_wp(self) -> int:
        return self.n_wp

    @property
    def blank_slot(self) -> int:
        return self.n_slot

    bos_wp = 0
    bos_slot = 0

    @property
    def other(self) -> int:
        return self._slot[OTHER]

    def wp_index(self, token: str) -> int:
        try:
            return self._wp[token]
        except KeyError:
            raise KeyError(f"unknown word piece {token!r}") from None

    def slot_index(self, tag: str) -> int:
        try:
            return self._slot[tag]
        except KeyError:
            raise KeyError(f"unknown slot tag {tag!r}") from None

    def intent_index(self, intent: str) -> int:
        try:
            return self._intent[intent]
        except KeyError:
            raise KeyError(f"unknown intent {intent!r}") from None

    def to_json(self) -> dict:
        return {"word_pieces": self.word_pieces, "slot_tags": self.slot_tags,
                "intents": self.intents}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(list(obj["word_pieces"]), list(obj["slot_tags"]), list(obj["intents"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Utterance:
    """One supervised example: raw frames, aligned token/slot indices, intent."""

    features: np.ndarray
    tokens: list[int]
    slots: list[int]
    intent: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.tokens) != len(self.slots):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.slots)} slots")

    @property
    def num_labels(self) -> int:
        return len(self.tokens)

    def validate(self, vocab: Vocabulary) -> None:
        if any(not 0 <= t < vocab.n_wp for t in self.tokens):
            raise ValueError("token index outside the word-piece range (blank is not a target)")
        if any(not 0 <= s < vocab.n_slot for s in self.slots):
            raise ValueError("slot index outside the slot-tag range (blank is not a target)")
        if not 0 <= self.intent < vocab.n_intent:
            raise ValueError(f"intent index {self.intent} out of range")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (list(self.tokens) == list(other.tokens) and list(self.slots) == list(other.slots)
                and self.intent == other.intent
                and self.features.shape == other.features.shape
                and bool(np.array_equal(self.features, other.features)))


@dataclass
class GrammarSpec:
    """Template grammar for synthetic commands.

    ``templates`` holds ``(pattern, intent)`` pairs where the pattern is a
    whitespace-separated token string with ``<SlotTag>`` placeholders.
    ``fillers`` maps each slot tag to candidate values; a value may span
    several tokens ("living room").
    """

    templates: list[tuple[str, str]]
    fillers: dict[str, list[str]]
    frames_per_token: int = 6
    noise_sigma: float = 0.1

    def __post_init__(self):
        self.templates = [tuple(t) if not isinstance(t, dict) else (t["pattern"], t["intent"])
                          for t in self.templates]
        if not self.templates:
            raise ValueError("grammar has no templates")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        for pattern, intent in self.templates:
            if not intent:
                raise ValueError(f"template {pattern!r} names no intent")
            for piece in pattern.split():
                m = _PLACEHOLDER.match(piece)
                if m and not self.fillers.get(m.group(1)):
                    raise ValueError(f"placeholder <{m.group(1)}> has no fillers")

    @classmethod
    def from_json(cls, obj: dict) -> "GrammarSpec":
        return cls(templates=obj["templates"], fillers={k: list(v) for k, v in obj["fillers"].items()},
                   frames_per_token=int(obj.get("frames_per_token", 6)),
                   noise_sigma=float(obj.get("noise_sigma", 0.1)))

    @classmethod
    def load(cls, path) -> "GrammarSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> dict:
        return {"templates": [{"pattern": p, "intent": i} for p, i in self.templates],
                "fillers": self.fillers, "frames_per_token": self.frames_per_token,
                "noise_sigma": self.noise_sigma}

    def vocabulary(self) -> Vocabulary:
        words, tags, intents = [BOS], [BOS, OTHER], []

        def add(seq, item):
            if item not in seq:
                seq.append(item)

        for pattern, intent in self.templates:
            add(intents, intent)
            for piece in pattern.split():
                m = _PLACEHOLDER.match(piece)
                if m:
                    add(tags, m.group(1))
                    for value in self.fillers[m.group(1)]:
                        for w in value.split():
                            add(words, w)
                else:
                    add(words, piece)
        return Vocabulary(words, tags, intents)


TOY_GRAMMAR = GrammarSpec(
    templates=[
        ("turn on the <DeviceLocation> <ApplianceType>", "TurnOnApplianceIntent"),
        ("turn off the <DeviceLocation> <ApplianceType>", "TurnOffApplianceIntent"),
        ("set the <DeviceLocation> temperature to <Number>", "SetTemperatureIntent"),
    ],
    fillers={
        "DeviceLocation": ["kitchen", "bedroom", "garage", "living room"],
        "ApplianceType": ["light", "fan", "heater"],
        "Number": ["twenty", "seventy", "five"],
    },
    frames_per_token=6,
    noise_sigma=0.1,
)


def generate_corpus(grammar: GrammarSpec, n: int, seed: int) -> tuple[list[Utterance], Vocabulary]:
    """Sample ``n`` utterances from ``grammar``.

    Each token contributes ``frames_per_token`` copies of its codebook row plus
    Gaussian noise.  The codebook is drawn first from the same seed, so corpora
    generated with one seed share acoustics.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    vocab = grammar.vocabulary()
    rng = np.random.default_rng(seed)
    codebook = rng.standard_normal((vocab.n_wp, FRAME_DIM))
    out = []
    for _ in range(n):
        pattern, intent = grammar.templates[rng.integers(len(grammar.templates))]
        words, tags = [], []
        for piece in pattern.split():
            m = _PLACEHOLDER.match(piece)
            if m:
                options = grammar.fillers[m.group(1)]
                value = options[rng.integers(len(options))].split()
                words.extend(value)
                tags.extend([m.group(1)] * len(value))
            else:
                words.append(piece)
                tags.append(OTHER)
        tokens = [vocab.wp_index(w) for w in words]
        frames = np.repeat(codebook[tokens], grammar.frames_per_token, axis=0)
        if grammar.noise_sigma > 0:
            frames = frames + grammar.noise_sigma * rng.standard_normal(frames.shape)
        out.append(Utterance(frames, tokens, [vocab.slot_index(t) for t in tags],
                             vocab.intent_index(intent)))
    return out, vocab


def feature_pipeline(features: np.ndarray) -> np.ndarray:
    """Stack each frame with its two left neighbours, then keep every third.

    Output row ``t`` (0-based) is ``[x[3t-2]; x[3t-1]; x[3t]]`` with indices
    below zero clamped to the first frame, giving ``ceil(T_raw / 3)`` rows of
    width ``3 * D``.  Row ``t`` only looks at raw frames up to ``3t``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a non-empty (T_raw, D) matrix, got shape {x.shape}")
    n_out = math.ceil(x.shape[0] / STACK)
    centers = STACK * np.arange(n_out)
    cols = [x[np.maximum(centers - lag, 0)] for lag in range(STACK - 1, -1, -1)]
    return np.concatenate(cols, axis=1)


# -- JSON Lines datasets -----------------------------------------------------


def save_dataset(path, utterances: Iterable[Utterance], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt in utterances:
            rec = {
                "tokens": [vocab.word_pieces[t] for t in utt.tokens],
                "slots": [vocab.slot_tags[s] for s in utt.slots],
                "intent": vocab.intents[utt.intent],
                "features": utt.features.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


class DatasetError(ValueError):
    pass


def load_dataset(path, vocab: Vocabulary) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tokens = [vocab.wp_index(t) for t in rec["tokens"]]
                slots = [vocab.slot_index(s) for s in rec["slots"]]
                intent = vocab.intent_index(rec["intent"])
                utt = Utterance(np.array(rec["features"], dtype=np.float64), tokens, slots, intent)
            except KeyError as exc:
                msg = str(exc.args[0])
                if not msg.startswith("unknown"):
                    msg = f"missing field {msg!r}"
                raise DatasetError(f"{path}:{lineno}: {msg}") from None
            except (ValueError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            out.append(utt)
    return out


def vocab_path_for(dataset_path) -> Path:
    """Sidecar vocabulary file written next to a dataset."""
    p = Path(dataset_path)
    return p.with_name(p.name + ".vocab.json")


def split_held_out(n: int, fraction_tenths: int = 1) -> tuple[list[int], list[int]]:
    """Deterministic ~90/10 split of indices ``0..n-1`` by CRC32 of the index."""
    train, held = [], []
    for i in range(n):
        (held if zlib.crc32(str(i).encode()) % 10 < fraction_tenths else train).append(i)
    return train, held


def corpus_stats(utterances: Sequence[Utterance], vocab: Vocabulary) -> dict:
    lengths = [u.num_labels for u in utterances]
    return {
        "utterances": len(utterances),
        "tokens": int(sum(lengths)),
        "max_len": int(max(lengths)) if lengths else 0,
        "frames": int(sum(u.features.shape[0] for u in utterances)),
        "word_pieces": vocab.n_wp,
        "slot_tags": vocab.n_slot,
        "intents": vocab.n_intent,
    }
