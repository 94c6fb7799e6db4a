"""Mini-batch training loop and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from . import numerics as nx
from .data import Utterance, Vocabulary, feature_pipeline, split_held_out
from .decoding import BeamConfig, greedy_decode, semantic_beam_search
from .losses import SLOT_MODES, LossWeights, total_loss
from .model import ModelConfig, ModelParams, encode, init_params, save_checkpoint

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip_norm: float = 5.0
    seed: int = 0
    slot_mode: str = "ce"
    # for this many leading epochs the prediction networks and the intent head
    # are frozen, with the word-piece and slot output projections zeroed, so the
    # joint network sees only the encoder and must align labels to the audio
    # before the label prior can explain the transcript on its own
    predictor_warmup_epochs: int = 0
    # decoupled (AdamW-style) shrinkage applied to weight matrices only
    weight_decay: float = 0.0
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.predictor_warmup_epochs < 0:
            raise ValueError("predictor_warmup_epochs must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.slot_mode not in SLOT_MODES:
            raise ValueError(f"slot_mode must be one of {SLOT_MODES}")

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)

    def to_json(self) -> dict:
        return asdict(self)


# recipe for the synthetic toy grammar: single-utterance batches and a
# frozen-predictor warm-up keep the joint network from explaining transcripts
# by label prior; weight decay keeps its tanh layer out of saturation and the
# heavier intent weight separates intents that differ in one early word
TOY_TRAIN_CONFIG = TrainConfig(epochs=30, batch_size=1, learning_rate=3e-3, predictor_warmup_epochs=10,
                               weight_decay=0.1, loss_weights=LossWeights(intent=3.0))

PREDICTOR_PREFIXES = ("wp.", "slot.", "intent.")
PREDICTOR_OUTPUTS = ("wp.proj.W", "wp.proj.b", "slot.proj.W", "slot.proj.b")


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}, norm


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = {k: 0 for k in params}  # per tensor, so late-unfrozen ones get fresh bias correction

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             frozen: frozenset = frozenset()) -> None:
        """One update; names in ``frozen`` are left untouched, moments included."""
        for k, p in params.items():
            if k in frozen:
                continue
            self.t[k] += 1
            c1 = 1.0 - self.beta1 ** self.t[k]
            c2 = 1.0 - self.beta2 ** self.t[k]
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            if self.weight_decay and p.ndim == 2:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams
    epochs: list[dict]
    steps: list[dict]
    best_epoch: int | None = None


def _greedy_scores(params: ModelParams, data: Sequence[Utterance]) -> dict:
    refs, hyps, ref_int, hyp_int = [], [], [], []
    for utt in data:
        res = greedy_decode(params, encode(params, feature_pipeline(utt.features)))
        refs.append(utt.tokens)
        hyps.append(res.best.tokens)
        ref_int.append(utt.intent)
        hyp_int.append(res.intent)
    return {"wer": metrics.corpus_wer(list(zip(refs, hyps))), "icer": metrics.icer(ref_int, hyp_int)}


def train(model_config: ModelConfig, dataset: Sequence[Utterance], config: TrainConfig,
          held_out: Sequence[Utterance] | None = None, log_path=None,
          checkpoint_path=None, init: ModelParams | None = None) -> TrainResult:
    """Train from a fixed-seed initialisation with Adam and global-norm clipping.

    Without an explicit ``held_out`` set the data is split ~90/10 by index
    hash.  With ``checkpoint_path`` a checkpoint is written after every epoch
    (``<path>.epochNNN``) and at the best held-out WER (``<path>.best``).
    """
    if not dataset:
        raise ValueError("empty dataset")
    if held_out is None:
        tr, ho = split_held_out(len(dataset))
        train_set = [dataset[i] for i in tr]
        held_out = [dataset[i] for i in ho]
    else:
        train_set = list(dataset)
    params = init.copy() if init is not None else init_params(model_config, config.seed)
    opt = Adam(params.arrays, config.learning_rate, config.beta1, config.beta2, config.epsilon,
               config.weight_decay)
    rng = np.random.default_rng(config.seed)
    w = config.loss_weights
    predictor = frozenset(k for k in params.arrays if k.startswith(PREDICTOR_PREFIXES))
    if config.predictor_warmup_epochs > 0:
        for k in PREDICTOR_OUTPUTS:
            params.arrays[k][...] = 0.0
    epochs, steps = [], []
    best, best_epoch = math.inf, None
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_set))
            frozen = predictor if epoch <= config.predictor_warmup_epochs else frozenset()
            sums = {"total": 0.0, "wp": 0.0, "slot": 0.0, "intent": 0.0}
            for start in range(0, len(order), config.batch_size):
                batch = [train_set[i] for i in order[start:start + config.batch_size]]
                res = total_loss(params, batch, w, config.slot_mode)
                if not math.isfinite(res.total):
                    where = nx.first_nonfinite(res.tape) or "unknown tensor"
                    raise DivergenceError(f"epoch {epoch}, step {len(steps) + 1}: loss is "
                                          f"{res.total}; first non-finite value at {where}")
                grads = {k: g for k, g in res.grads.items() if k not in frozen}
                grads, norm = clip_by_global_norm(grads, config.grad_clip_norm)
                opt.step(params.arrays, grads, frozen)
                steps.append({"total": res.total, **res.components, "grad_norm": norm})
                sums["total"] += res.total
                for k, v in res.components.items():
                    sums[k] += v
            n = len(train_set)
            rec = {"epoch": epoch, **{f"loss_{k}": v / n for k, v in sums.items()}}
            if held_out:
                rec.update({f"heldout_{k}": v for k, v in _greedy_scores(params, held_out).items()})
            epochs.append(rec)
            log.info("epoch %d: %s", epoch, rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if checkpoint_path:
                save_checkpoint(f"{checkpoint_path}.epoch{epoch:03d}", params)
                score = rec.get("heldout_wer", rec["loss_total"])
                if score < best:
                    best, best_epoch = score, epoch
                    save_checkpoint(f"{checkpoint_path}.best", params)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(params, epochs, steps, best_epoch)


# -- evaluation ---------------------------------------------------------------------


def evaluate(params: ModelParams, dataset: Sequence[Utterance], beam: BeamConfig,
             vocab: Vocabulary) -> dict:
    """Decode every utterance with the semantic beam search and score it.

    Returns a JSON-ready report with corpus-level rates and per-utterance
    breakdowns.
    """
    if not dataset:
        raise ValueError("empty dataset")
    per_utt, sem_counts, wer_pairs, ref_int, hyp_int = [], [], [], [], []
    for i, utt in enumerate(dataset):
        res = semantic_beam_search(params, encode(params, feature_pipeline(utt.features)), beam)
        top = res.best
        ref_tok = [vocab.word_pieces[t] for t in utt.tokens]
        hyp_tok = [vocab.word_pieces[t] for t in top.tokens]
        counts = metrics.semer_counts(ref_tok, [vocab.slot_tags[s] for s in utt.slots],
                                      vocab.intents[utt.intent], hyp_tok,
                                      [vocab.slot_tags[s] for s in top.slots], vocab.intents[res.intent])
        edits = metrics.edit_counts(ref_tok, hyp_tok)
        sem_counts.append(counts)
        wer_pairs.append((ref_tok, hyp_tok))
        ref_int.append(utt.intent)
        hyp_int.append(res.intent)
        per_utt.append({
            "index": i,
            "reference": ref_tok,
            "hypothesis": hyp_tok,
            "word_errors": edits.errors,
            "reference_length": len(ref_tok),
            "semer_counts": counts.to_json(),
            "intent_correct": utt.intent == res.intent,
            "interpretation_error": counts.errors > 0 or counts.intent_error,
        })
    return {
        "beam": list(beam.astuple()),
        "n_utterances": len(dataset),
        "metrics": {
            "wer": metrics.corpus_wer(wer_pairs),
            "semer": metrics.corpus_semer(sem_counts),
            "irer": metrics.irer(sem_counts),
            "icer": metrics.icer(ref_int, hyp_int),
        },
        "utterances": per_utt,
    }


REDUCTION_NAMES = {"wer": "WERR", "semer": "SemERR", "irer": "IRERR", "icer": "ICERR"}


def add_relative_reductions(report: dict, baseline: dict) -> list[str]:
    """Attach WERR/SemERR/IRERR/ICERR versus ``baseline``; return warnings."""
    warnings, red = [], {}
    for key, name in REDUCTION_NAMES.items():
        b = baseline["metrics"][key]
        if b <= 0:
            red[name] = None
            warnings.append(f"baseline {key} is {b}; {name} undefined")
        else:
            red[name] = metrics.relative_reduction(b, report["metrics"][key])
    report["relative_reduction"] = red
    return warnings


REPORT_SCHEMA = {
    "type": "object",
    "required": ["beam", "n_utterances", "metrics", "utterances"],
    "properties": {
        "beam": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 4, "maxItems": 4},
        "n_utterances": {"type": "integer", "minimum": 1},
        "metrics": {
            "type": "object",
            "required": ["wer", "semer", "irer", "icer"],
            "properties": {k: {"type": "number", "minimum": 0} for k in ("wer", "semer", "irer", "icer")},
        },
        "relative_reduction": {
            "type": "object",
            "properties": {n: {"type": ["number", "null"]} for n in REDUCTION_NAMES.values()},
        },
        "utterances": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "word_errors", "semer_counts", "intent_correct", "interpretation_error"],
                "properties": {
                    "index": {"type": "integer"},
                    "word_errors": {"type": "integer", "minimum": 0},
                    "semer_counts": {
                        "type": "object",
                        "required": ["correct", "deletion", "insertion", "substitution", "intent_error"],
                    },
                    "intent_correct": {"type": "boolean"},
                    "interpretation_error": {"type": "boolean"},
                },
            },
        },
    },
}
