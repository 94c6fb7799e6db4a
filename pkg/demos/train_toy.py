"""Train the multi-task transducer on the synthetic smart-home grammar.

Run with ``python3 demos/train_toy.py [--epochs N] [--slot-mode ce|rnnt_align]``.
The full recipe takes a few minutes on one CPU core.
"""

import argparse
import time
from dataclasses import replace

from semrnnt.data import TOY_GRAMMAR, corpus_stats, feature_pipeline, generate_corpus
from semrnnt.decoding import BeamConfig, semantic_beam_search
from semrnnt.model import ModelConfig, encode
from semrnnt.trainer import TOY_TRAIN_CONFIG, evaluate, train

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--epochs", type=int, default=TOY_TRAIN_CONFIG.epochs)
parser.add_argument("--slot-mode", choices=("ce", "rnnt_align"), default="ce")
args = parser.parse_args()

# %% Data: 220 commands from three templates. Every word piece has a fixed
# 64-dim codebook row, repeated for a few frames with Gaussian noise. The
# first 200 are for training and the last 20 are never seen in training.

utts, vocab = generate_corpus(TOY_GRAMMAR, 220, seed=7)
train_set, held_out = utts[:200], utts[200:]
print(corpus_stats(train_set, vocab))
u = train_set[0]
print([vocab.word_pieces[t] for t in u.tokens], [vocab.slot_tags[s] for s in u.slots], vocab.intents[u.intent])

# %% Training. The toy recipe keeps the prediction networks frozen (and their
# output projections at zero) for the first epochs, so the joint network has
# to learn the acoustics before it can lean on the label history.

config = replace(TOY_TRAIN_CONFIG, epochs=args.epochs, slot_mode=args.slot_mode)
print(config)
start = time.perf_counter()
result = train(ModelConfig.for_vocab(vocab), train_set, config, held_out=held_out)
for e in result.epochs:
    print(f"epoch {e['epoch']:2d}  loss {e['loss_total']:8.3f}  wp {e['loss_wp']:7.3f}  "
          f"slot {e['loss_slot']:6.3f}  intent {e['loss_intent']:6.3f}  "
          f"greedy held-out WER {e['heldout_wer']:.3f}  ICER {e['heldout_icer']:.3f}")
print(f"trained in {time.perf_counter() - start:.0f} s")

# %% Evaluation with the (10, 2, 10, 8) semantic beam on the held-out set.

report = evaluate(result.params, held_out, BeamConfig(10, 2, 10, 8), vocab)
print({k: round(v, 3) for k, v in report["metrics"].items()})

# %% One decoded example: word pieces, their slot tags and the intent.

res = semantic_beam_search(result.params, encode(result.params, feature_pipeline(held_out[0].features)),
                           BeamConfig(10, 2, 10, 8))
for e in res.n_best[:3]:
    print(f"{e.score:8.3f}", list(zip([vocab.word_pieces[t] for t in e.tokens],
                                      [vocab.slot_tags[s] for s in e.slots])))
print("intent:", vocab.intents[res.intent])
