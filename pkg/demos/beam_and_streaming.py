"""Greedy, semantic beam and streaming decoding on a tiny random model.

Run with ``python3 demos/beam_and_streaming.py``. No training is needed:
the point is how the searches relate to each other, not what they output.
"""

import numpy as np

from semrnnt.decoding import (GREEDY, BeamConfig, exhaustive_decode, greedy_decode, semantic_beam_search,
                              sequence_logprob, streaming_session)
from semrnnt.model import encode, init_params
from semrnnt.selftest import tiny_config

cfg = tiny_config(n_wp=3, n_slot=2)
params = init_params(cfg, seed=4)
params.arrays["joint.wp.W"] *= 3.0   # sharpen the word-piece head a little
rng = np.random.default_rng(4)
H = encode(params, rng.normal(size=(4, cfg.feat_dim)))

# %% Greedy decoding takes the best word piece at every step and, if it is
# not blank, the best slot tag for it. A (1,1,1,1) beam is the same search.
# An untrained model rarely prefers blank, so greedy runs into the cap of
# five emissions per frame.

g = greedy_decode(params, H)
b = semantic_beam_search(params, H, GREEDY)
print("greedy  ", g.best.tokens, g.best.slots, f"{g.best.score:.4f}")
print("beam 1s ", b.best.tokens, b.best.slots, f"{b.best.score:.4f}", "identical:", b.same_as(g))

# %% Wider beams expand B_wp word pieces, B_slot tags for each, keep B_local
# candidates per hypothesis and B_beam hypotheses overall. Hypotheses that
# reach the same labels by different alignments are merged by log-sum-exp.

for sizes in [(2, 1, 2, 2), (4, 2, 4, 4), (4, 2, 8, 8)]:
    res = semantic_beam_search(params, H, BeamConfig(*sizes, max_output_len=3))
    print(sizes, [(e.tokens, e.slots, round(e.score, 4)) for e in res.n_best[:3]])

# %% A merged score is the total probability of the label sequence. The
# exhaustive search sums every alignment of every sequence up to length 3 and
# agrees with a saturating beam.

top = semantic_beam_search(params, H, BeamConfig(4, 2, 8, 8, max_output_len=3)).best
best = exhaustive_decode(params, H, max_len=3, max_emits_per_frame=5)
print("exhaustive", best.tokens, best.slots, f"{best.score:.6f}")
print("beam      ", top.tokens, top.slots, f"{top.score:.6f}")
print("rescored  ", f"{sequence_logprob(params, H, top.tokens, top.slots, 5):.6f}")

# %% Streaming pushes frames as they arrive. The encoder is causal and the
# beam is frame synchronous, so any chunking gives the one-shot result.

feats = rng.normal(size=(7, cfg.feat_dim))
config = BeamConfig(3, 2, 4, 3)
once = semantic_beam_search(params, encode(params, feats), config)
session = streaming_session(params, config)
for lo, hi in [(0, 1), (1, 1), (1, 4), (4, 7)]:
    session.push_frames(feats[lo:hi])
    print(f"after {session.frames_consumed} frames:", session.partial().best.tokens)
print("streamed equals one-shot:", session.finalize().same_as(once))
