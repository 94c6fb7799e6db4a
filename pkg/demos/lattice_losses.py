"""Transducer losses on a lattice small enough to enumerate by hand.

Run with ``python3 demos/lattice_losses.py``.
"""

import math

import numpy as np

from semrnnt import numerics as nx
from semrnnt.losses import (Lattice, aligned_loss_bruteforce, aligned_rnnt_loss, ce_slot_loss,
                            enumerate_alignments, rnnt_loss, rnnt_loss_bruteforce)
from semrnnt.selftest import random_grid

# %% A transducer grid has one distribution per lattice node (t, u).
# With T=2 frames and U=2 labels there are C(4, 2) = 6 interleavings of
# blanks and emissions. Only those that end on a blank at the last frame
# are real alignments.

T, U, V = 2, 2, 3
for path in enumerate_alignments(T, U):
    print("".join(path.moves), "valid" if path.is_valid(T) else "dropped")

# %% With a uniform grid every move costs ln(V + 1), and the loss is the
# negative log of (number of valid paths) * (1/4)^(T+U).

grid = np.full((T, U + 1, V + 1), -math.log(V + 1))
targets = [0, 2]
loss = rnnt_loss(grid, targets).item()
print(f"uniform grid: forward-backward {loss:.6f}, by enumeration {rnnt_loss_bruteforce(grid, targets):.6f}")
print(f"closed form   {(T + U) * math.log(V + 1) - math.log(3):.6f}")

# %% On random grids the dynamic program and the explicit sum agree to
# round-off, and the gradient comes back through the tape.

rng = np.random.default_rng(0)
worst = 0.0
for _ in range(20):
    T, U, V = (int(x) for x in rng.integers(1, 5, size=3))
    g = random_grid(rng, T, U, V + 1)
    tg = [int(x) for x in rng.integers(0, V + 1, size=U)]
    worst = max(worst, abs(rnnt_loss(g, tg).item() - rnnt_loss_bruteforce(g, tg)))
print(f"20 random grids, largest disagreement {worst:.1e}")

# Each gradient entry is minus the posterior probability that the path uses
# that move, so the entries sum to -(T + U): every path makes T + U moves.
tape = nx.Tape()
leaf = tape.leaf("grid", random_grid(rng, 3, 2, 4))
grad = nx.backward(tape, rnnt_loss(leaf, [1, 3]))["grid"]
print("gradient shape", grad.shape, "total", round(float(grad.sum()), 9))

# %% The multi-task lattice pairs a word-piece grid with a slot grid on the
# same nodes. The aligned loss scores every move by both heads at once; the
# cross-entropy variant averages slot log-probabilities over frames.

wp, slot = random_grid(rng, 3, 2, 4), random_grid(rng, 3, 2, 3)
tokens, slots = [0, 2], [1, 0]
lat = Lattice(nx.Tensor(wp), nx.Tensor(slot))
print(f"aligned loss {aligned_rnnt_loss(lat, tokens, slots).item():.6f}")
print(f"  enumerated {rnnt_loss_bruteforce(slot, slots) + aligned_loss_bruteforce(wp, slot, tokens, slots):.6f}")
print(f"slot CE      {ce_slot_loss(lat, slots).item():.6f}")
