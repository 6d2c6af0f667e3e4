"""Why scan order matters, and why a random order costs nothing to undo.

A causal scan reads tokens one after another, so the output at a pixel can
only depend on pixels that came before it in the scan. With a raster order
that is "everything above and to the left". Shuffling the tokens first and
unshuffling afterwards keeps the output aligned with the image while the
set of pixels each output can see becomes random.

    python3 demos/shuffle_and_scan.py
"""

import numpy as np

from shufflemamba.rng import RngStream
from shufflemamba.shuffle import adjacency_statistics, apply_inverse_shuffle, apply_shuffle, sample_permutation
from shufflemamba.tensor import Tensor

L, D = 16, 3
x = Tensor(np.arange(L * D, dtype=np.float64).reshape(1, L, D))
perm = sample_permutation(RngStream(seed=0, stream_id=1), L)
print("permutation:", perm.forward.tolist())

y = apply_shuffle(x, perm)
back = apply_inverse_shuffle(y, perm)
print("round trip exact:", np.array_equal(back.data, x.data))

# a running sum is the simplest causal scan
raster = np.cumsum(x.data, axis=1)
shuffled = apply_inverse_shuffle(Tensor(np.cumsum(y.data, axis=1)), perm).data
print("token 0 sees itself only in raster order:", raster[0, 0, 0] == x.data[0, 0, 0])
print("token 0 after shuffled scan:", shuffled[0, 0, 0], "(sums every token placed before it)")

# every unordered pair of tokens is adjacent equally often under uniform shuffles
freq = adjacency_statistics(6, 20000, RngStream(3))
off = freq[np.triu_indices(6, 1)]
print(f"pair adjacency frequency: min {off.min():.3f} max {off.max():.3f} (expected {2 / 6:.3f})")
