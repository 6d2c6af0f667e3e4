"""Random token shuffles and their exact inverses."""

from dataclasses import dataclass

import numba
import numpy as np

from . import tensor as T
from .io import format_permutation, parse_permutation


@dataclass(frozen=True)
class Permutation:
    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, forward):
        forward = np.asarray(forward, dtype=np.int64)
        L = forward.shape[0]
        if forward.ndim != 1 or not np.array_equal(np.sort(forward), np.arange(L)):
            raise ValueError("forward is not a permutation of 0..L-1")
        inverse = np.empty_like(forward)
        inverse[forward] = np.arange(L)
        return cls(forward, inverse)

    @classmethod
    def identity(cls, L):
        return cls.from_forward(np.arange(L))

    def __len__(self):
        return self.forward.shape[0]

    def dumps(self):
        return format_permutation(self.forward)

    @classmethod
    def loads(cls, text):
        return cls.from_forward(parse_permutation(text))


@numba.njit(cache=True)
def _fisher_yates(u):
    L = u.shape[0] + 1
    out = np.arange(L)
    for i in range(L - 1, 0, -1):
        j = int(u[L - 1 - i] * (i + 1))
        if j > i:
            j = i
        out[i], out[j] = out[j], out[i]
    return out


def sample_permutation(stream, L):
    """Uniform permutation of ``range(L)`` by Fisher-Yates on the stream's draws."""
    L = int(L)
    if L < 1:
        raise ValueError("sample_permutation: L must be >= 1")
    if L == 1:
        return Permutation.identity(1)
    return Permutation.from_forward(_fisher_yates(stream.uniform(L - 1)))


def _as_batch(x):
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected [L, D] or [B, L, D] tokens, got {x.shape}")


def _index_rows(perms, attr, batch, L):
    if isinstance(perms, Permutation):
        perms = [perms] * batch
    if len(perms) != batch:
        raise ValueError(f"need {batch} permutations, got {len(perms)}")
    for p in perms:
        if len(p) != L:
            raise ValueError(f"permutation length {len(p)} does not match sequence length {L}")
    return np.stack([getattr(p, attr) for p in perms])


def apply_shuffle(x, perm):
    """``out[i] = x[perm.forward[i]]`` along the token axis.

    ``x`` is [L, D] with one permutation, or [B, L, D] with one permutation
    per batch row (a single permutation is broadcast).
    """
    xb, squeeze = _as_batch(x)
    out = T.gather_rows(xb, _index_rows(perm, "forward", xb.shape[0], xb.shape[1]))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def apply_inverse_shuffle(y, perm):
    """``out[i] = y[perm.inverse[i]]``; undoes :func:`apply_shuffle` exactly."""
    yb, squeeze = _as_batch(y)
    out = T.gather_rows(yb, _index_rows(perm, "inverse", yb.shape[0], yb.shape[1]))
    return T.reshape(out, out.shape[1:]) if squeeze else out


@numba.njit(cache=True)
def _count_adjacent(perms, counts):
    for s in range(perms.shape[0]):
        for i in range(perms.shape[1] - 1):
            counts[perms[s, i], perms[s, i + 1]] += 1


def adjacency_statistics(L, n_samples, stream, ordered=False):
    """Empirical frequency with which tokens i and j end up next to each other.

    With ``ordered=False`` entry (i, j) counts both orders and the matrix is
    symmetric (expected ``2/L`` for uniform shuffles); with ``ordered=True``
    it counts only "i immediately precedes j" (expected ``1/L``).
    """
    if L < 2:
        raise ValueError("adjacency_statistics: L must be >= 2")
    perms = np.stack([sample_permutation(stream, L).forward for _ in range(n_samples)])
    counts = np.zeros((L, L), dtype=np.int64)
    _count_adjacent(perms, counts)
    if not ordered:
        counts = counts + counts.T
    return counts / float(n_samples)
