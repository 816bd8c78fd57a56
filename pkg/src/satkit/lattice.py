"""Transducer output lattice: joint network, loss, gradients, oracles.

The lattice is a (T, U+1, K) grid of log distributions over the vocabulary,
one per (time frame, emitted-prefix length) node. Token 0 is the blank.
Training minimizes the negative log-likelihood of the target sequence summed
over all monotone alignment paths; the DP kernels in :mod:`satkit.kernels`
supply both the loss and its analytic gradient, which is grafted onto the
autodiff tape as a single composite op.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import LOG_ZERO, Tensor
from .vocab import BLANK, SOS

MAGIC = "SATLAT1"


@dataclass
class PosteriorLattice:
    """Log-prob grid plus the target ids it is scored against."""

    log_probs: Tensor
    targets: np.ndarray

    def __post_init__(self):
        if not isinstance(self.log_probs, Tensor):
            self.log_probs = Tensor(self.log_probs)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.log_probs.ndim != 3:
            raise ValueError(f"lattice must be (T, U+1, K), got {self.log_probs.shape}")
        T, U1, K = self.log_probs.shape
        if T < 1:
            raise ValueError("lattice needs at least one time frame")
        if self.targets.ndim != 1 or self.targets.shape[0] != U1 - 1:
            raise ValueError(
                f"targets shape {self.targets.shape} inconsistent with U+1={U1}")
        if self.targets.size:
            if self.targets.min() < 0 or self.targets.max() >= K:
                raise ValueError("target id out of vocabulary range")
            if np.any(self.targets == BLANK) or np.any(self.targets == SOS):
                raise ValueError("targets may not contain blank or start ids")

    @property
    def T(self):
        return self.log_probs.shape[0]

    @property
    def U(self):
        return self.log_probs.shape[1] - 1

    @property
    def K(self):
        return self.log_probs.shape[2]

    def validate_normalized(self):
        """Error unless every (t, u) row is a normalized log distribution."""
        lp = self.log_probs.data
        tol = 1e-10 if lp.dtype == np.float64 else 1e-4
        residual = np.abs(_np_logsumexp(lp))
        if residual.max() > tol:
            bad = np.unravel_index(int(residual.argmax()), residual.shape)
            raise ValueError(
                f"lattice row {bad} not normalized: |logsumexp| = {residual.max():.3e}")


def _np_logsumexp(lp):
    m = lp.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(lp - m).sum(axis=-1, keepdims=True))).squeeze(-1)


def transducer_loss(lattice: PosteriorLattice, validate: bool = True) -> Tensor:
    """Negative log-likelihood of the targets, summed over alignment paths.

    Differentiable w.r.t. ``lattice.log_probs``. ``validate=False`` skips the
    row-normalization check so finite-difference probes can perturb single
    entries.
    """
    if validate:
        lattice.validate_normalized()
    lp = lattice.log_probs
    loss, grad, _, _ = kernels.forward_backward(
        np.ascontiguousarray(lp.data, dtype=np.float64), lattice.targets)

    def vjp(g):
        return (float(g) * grad.astype(lp.dtype, copy=False),)

    return ad.op_result(np.float64(loss), (lp,), vjp)


def forward_backward_arrays(lattice: PosteriorLattice):
    """Raw (loss, grad, alpha, beta) from the active kernel backend."""
    return kernels.forward_backward(
        np.ascontiguousarray(lattice.log_probs.data, dtype=np.float64),
        lattice.targets)


def brute_force_loss(lattice: PosteriorLattice, max_paths: int = 200_000) -> float:
    """Loss by explicit enumeration of every monotone alignment path.

    Exponential in lattice size; errors out rather than grind when the path
    count exceeds ``max_paths``. Reference oracle for the DP kernels.
    """
    T, U = lattice.T, lattice.U
    n_paths = math.comb(T + U - 1, U) if U else 1
    if n_paths > max_paths:
        raise ValueError(f"{n_paths} paths exceed enumeration budget {max_paths}")
    lp = lattice.log_probs.data.astype(np.float64)
    y = lattice.targets
    scores = np.empty(n_paths)
    # A path is fixed by the frame at which each target token is emitted
    # (non-decreasing); blanks fill every frame advance, including the
    # terminal one.
    for i, emit_at in enumerate(itertools.combinations_with_replacement(range(T), U)):
        u = 0
        s = 0.0
        for t in range(T):
            while u < U and emit_at[u] == t:
                s += lp[t, u, y[u]]
                u += 1
            s += lp[t, u, BLANK]
        scores[i] = s
    return float(-np.logaddexp.reduce(scores))


def tape_loss(lattice: PosteriorLattice) -> Tensor:
    """Loss built cell-by-cell from autodiff primitives.

    Slow scalar construction used to cross-check the kernel's hand-derived
    gradient against the tape's on tiny lattices.
    """
    lp = lattice.log_probs
    T, U = lattice.T, lattice.U
    y = lattice.targets

    def ent(t, u, k):
        cell = ad.slice_axis(ad.slice_axis(ad.slice_axis(lp, 0, t, t + 1), 1, u, u + 1), 2, k, k + 1)
        return ad.reshape(cell, (1,))

    def logadd(a, b):
        return ad.logsumexp_lastdim(ad.concat([a, b], axis=0))

    dead = Tensor(np.full(1, LOG_ZERO))
    alpha = {(0, 0): Tensor(np.zeros(1))}
    for n in range(1, T + U):
        for t in range(max(0, n - U), min(T - 1, n) + 1):
            u = n - t
            fb = alpha[(t - 1, u)] + ent(t - 1, u, BLANK) if t > 0 else dead
            fl = alpha[(t, u - 1)] + ent(t, u - 1, int(y[u - 1])) if u > 0 else dead
            alpha[(t, u)] = ad.reshape(logadd(fb, fl), (1,))
    total = alpha[(T - 1, U)] + ent(T - 1, U, BLANK)
    return ad.reshape(ad.scale(total, -1.0), ())


class JointNetwork:
    """Combines one encoder frame with one prediction state into a log
    distribution over the vocabulary: log_softmax(W_out tanh(W_in [f; g])).

    ``combine="concat"`` stores W_in as two column blocks so the grid can be
    built without materializing T*(U+1) concatenations; ``combine="add"``
    shares a single input projection between both sides (f and g added in a
    common basis). Applied to full sequences it materializes the whole
    lattice.
    """

    def __init__(self, d_enc: int, d_pred: int, d_joint: int, vocab_size: int,
                 rng: np.random.Generator, combine: str = "concat"):
        from .nnet import glorot
        if combine not in ("concat", "add"):
            raise ValueError(f"combine must be concat or add, got {combine!r}")
        if combine == "add" and d_enc != d_pred:
            raise ad.ShapeError("additive joint needs matching encoder/prediction widths")
        self.d_enc, self.d_pred = d_enc, d_pred
        self.d_joint, self.vocab_size = d_joint, vocab_size
        self.combine = combine
        if combine == "concat":
            self.params = {
                "joint.w_enc": glorot(rng, d_enc + d_pred, d_joint, rows=d_enc),
                "joint.w_pred": glorot(rng, d_enc + d_pred, d_joint, rows=d_pred),
                "joint.w_out": glorot(rng, d_joint, vocab_size),
            }
        else:
            self.params = {
                "joint.w_in": glorot(rng, d_enc, d_joint),
                "joint.w_out": glorot(rng, d_joint, vocab_size),
            }

    def log_probs(self, enc: Tensor, pred: Tensor) -> Tensor:
        """(T, d_enc) x (U+1, d_pred) -> (T, U+1, K) normalized log probs."""
        if enc.shape[1] != self.d_enc or pred.shape[1] != self.d_pred:
            raise ad.ShapeError(
                f"joint network fed {enc.shape} x {pred.shape}, expected widths "
                f"{self.d_enc} and {self.d_pred}")
        T, U1 = enc.shape[0], pred.shape[0]
        p = self.params
        w_f = p["joint.w_enc"] if self.combine == "concat" else p["joint.w_in"]
        w_g = p["joint.w_pred"] if self.combine == "concat" else p["joint.w_in"]
        grid = ad.add(ad.repeat_rows(ad.matmul(enc, w_f), U1),
                      ad.tile_rows(ad.matmul(pred, w_g), T))
        logits = ad.matmul(ad.tanh(grid), p["joint.w_out"])
        return ad.reshape(ad.log_softmax_lastdim(logits), (T, U1, self.vocab_size))

    def lattice(self, enc: Tensor, pred: Tensor, targets) -> PosteriorLattice:
        return PosteriorLattice(self.log_probs(enc, pred), targets)


def save_lattice(path, lattice: PosteriorLattice) -> None:
    """Plain-text dump; %.17g keeps float64 entries exact across a round trip."""
    lp = lattice.log_probs.data
    T, U1, K = lp.shape
    with open(path, "w", encoding="utf-8") as f:
        f.write(MAGIC + "\n")
        f.write(f"{T} {U1 - 1} {K}\n")
        f.write(" ".join(str(int(t)) for t in lattice.targets) + "\n")
        for t in range(T):
            for u in range(U1):
                row = " ".join("%.17g" % v for v in lp[t, u])
                f.write(f"{t} {u} {row}\n")


def load_lattice(path) -> PosteriorLattice:
    with open(path, encoding="utf-8") as f:
        if f.readline().strip() != MAGIC:
            raise ValueError(f"{path}: not a lattice dump")
        T, U, K = (int(v) for v in f.readline().split())
        tline = f.readline().split()
        targets = np.array([int(v) for v in tline], dtype=np.int64)
        if targets.shape[0] != U:
            raise ValueError(f"{path}: expected {U} targets, found {targets.shape[0]}")
        lp = np.empty((T, U + 1, K))
        for line in f:
            parts = line.split()
            if not parts:
                continue
            t, u = int(parts[0]), int(parts[1])
            lp[t, u] = [float(v) for v in parts[2:]]
    return PosteriorLattice(Tensor(lp), targets)
