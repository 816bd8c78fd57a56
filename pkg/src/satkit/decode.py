"""Greedy, beam, and streaming decoding over the transducer output graph.

All decoding runs on the numpy evaluation path. When the chunk window is
bounded, encoder rows come from the per-frame fixed-order routine
(:meth:`Encoder.frame_np`) in offline and streaming mode alike, which is what
makes the two bit-identical; the full-matrix path is reserved for unbounded
windows (and for fast dev-set scoring during training, where bit-level
agreement with streaming is not needed).

The beam is frame-synchronous: within a frame, hypotheses expand by labels
until pruned out or the per-frame symbol guard trips, blanks move them to
the next frame, and duplicate prefixes are merged by log-adding their
transducer mass. LM fusion adds lambda_lm * log P_lm(token | prefix) at each
label expansion; blanks never touch the LM term.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .ngram import BOS
from .vocab import BLANK, SOS

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    beam_width: int = 5
    lm_weight: float = 0.2
    max_symbols_per_frame: int = 10
    mode: str = "offline"
    chunk: object = None  # ChunkSpec override; None = model's training window

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError(f"beam width must be >= 1, got {self.beam_width}")
        if self.lm_weight < 0:
            raise ValueError(f"LM weight must be >= 0, got {self.lm_weight}")
        if self.mode not in ("offline", "streaming"):
            raise ValueError(f"mode must be offline or streaming, got {self.mode!r}")


@dataclass
class Hypothesis:
    prefix: tuple
    state: object            # PredState for the prefix
    t_score: float = 0.0     # transducer log-mass of the prefix
    lm_score: float = 0.0    # LM log-prob of the prefix

    def combined(self, lm_weight: float) -> float:
        return self.t_score + lm_weight * self.lm_score


def edit_distance(reference, hypothesis) -> int:
    """Levenshtein distance with uniform costs."""
    ref = list(reference)
    hyp = list(hypothesis)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(reference, hypothesis) -> float:
    """Levenshtein distance over reference length."""
    ref = list(reference)
    if not ref:
        raise ValueError("CER needs a non-empty reference")
    return edit_distance(ref, hypothesis) / len(ref)


def corpus_cer(references, hypotheses) -> float:
    """Total edit distance over total reference length."""
    refs = list(references)
    hyps = list(hypotheses)
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    total_len = sum(len(list(r)) for r in refs)
    if total_len == 0:
        raise ValueError("CER needs non-empty references")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total_len


def _log_softmax_np(v: np.ndarray) -> np.ndarray:
    m = v.max()
    s = v - m
    return s - math.log(np.exp(s).sum())


class _JointScorer:
    """Caches the per-frame and per-state halves of the joint network."""

    def __init__(self, model):
        self.model = model
        j = model.joint
        self.w_f = (j.params["joint.w_enc"] if j.combine == "concat"
                    else j.params["joint.w_in"]).data
        self.w_g = (j.params["joint.w_pred"] if j.combine == "concat"
                    else j.params["joint.w_in"]).data
        self.w_out = j.params["joint.w_out"].data

    def f_part(self, enc_row: np.ndarray) -> np.ndarray:
        return enc_row @ self.w_f

    def g_part(self, state) -> np.ndarray:
        return state.g @ self.w_g

    def log_probs(self, f_part: np.ndarray, g_part: np.ndarray) -> np.ndarray:
        return _log_softmax_np(np.tanh(f_part + g_part) @ self.w_out)


class _EncoderRows:
    """Lazy per-frame encoder outputs with the two evaluation policies."""

    def __init__(self, model, stacked: np.ndarray, chunk, frame_exact):
        self.model = model
        self.stacked = stacked
        self.chunk = chunk if chunk is not None else model.encoder.chunk
        if frame_exact is None:
            frame_exact = self.chunk.bounded
        if frame_exact and not self.chunk.bounded:
            raise ValueError("per-frame encoding needs a bounded chunk window")
        self.frame_exact = frame_exact
        self._matrix = None

    def __len__(self):
        return self.stacked.shape[0]

    def row(self, t: int) -> np.ndarray:
        if self.frame_exact:
            return self.model.encoder.frame_np(self.stacked, t, self.chunk)
        if self._matrix is None:
            self._matrix = self.model.encoder.apply_np(self.stacked, self.chunk)
        return self._matrix[t]


def _best_label(lp: np.ndarray) -> int:
    """Argmax over the row with the start token ruled out (it is an
    input-side symbol, never a valid emission)."""
    masked = lp.copy()
    masked[SOS] = -np.inf
    return int(np.argmax(masked))


def _greedy_over_rows(model, rows, max_symbols, collect_trace=False):
    scorer = _JointScorer(model)
    state = model.prednet.init_state()
    g_part = scorer.g_part(state)
    labels = []
    emitted_at = []
    trace = []
    for t in range(len(rows)):
        f_part = scorer.f_part(rows.row(t))
        for _ in range(max_symbols):
            lp = scorer.log_probs(f_part, g_part)
            if collect_trace:
                trace.append((t, len(labels), lp))
            k = _best_label(lp)
            if k == BLANK:
                break
            labels.append(k)
            emitted_at.append(t)
            state = model.prednet.advance_np(state, k)
            g_part = scorer.g_part(state)
        else:
            log.warning("frame %d hit the %d-symbol guard; forcing frame advance",
                        t, max_symbols)
    if collect_trace:
        return labels, emitted_at, trace
    return labels, emitted_at


def greedy_decode(model, stacked: np.ndarray, chunk=None, frame_exact=None,
                  max_symbols: int = 10):
    """Best-label-per-step decoding; returns the emitted label ids."""
    rows = _EncoderRows(model, stacked, chunk, frame_exact)
    labels, _ = _greedy_over_rows(model, rows, max_symbols)
    return labels


def greedy_trace(model, stacked: np.ndarray, chunk=None, frame_exact=None,
                 max_symbols: int = 10):
    """Greedy pass keeping the (t, u, log-prob row) visited at every step.

    Feeds the lattice plot: the trace rows are the exact distributions the
    greedy search sampled its argmax from.
    """
    rows = _EncoderRows(model, stacked, chunk, frame_exact)
    return _greedy_over_rows(model, rows, max_symbols, collect_trace=True)


class _LMScorer:
    """Maps label ids to strings and queries the n-gram model."""

    def __init__(self, lm, vocab):
        self.lm = lm
        self.vocab = vocab

    def extend(self, prefix_tokens: tuple, label: int) -> float:
        return self.lm.score((BOS,) + prefix_tokens, self.vocab.tokens[label])


def beam_decode(model, stacked: np.ndarray, lm=None, vocab=None,
                cfg: DecodeConfig = None, chunk=None, frame_exact=None):
    """Frame-synchronous beam search; returns hypotheses best-first.

    With lm set, vocab must map label ids to the LM's token strings.
    """
    cfg = cfg or DecodeConfig()
    if lm is not None and vocab is None:
        raise ValueError("LM fusion needs the vocab to name the labels")
    lm_scorer = _LMScorer(lm, vocab) if lm is not None else None
    rows = _EncoderRows(model, stacked, chunk if chunk is not None else cfg.chunk,
                        frame_exact)
    scorer = _JointScorer(model)
    width = cfg.beam_width

    init = Hypothesis(prefix=(), state=model.prednet.init_state())
    active = {(): (init, scorer.g_part(init.state))}
    final = []
    for t in range(len(rows)):
        f_part = scorer.f_part(rows.row(t))
        settled = {}
        for step in range(cfg.max_symbols_per_frame + 1):
            expand = step < cfg.max_symbols_per_frame
            if not expand and active:
                log.warning("frame %d hit the %d-symbol guard; forcing frame advance",
                            t, cfg.max_symbols_per_frame)
            expansions = {}
            for prefix, (hyp, g_part) in active.items():
                lp = scorer.log_probs(f_part, g_part)
                # Blank step: settle this hypothesis to frame t+1.
                blank_score = hyp.t_score + lp[BLANK]
                if prefix in settled:
                    s = settled[prefix][0]
                    s.t_score = np.logaddexp(s.t_score, blank_score)
                else:
                    settled[prefix] = (
                        Hypothesis(prefix, hyp.state, blank_score, hyp.lm_score),
                        g_part)
                if not expand:
                    continue
                for k in range(len(lp)):
                    if k in (BLANK, SOS):
                        continue
                    child = prefix + (k,)
                    score = hyp.t_score + lp[k]
                    if child in expansions:
                        c = expansions[child][0]
                        c.t_score = np.logaddexp(c.t_score, score)
                    else:
                        lm_inc = (lm_scorer.extend(_strings(vocab, prefix), k)
                                  if lm_scorer else 0.0)
                        expansions[child] = (
                            Hypothesis(child, (hyp.state, k), score,
                                       hyp.lm_score + lm_inc),
                            None)
            if not expansions:
                break
            # Prune over everything alive at this frame; on ties the sort key
            # prefers the shorter (settled) prefix, matching greedy's
            # lowest-index argmax.
            union = list(settled.items()) + list(expansions.items())
            union.sort(key=lambda kv: (-kv[1][0].combined(cfg.lm_weight), kv[0]))
            keep = {prefix for prefix, _ in union[:width]}
            settled = {p: v for p, v in settled.items() if p in keep}
            survivors = {p: v for p, v in expansions.items() if p in keep}
            if not survivors:
                break
            # Materialize prediction states only for surviving expansions.
            active = {}
            for prefix, (hyp, _) in survivors.items():
                parent_state, k = hyp.state
                hyp.state = model.prednet.advance_np(parent_state, k)
                active[prefix] = (hyp, scorer.g_part(hyp.state))
        ranked = sorted(settled.items(),
                        key=lambda kv: (-kv[1][0].combined(cfg.lm_weight), kv[0]))
        active = dict(ranked[:width])
        final = [hyp for _, (hyp, _) in ranked[:width]]
    return final


def _strings(vocab, prefix):
    return tuple(vocab.tokens[i] for i in prefix) if vocab is not None else prefix


def exhaustive_decode(model, stacked: np.ndarray, max_len: int, token_ids,
                      chunk=None, frame_exact=None):
    """Argmax over every label sequence up to max_len by full lattice scoring.

    Exponential reference oracle for beam search on tiny inputs.
    """
    import itertools

    from . import lattice as lat
    from .autodiff import Tensor

    rows = _EncoderRows(model, stacked, chunk, frame_exact)
    enc = np.stack([rows.row(t) for t in range(len(rows))])
    best = None
    for n in range(max_len + 1):
        for y in itertools.product(token_ids, repeat=n):
            g = model.prednet.apply_np(list(y))
            grid = lat.PosteriorLattice(
                Tensor(model.joint_log_probs_np(enc, g)), np.array(y, dtype=np.int64))
            score = -lat.forward_backward_arrays(grid)[0]
            if best is None or score > best[1] or (score == best[1] and y < best[0]):
                best = (y, score)
    return list(best[0]), best[1]


def stream_decode(model, raw_frames, cfg: DecodeConfig = None,
                  stack_left: int = 3, stack_right: int = 1, factor: int = 3):
    """Greedy streaming decode over an incremental raw-frame source.

    Yields (stacked_frame_index, label_id) as emissions happen. A stacked
    frame exists once raw frame factor*s + stack_right has arrived (edge
    replication only at end of stream); its encoder output is computed once
    stacked frames through s + B*N_r exist. Decisions for frame s therefore
    lag the input by factor*B*N_r + stack_right raw frames, and the final
    frames flush when the source ends.
    """
    from .data import stack_downsample

    cfg = cfg or DecodeConfig(mode="streaming")
    chunk = cfg.chunk if cfg.chunk is not None else model.encoder.chunk
    if not chunk.bounded:
        raise ValueError("streaming decode needs a bounded chunk window")
    lookahead = model.encoder.n_blocks * int(chunk.right)

    scorer = _JointScorer(model)
    state = model.prednet.init_state()
    g_part = scorer.g_part(state)
    raw = []
    stacked_rows = []
    next_emit = 0  # first stacked frame not yet decoded

    def decode_through(limit, stacked_mat):
        nonlocal next_emit, state, g_part
        out = []
        while next_emit <= limit:
            t = next_emit
            f_part = scorer.f_part(model.encoder.frame_np(stacked_mat, t, chunk))
            for _ in range(cfg.max_symbols_per_frame):
                lp = scorer.log_probs(f_part, g_part)
                k = _best_label(lp)
                if k == BLANK:
                    break
                out.append((t, k))
                state = model.prednet.advance_np(state, k)
                g_part = scorer.g_part(state)
            else:
                log.warning("frame %d hit the %d-symbol guard; forcing frame advance",
                            t, cfg.max_symbols_per_frame)
            next_emit += 1
        return out

    for frame in raw_frames:
        raw.append(np.asarray(frame))
        n_raw = len(raw)
        # Stacked frame s needs raw frame factor*s + stack_right; no end
        # padding mid-stream.
        n_ready = max(0, (n_raw - 1 - stack_right) // factor + 1)
        while len(stacked_rows) < n_ready:
            s = len(stacked_rows)
            window = [raw[min(max(s * factor + o, 0), n_raw - 1)]
                      for o in range(-stack_left, stack_right + 1)]
            stacked_rows.append(np.concatenate(window).astype(np.float64))
        if stacked_rows:
            mat = np.asarray(stacked_rows)
            # Frame t decodable once its receptive field is complete
            # mid-stream: t + lookahead already stacked.
            yield from decode_through(len(stacked_rows) - 1 - lookahead, mat)
    # Flush: rebuild the tail with end-of-stream edge replication, then
    # decode everything left.
    if not raw:
        return
    full = stack_downsample(np.asarray(raw), stack_left, stack_right, factor)
    yield from decode_through(full.shape[0] - 1, full)
