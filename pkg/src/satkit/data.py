"""Feature pipeline, synthetic transduction tasks, and dataset plumbing.

Synthetic tasks are generated at the model frame rate: every model frame
spans ``factor`` raw feature frames built from one template plus per-raw-frame
noise, so the oracle alignment (one token per model frame) lines up with the
downsampled sequence by construction.

File formats:
  features   binary, magic "SATFEAT1", uint32 rows/cols, little-endian
             float32 row-major payload
  text       one utterance per line: "utt_id tok tok ..."
  alignments same shape as text with "sil" for silence frames
  utt2spk    one "utt_id speaker" pair per line
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vocab import BLANK, RESERVED, Vocab

FEAT_MAGIC = b"SATFEAT1"
SIL = "sil"


def stack_downsample(features: np.ndarray, left: int = 3, right: int = 1,
                     factor: int = 3) -> np.ndarray:
    """Frame stacking with edge replication, then keep every factor-th frame.

    Output frame s concatenates raw frames [factor*s - left, factor*s + right]
    clipped into range; output length is ceil(frames / factor). Always
    returns float64 (the model-facing dtype).
    """
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError(f"features must be (frames, dim) with frames >= 1, got {feats.shape}")
    n = feats.shape[0]
    base = np.arange(0, n, factor)[:, None]
    idx = np.clip(base + np.arange(-left, right + 1)[None, :], 0, n - 1)
    return feats[idx].reshape(len(base), -1).astype(np.float64)


def norm_stats(feature_matrices):
    """Per-dimension mean and standard deviation over a list of matrices."""
    stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in feature_matrices])
    return stacked.mean(axis=0), stacked.std(axis=0)


def apply_norm(features: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """(x - mean) / std per dimension; zero-variance dimensions map to 0."""
    out = np.asarray(features, dtype=np.float64) - mean
    nz = std > 0.0
    out[:, nz] /= std[nz]
    out[:, ~nz] = 0.0
    return out


def normalize_dataset(utterances, scope: str = "per-speaker", utt2spk=None):
    """Normalize features in place over the requested statistics scope."""
    if scope == "per-utterance":
        groups = {u.utt_id: [u] for u in utterances}
    elif scope == "per-speaker":
        utt2spk = utt2spk or {}
        groups = {}
        for u in utterances:
            groups.setdefault(utt2spk.get(u.utt_id, u.speaker), []).append(u)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    for members in groups.values():
        mean, std = norm_stats([u.feats for u in members])
        for u in members:
            u.feats = apply_norm(u.feats, mean, std).astype(np.float32)
    return utterances


@dataclass
class Utterance:
    utt_id: str
    feats: np.ndarray              # raw (frames, feature_dim) float32
    targets: list                  # token strings
    alignment: list = None         # per model-frame token strings, SIL for silence
    speaker: str = "global"


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic task description; identical spec -> identical dataset."""

    kind: str = "delayed-copy"     # or "segment-classify"
    vocab_size: int = 16           # user tokens
    feature_dim: int = 8
    min_tokens: int = 3
    max_tokens: int = 10
    noise: float = 0.0
    seed: int = 0
    factor: int = 3                # raw frames per model frame

    def __post_init__(self):
        if self.kind not in ("delayed-copy", "segment-classify"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 2:
            raise ValueError(f"need at least 2 tokens, got {self.vocab_size}")

    def token_names(self):
        return [f"t{i}" for i in range(self.vocab_size)]

    def vocab(self) -> Vocab:
        return Vocab(list(RESERVED) + self.token_names())


def _templates(spec: TaskSpec) -> np.ndarray:
    """One feature template per token, shared across splits."""
    rng = np.random.default_rng(spec.seed)
    return rng.standard_normal((spec.vocab_size, spec.feature_dim))


SPLIT_INDEX = {"train": 0, "dev": 1, "test": 2}


def generate_split(spec: TaskSpec, n_utts: int, split: str = "train"):
    """Generate one split of the task; templates are shared, streams are not.

    delayed-copy: token segments of 2-4 model frames separated by 1-2 silence
    frames (plus a leading silence); segment-classify: fixed 3-frame segments
    with single silence separators. The alignment marks the last frame of
    each token segment; everything else is silence. Raw features replicate
    the frame's template ``factor`` times with fresh noise per raw frame.
    """
    if split not in SPLIT_INDEX:
        raise ValueError(f"split must be one of {sorted(SPLIT_INDEX)}, got {split!r}")
    templates = _templates(spec)
    rng = np.random.default_rng([spec.seed, SPLIT_INDEX[split]])
    names = spec.token_names()
    fixed = spec.kind == "segment-classify"
    utts = []
    for i in range(n_utts):
        n_tok = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        tokens = rng.integers(0, spec.vocab_size, size=n_tok)
        frames = []                 # per model frame: token index or None
        alignment = []
        frames += [None] * (1 if fixed else int(rng.integers(1, 3)))
        for tok in tokens:
            seg = 3 if fixed else int(rng.integers(2, 5))
            frames += [tok] * seg
            sil = 1 if fixed else int(rng.integers(1, 3))
            frames += [None] * sil
        for j, f in enumerate(frames):
            alignment.append(names[f] if _is_segment_end(frames, j) else SIL)
        raw = np.empty((len(frames) * spec.factor, spec.feature_dim))
        for j, f in enumerate(frames):
            tpl = templates[f] if f is not None else np.zeros(spec.feature_dim)
            for r in range(spec.factor):
                noise = rng.standard_normal(spec.feature_dim) if spec.noise > 0 else 0.0
                raw[j * spec.factor + r] = tpl + spec.noise * noise
        utts.append(Utterance(
            utt_id=f"{spec.kind}-{split}-{i:05d}",
            feats=raw.astype(np.float32),
            targets=[names[t] for t in tokens],
            alignment=alignment,
            speaker=f"spk{i % 4}",
        ))
    return utts


def _is_segment_end(frames, j):
    return frames[j] is not None and (j + 1 == len(frames) or frames[j + 1] != frames[j])


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_feats(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.astype("<f4").tobytes())


def read_feats(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(8) != FEAT_MAGIC:
            raise ValueError(f"{path}: not a feature file")
        rows, cols = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"{path}: truncated feature payload")
    return data.reshape(rows, cols).astype(np.float32)


def write_token_file(path, entries) -> None:
    """entries: iterable of (utt_id, token list)."""
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, tokens in entries:
            f.write(utt_id + (" " + " ".join(tokens) if tokens else "") + "\n")


def read_token_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                out[parts[0]] = parts[1:]
    return out


def save_dataset(dirpath, utterances) -> None:
    """Write one split: feats/<utt>.sf + text + align + utt2spk."""
    d = Path(dirpath)
    (d / "feats").mkdir(parents=True, exist_ok=True)
    for u in utterances:
        write_feats(d / "feats" / f"{u.utt_id}.sf", u.feats)
    write_token_file(d / "text", [(u.utt_id, u.targets) for u in utterances])
    if all(u.alignment is not None for u in utterances):
        write_token_file(d / "align", [(u.utt_id, u.alignment) for u in utterances])
    with open(d / "utt2spk", "w", encoding="utf-8") as f:
        for u in utterances:
            f.write(f"{u.utt_id} {u.speaker}\n")


def load_dataset(dirpath):
    d = Path(dirpath)
    if not (d / "text").exists():
        raise FileNotFoundError(f"no text file under {d}")
    text = read_token_file(d / "text")
    aligns = read_token_file(d / "align") if (d / "align").exists() else {}
    utt2spk = {}
    if (d / "utt2spk").exists():
        for line in open(d / "utt2spk", encoding="utf-8"):
            parts = line.split()
            if parts:
                utt2spk[parts[0]] = parts[1]
    utts = []
    for utt_id in text:
        utts.append(Utterance(
            utt_id=utt_id,
            feats=read_feats(d / "feats" / f"{utt_id}.sf"),
            targets=text[utt_id],
            alignment=aligns.get(utt_id),
            speaker=utt2spk.get(utt_id, "global"),
        ))
    return utts


def alignment_ids(alignment_tokens, vocab: Vocab):
    """Token-string alignment -> id sequence with silence mapped to blank."""
    return [BLANK if tok == SIL else vocab.id(tok) for tok in alignment_tokens]


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    utt_ids: list
    feats: np.ndarray          # (B, T_max, stacked_dim) zero-padded float64
    feat_lengths: np.ndarray   # (B,)
    feat_mask: np.ndarray      # (B, T_max) 1.0 at valid frames
    targets: list              # list of id lists (unpadded)
    alignments: list           # list of id lists or None


def make_batches(utterances, vocab: Vocab, batch_size: int,
                 sort_by_length: bool = True, left: int = 3, right: int = 1,
                 factor: int = 3):
    """Stack/downsample each utterance and group into padded batches.

    Sorting by stacked length keeps padding waste down; the mask marks valid
    frames so padded positions can never leak into a loss.
    """
    prepared = []
    for u in utterances:
        stacked = stack_downsample(u.feats, left, right, factor)
        prepared.append((u, stacked))
    if sort_by_length:
        prepared.sort(key=lambda p: (p[1].shape[0], p[0].utt_id))
    batches = []
    for i in range(0, len(prepared), batch_size):
        part = prepared[i:i + batch_size]
        t_max = max(s.shape[0] for _, s in part)
        dim = part[0][1].shape[1]
        feats = np.zeros((len(part), t_max, dim))
        mask = np.zeros((len(part), t_max))
        for b, (_, s) in enumerate(part):
            feats[b, :s.shape[0]] = s
            mask[b, :s.shape[0]] = 1.0
        batches.append(Batch(
            utt_ids=[u.utt_id for u, _ in part],
            feats=feats,
            feat_lengths=np.array([s.shape[0] for _, s in part], dtype=np.int64),
            feat_mask=mask,
            targets=[vocab.ids(u.targets) for u, _ in part],
            alignments=[alignment_ids(u.alignment, vocab) if u.alignment else None
                        for u, _ in part],
        ))
    return batches
