"""Training loop: batched lattice losses, dev CER tracking, checkpointing.

Each step backpropagates the mean joint loss of one batch. Metrics stream to
a CSV with columns step,lr,transducer_loss,par_loss,joint_loss,dev_cer; the
per-step rows leave dev_cer empty and each epoch appends one summary row
(epoch-mean losses, dev CER) under the epoch's final step number.
"""

import os
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .data import make_batches
from .decode import corpus_cer, greedy_decode
from .lattice import transducer_loss
from .model import SATModel
from .optim import NoamWarmup, SGDMomentum
from .pathreg import ParConfig, build_path, par_loss

METRICS_COLUMNS = "step,lr,transducer_loss,par_loss,joint_loss,dev_cer"


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "sgd"      # sgd | noam
    lr: float = 0.001
    momentum: float = 0.9
    halving_patience: int = 1
    min_lr: float = 1e-6
    lr_factor: float = 0.5      # noam only
    warmup_steps: int = 8000    # noam only
    adaptive: bool = True       # noam only: moment accumulators on/off
    beta: float = 0.0
    detach_weight: bool = True
    labels_only: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if self.optimizer not in ("sgd", "noam"):
            raise ValueError(f"optimizer must be sgd or noam, got {self.optimizer!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")


class Trainer:
    """Drives epochs over pre-batched utterances and tracks dev CER.

    One RNG (seeded from the config) serves both batch-order shuffling and
    dropout, so a (seed, data) pair fixes the whole run; checkpoints carry
    its state and resuming reproduces the next step bit for bit.
    """

    def __init__(self, model: SATModel, vocab, train_utts, dev_utts,
                 cfg: TrainConfig = None, metrics_path=None):
        self.model = model
        self.vocab = vocab
        self.cfg = cfg or TrainConfig()
        mc = model.config
        self.batches = make_batches(train_utts, vocab, self.cfg.batch_size,
                                    left=mc.stack_left, right=mc.stack_right,
                                    factor=mc.factor)
        self.dev = [make_batches([u], vocab, 1, left=mc.stack_left,
                                 right=mc.stack_right, factor=mc.factor)[0]
                    for u in dev_utts]
        self.par_cfg = ParConfig(beta=self.cfg.beta,
                                 detach_weight=self.cfg.detach_weight,
                                 labels_only=self.cfg.labels_only)
        self.paths = None
        if self.cfg.beta > 0.0:
            self.paths = []
            for batch in self.batches:
                rows = []
                for i, ali in enumerate(batch.alignments):
                    if ali is None:
                        raise ValueError(
                            f"regularization weight {self.cfg.beta} needs "
                            f"alignments, but {batch.utt_ids[i]} has none")
                    rows.append(build_path(ali, batch.targets[i]))
                self.paths.append(rows)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.optimizer = self._make_optimizer()
        self.epoch = 0
        self.global_step = 0
        self.best_dev = None
        self.history = []
        self.metrics_path = metrics_path
        if metrics_path is not None and not os.path.exists(metrics_path):
            with open(metrics_path, "w", encoding="utf-8") as f:
                f.write(METRICS_COLUMNS + "\n")

    def _make_optimizer(self):
        c = self.cfg
        if c.optimizer == "sgd":
            return SGDMomentum(self.model.params, lr=c.lr, momentum=c.momentum,
                               halving_patience=c.halving_patience,
                               min_lr=c.min_lr)
        return NoamWarmup(self.model.params, lr_factor=c.lr_factor,
                          warmup_steps=c.warmup_steps, d_m=self.model.config.d_m,
                          adaptive=c.adaptive)

    def _write_row(self, step, lr, tr, pr, jn, dev=""):
        if self.metrics_path is None:
            return
        dev_s = dev if isinstance(dev, str) else f"{dev:.10g}"
        with open(self.metrics_path, "a", encoding="utf-8") as f:
            f.write(f"{step},{lr:.10g},{tr:.10g},{pr:.10g},{jn:.10g},{dev_s}\n")

    def train_batch(self, batch, paths=None):
        """One optimizer step on the mean joint loss of a batch."""
        n = len(batch.targets)
        joints = []
        t_sum = 0.0
        p_sum = 0.0
        for i in range(n):
            t_len = int(batch.feat_lengths[i])
            lat = self.model.forward_lattice(batch.feats[i, :t_len],
                                             batch.targets[i],
                                             training=True, rng=self.rng)
            base = transducer_loss(lat, validate=False)
            t_sum += base.item()
            if self.par_cfg.beta > 0.0:
                reg = par_loss(lat, paths[i], self.par_cfg)
                p_sum += reg.item()
                joints.append(ad.add(base, ad.scale(reg, self.par_cfg.beta)))
            else:
                joints.append(base)
        total = joints[0]
        for j in joints[1:]:
            total = ad.add(total, j)
        mean = ad.scale(total, 1.0 / n)
        ad.zero_grads(self.model.params)
        mean.backward()
        self.optimizer.step()
        return {"transducer": t_sum / n, "par": p_sum / n, "joint": mean.item()}

    def evaluate(self) -> float:
        """Corpus CER of greedy decoding over the dev set.

        Runs the whole-sequence encoder path; bounded windows mask to the
        same receptive field there, so only reduction order differs from
        the per-frame decode path.
        """
        refs = []
        hyps = []
        for batch in self.dev:
            t_len = int(batch.feat_lengths[0])
            labels = greedy_decode(self.model, batch.feats[0, :t_len],
                                   frame_exact=False)
            refs.append(batch.targets[0])
            hyps.append(labels)
        return corpus_cer(refs, hyps)

    def run_epoch(self) -> dict:
        """One pass over the training batches plus a dev evaluation."""
        self.epoch += 1
        n_b = len(self.batches)
        order = self.rng.permutation(n_b) if self.cfg.shuffle else np.arange(n_b)
        sums = {"transducer": 0.0, "par": 0.0, "joint": 0.0}
        for bi in order:
            paths = self.paths[bi] if self.paths is not None else None
            stats = self.train_batch(self.batches[int(bi)], paths)
            self.global_step += 1
            self._write_row(self.global_step, self.optimizer.lr,
                            stats["transducer"], stats["par"], stats["joint"])
            for k in sums:
                sums[k] += stats[k]
        means = {k: v / n_b for k, v in sums.items()}
        dev = self.evaluate()
        if self.best_dev is None or dev < self.best_dev:
            self.best_dev = dev
        self.optimizer.report_dev(dev)
        self._write_row(self.global_step, self.optimizer.lr, means["transducer"],
                        means["par"], means["joint"], dev)
        entry = {"epoch": self.epoch, "step": self.global_step,
                 "transducer_loss": means["transducer"], "par_loss": means["par"],
                 "joint_loss": means["joint"], "dev_cer": dev}
        self.history.append(entry)
        return entry

    def run(self, checkpoint_dir=None, run_meta: dict = None):
        """Epochs until the limit or the lr floor; returns the history.

        With a checkpoint dir, every epoch refreshes last.ckpt and dev
        improvements refresh best.ckpt.
        """
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
        while self.epoch < self.cfg.epochs and not self.optimizer.should_stop:
            entry = self.run_epoch()
            if checkpoint_dir is not None:
                self.save(os.path.join(checkpoint_dir, "last.ckpt"), run_meta)
                if entry["dev_cer"] <= self.best_dev:
                    self.save(os.path.join(checkpoint_dir, "best.ckpt"), run_meta)
        return self.history

    def save(self, path, run_meta: dict = None) -> None:
        opt_meta, opt_arrays = self.optimizer.state_dict()
        meta = {"trainer": {
            "config": asdict(self.cfg),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "best_dev": self.best_dev,
            "optimizer": opt_meta,
            "rng": ckpt.rng_state_to_meta(self.rng),
            "history": self.history,
        }}
        if run_meta:
            meta["run"] = dict(run_meta)
        arrays = dict(self.model.params)
        arrays.update(opt_arrays)
        ckpt.save_checkpoint(path, arrays, asdict(self.model.config), meta)

    @classmethod
    def resume(cls, path, vocab, train_utts, dev_utts, metrics_path=None):
        """Rebuild a trainer mid-run; the next step matches the original run."""
        model, meta, arrays = SATModel.load(path)
        if "trainer" not in (meta or {}):
            raise ValueError(f"{path}: checkpoint has no trainer state")
        info = meta["trainer"]
        trainer = cls(model, vocab, train_utts, dev_utts,
                      TrainConfig(**info["config"]), metrics_path=metrics_path)
        trainer.optimizer.load_state_dict(info["optimizer"], arrays)
        trainer.rng = ckpt.rng_state_from_meta(info["rng"])
        trainer.epoch = info["epoch"]
        trainer.global_step = info["global_step"]
        trainer.best_dev = info["best_dev"]
        trainer.history = [dict(h) for h in info["history"]]
        return trainer
