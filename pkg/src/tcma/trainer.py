"""Head training: Adam with cosine warm-up, deterministic batching, checkpoints.

The encoders are frozen precomputed embeddings, so a training step only
optimizes the alignment heads. Every source of randomness is a keyed stream
(seed, epoch), making runs bitwise reproducible and checkpoint-resume exact:
resuming at epoch k under the same config replays exactly the steps an
uninterrupted run would have taken.

Batches hold one caption per video (cycling through the captions across
epochs) so the in-batch contrastive diagonal is the unique positive per row;
trailing batches with fewer than two videos are dropped because both loss
terms degenerate there.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignment import TextBatch, VideoBatch, build_forward, head_nodes
from .errors import ConfigError, CorpusFormatError, TrainingDivergedError
from .heads import HeadParameters, PARAM_NAMES
from .loss import LossConfig, hierarchical_node
from .rng import Stream
from .store import Corpus, FORMAT_F64, read_embeddings, write_embeddings

_SHUFFLE_FIELD = 101  # stream tag for epoch shuffles


@dataclass
class TrainConfig:
    epochs: int = 30
    lr_heads: float = 1e-4
    batch_size: int = 64
    warmup_fraction: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    k_w: int = 8
    k_p: int = 3
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.lr_heads <= 0:
            raise ConfigError(f"lr_heads must be positive, got {self.lr_heads}")
        if not 0 <= self.warmup_fraction <= 0.5:
            raise ConfigError(f"warmup_fraction must lie in [0, 0.5], got {self.warmup_fraction}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        self.loss.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def config_hash(cfg: TrainConfig) -> str:
    payload = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("ascii")).hexdigest()


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr over the warm-up steps, then half-cosine decay to 0."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ConfigError(f"lr_schedule: step {step} outside 0..{total_steps}")
    warmup = int(round(cfg.warmup_fraction * total_steps))
    if warmup > 0 and step < warmup:
        return cfg.lr_heads * step / warmup
    if total_steps == warmup:
        return cfg.lr_heads
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.lr_heads * 0.5 * (1.0 + math.cos(math.pi * progress))


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                step: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """One bias-corrected Adam update, in place on (param, m, v)."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, heads: HeadParameters) -> "AdamState":
        # moments are stored rank >= 1 so in-place updates never hit 0-d views
        shapes = {name: np.atleast_1d(np.asarray(arr)).shape for name, arr in heads.param_items()}
        return cls(
            m={name: np.zeros(shape) for name, shape in shapes.items()},
            v={name: np.zeros(shape) for name, shape in shapes.items()},
        )


def _active_levels(loss_cfg: LossConfig) -> tuple[str, ...]:
    return tuple(level for level, lam in loss_cfg.lambdas().items() if lam > 0)


def train_step(videos: VideoBatch, texts: TextBatch, heads: HeadParameters,
               opt: AdamState, cfg: TrainConfig, lr: float | None = None) -> tuple[float, dict[str, float]]:
    """Forward, backprop, and Adam-update every head parameter.

    Only levels with a positive weight are built, so parameters reachable
    solely through disabled levels receive exactly zero gradient. Raises
    :class:`TrainingDivergedError` with the per-level breakdown on a
    non-finite loss, before touching any parameter.
    """
    lr = cfg.lr_heads if lr is None else lr
    params = head_nodes(heads, trainable=True)
    graph = build_forward(videos, texts, params, heads,
                          levels=_active_levels(cfg.loss), pair_feats=True)
    scale = ad.exp(params["logit_scale"]) if cfg.loss.use_logit_scale else 1.0
    total, breakdown_nodes = hierarchical_node(graph.sims, graph.feats, cfg.loss, scale)
    loss_val = float(total.value)
    breakdown = {k: float(n.value) for k, n in breakdown_nodes.items()}
    if not math.isfinite(loss_val):
        raise TrainingDivergedError(f"non-finite loss {loss_val}", breakdown)
    ad.backward(total)
    opt.step += 1
    for name in PARAM_NAMES:
        shape = np.shape(getattr(heads, name))
        arr = np.atleast_1d(np.array(getattr(heads, name), dtype=np.float64))
        grad = np.atleast_1d(params[name].grad).reshape(arr.shape)
        adam_update(arr, grad, opt.m[name], opt.v[name],
                    opt.step, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        setattr(heads, name, arr.reshape(shape))
    heads.clamp_logit_scale()
    return loss_val, breakdown


@dataclass
class Checkpoint:
    heads: HeadParameters
    opt: AdamState
    epoch: int
    cfg_hash: str

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.heads.save(directory / "heads")
        for name in PARAM_NAMES:
            write_embeddings(np.atleast_1d(self.opt.m[name]), directory / f"adam_m_{name}.tcma",
                             format_version=FORMAT_F64)
            write_embeddings(np.atleast_1d(self.opt.v[name]), directory / f"adam_v_{name}.tcma",
                             format_version=FORMAT_F64)
        meta = {"epoch": self.epoch, "step": self.opt.step, "config_hash": self.cfg_hash}
        (directory / "checkpoint.json").write_text(
            json.dumps(meta, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        meta_path = directory / "checkpoint.json"
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CorpusFormatError(f"{meta_path}: cannot read checkpoint metadata ({exc})") from exc
        heads = HeadParameters.load(directory / "heads")
        opt = AdamState.init(heads)
        opt.step = int(meta["step"])
        for name in PARAM_NAMES:
            shape = opt.m[name].shape  # moments keep rank >= 1
            opt.m[name] = read_embeddings(directory / f"adam_m_{name}.tcma").reshape(shape)
            opt.v[name] = read_embeddings(directory / f"adam_v_{name}.tcma").reshape(shape)
        return cls(heads=heads, opt=opt, epoch=int(meta["epoch"]), cfg_hash=str(meta["config_hash"]))


def epoch_batches(corpus: Corpus, cfg: TrainConfig, epoch: int) -> list[tuple[list[int], list[int]]]:
    """Deterministic (video positions, caption positions) batches for one epoch.

    Video order is a seeded shuffle keyed by (seed, epoch); each video
    contributes caption number ``epoch mod n_captions(video)``. Batches of
    fewer than two pairs are dropped.
    """
    n = corpus.n_videos
    perm = Stream(cfg.seed, _SHUFFLE_FIELD, epoch).permutation(n)
    batch = max(2, min(cfg.batch_size, n))
    out = []
    for lo in range(0, n, batch):
        vids = [int(i) for i in perm[lo:lo + batch]]
        if len(vids) < 2:
            continue
        caps = []
        for vpos in vids:
            cap_positions = corpus.captions_by_video[corpus.videos[vpos].video_id]
            if not cap_positions:
                raise ConfigError(f"video {corpus.videos[vpos].video_id} has no captions to train on")
            caps.append(cap_positions[epoch % len(cap_positions)])
        out.append((vids, caps))
    return out


def fit(corpus: Corpus, cfg: TrainConfig, *, val_corpus: Corpus | None = None,
        out_dir=None, checkpoint_every: int = 0,
        resume: Checkpoint | None = None) -> tuple[HeadParameters, list[dict]]:
    """Train heads on a corpus; returns (heads, per-epoch metrics records).

    ``out_dir`` enables checkpoint writing: one directory per
    ``checkpoint_every`` epochs plus a final ``checkpoint`` directory.
    ``resume`` continues an interrupted run under the identical config.
    """
    cfg.validate()
    if corpus.n_videos < 2:
        raise ConfigError(f"training needs at least 2 videos, got {corpus.n_videos}")
    cfg_hash = config_hash(cfg)
    if resume is not None:
        if resume.cfg_hash != cfg_hash:
            raise ConfigError("resume checkpoint was produced under a different config")
        heads = resume.heads.copy()
        opt = AdamState(m={k: v.copy() for k, v in resume.opt.m.items()},
                        v={k: v.copy() for k, v in resume.opt.v.items()},
                        step=resume.opt.step)
        start_epoch = resume.epoch + 1
    else:
        heads = HeadParameters.init_default(corpus.dim, cfg.k_w, cfg.k_p)
        opt = AdamState.init(heads)
        start_epoch = 0

    steps_per_epoch = len(epoch_batches(corpus, cfg, 0))
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    log: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(start_epoch, cfg.epochs):
        batches = epoch_batches(corpus, cfg, epoch)
        losses = []
        sums: dict[str, float] = {}
        last_lr = 0.0
        for i, (vids, caps) in enumerate(batches):
            step_index = epoch * steps_per_epoch + i
            last_lr = lr_schedule(step_index, total_steps, cfg)
            vb = VideoBatch.from_corpus(corpus, vids)
            tb = TextBatch.from_corpus(corpus, caps)
            loss_val, breakdown = train_step(vb, tb, heads, opt, cfg, lr=last_lr)
            losses.append(loss_val)
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v
        record = {
            "epoch": epoch,
            "loss": sum(losses) / max(1, len(losses)),
            "lr": last_lr,
        }
        for k, v in sums.items():
            record[f"loss_{k}"] = v / max(1, len(losses))
        if val_corpus is not None:
            from .retrieval import evaluate  # local import; retrieval depends on alignment only
            report = evaluate(val_corpus, heads, direction="t2v",
                              n_candidates=val_corpus.n_videos)
            record["val_t2v_r1"] = report.r1
        log.append(record)
        if out_dir is not None and checkpoint_every > 0 and (epoch + 1) % checkpoint_every == 0:
            Checkpoint(heads, opt, epoch, cfg_hash).save(out_dir / f"checkpoint_epoch{epoch:04d}")

    if out_dir is not None:
        Checkpoint(heads, opt, cfg.epochs - 1, cfg_hash).save(out_dir / "checkpoint")
        with open(out_dir / "metrics.jsonl", "a" if resume is not None else "w", encoding="utf-8") as fh:
            for record in log:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return heads, log
