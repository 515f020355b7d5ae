"""Command-line surface: synth, ingest, train, eval, query.

Every command is deterministic given its inputs and seed. Exit codes: 0 on
success, 1 on runtime failure (bad corpus, diverged training, I/O), 2 on
usage or configuration errors. ``--threads`` (or TCMA_THREADS) caps the
corpus-loading worker pool.

Config files are flat ``key = value`` documents (ints, floats, booleans and
bare/quoted strings; ``#`` comments). Flags override file values, and the
fully expanded effective configuration is dumped into the output directory
before any work starts.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .errors import ConfigError, CorpusError, TcmaError, TrainingDivergedError
from .loss import LossConfig
from .retrieval import (DEFAULT_FUSION, build_index, evaluate, retrieve_t2v,
                        write_results_jsonl)
from .store import Corpus, load_corpus
from .synth import generate_synthetic_corpus
from .trainer import Checkpoint, TrainConfig, config_hash, fit


def _fail(message: str) -> "click.ClickException":
    return click.ClickException(message)


def _load_corpus(path, threads) -> Corpus:
    try:
        return load_corpus(path, threads=threads)
    except CorpusError as exc:
        raise _fail(f"corpus rejected: {exc}") from exc


def read_flat_config(path) -> dict:
    """Parse a flat key=value config file."""
    values: dict[str, object] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise click.UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click.UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise click.UsageError(f"{path}:{lineno}: empty key")
        if len(val) >= 2 and val[0] == val[-1] and val[0] in "'\"":
            values[key] = val[1:-1]
        elif val.lower() in ("true", "false"):
            values[key] = val.lower() == "true"
        else:
            try:
                values[key] = int(val)
            except ValueError:
                try:
                    values[key] = float(val)
                except ValueError:
                    values[key] = val
    return values


def _merge(flag_value, file_values: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if key in file_values:
        return file_values[key]
    return default


def _parse_fusion(text: str) -> tuple[float, float, float]:
    parts = text.replace(",", ":").split(":")
    if len(parts) != 3:
        raise click.UsageError(f"fusion weights must be three numbers like '5:5:1', got {text!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError as exc:
        raise click.UsageError(f"bad fusion weights {text!r}") from exc


_LEVEL_FUSION = {
    "video": (1.0, 0.0, 0.0),
    "video+frame": (5.0, 5.0, 0.0),
    "video+frame+patch": DEFAULT_FUSION,
}


@click.group()
def main() -> None:
    """Text-conditioned multi-granularity text-video retrieval engine."""


@main.command()
@click.option("--out", required=True, type=click.Path(), help="Output corpus directory.")
@click.option("--videos", default=50, show_default=True)
@click.option("--captions-per-video", default=5, show_default=True)
@click.option("--dim", default=64, show_default=True)
@click.option("--frames", default=12, show_default=True)
@click.option("--patches", default=16, show_default=True)
@click.option("--max-words", default=32, show_default=True)
@click.option("--noise", default=0.4, show_default=True)
@click.option("--salient-fraction", default=0.25, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--unstructured", is_flag=True, help="No planted topics: pure noise corpus.")
def synth(out, videos, captions_per_video, dim, frames, patches, max_words,
          noise, salient_fraction, seed, unstructured) -> None:
    """Generate a planted synthetic corpus."""
    try:
        manifest = generate_synthetic_corpus(
            out, seed=seed, n_videos=videos, captions_per_video=captions_per_video,
            dim=dim, frames_per_video=frames, patches_per_frame=patches,
            max_words=max_words, noise=noise, salient_fraction=salient_fraction,
            structured=not unstructured)
    except TcmaError as exc:
        raise _fail(str(exc)) from exc
    click.echo(f"wrote {videos} videos x {captions_per_video} captions "
               f"(D={dim}, T={frames}, M={patches}, L={max_words}, seed={seed}) "
               f"-> {manifest}")


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--threads", envvar="TCMA_THREADS", default=None, type=int)
def ingest(corpus_path, threads) -> None:
    """Validate an external corpus and print a summary."""
    corpus = _load_corpus(corpus_path, threads)
    click.echo(f"ok: {corpus.n_videos} videos, {corpus.n_captions} captions, "
               f"D={corpus.dim}, T={corpus.frames_per_video}, "
               f"M={corpus.patches_per_frame}, L={corpus.max_words}")
    orphans = [vid for vid, caps in corpus.captions_by_video.items() if not caps]
    if orphans:
        click.echo(f"note: {len(orphans)} video(s) have no captions "
                   f"(e.g. {orphans[0]}); they cannot anchor v2t queries")


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--epochs", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--lr", default=None, type=float)
@click.option("--warmup-fraction", default=None, type=float)
@click.option("--seed", default=None, type=int)
@click.option("--k-w", default=None, type=int)
@click.option("--k-p", default=None, type=int)
@click.option("--alpha", default=None, type=float)
@click.option("--beta", default=None, type=float)
@click.option("--lambda-video", default=None, type=float)
@click.option("--lambda-frame", default=None, type=float)
@click.option("--lambda-patch", default=None, type=float)
@click.option("--no-logit-scale", is_flag=True, default=False)
@click.option("--holdout-videos", default=None, type=int,
              help="Hold out the last K videos (by manifest order) from training.")
@click.option("--validate-each-epoch", is_flag=True, default=False,
              help="Log t2v R@1 on the holdout after every epoch.")
@click.option("--checkpoint-every", default=None, type=int)
@click.option("--resume", "resume_path", default=None, type=click.Path())
@click.option("--threads", envvar="TCMA_THREADS", default=None, type=int)
def train(corpus_path, out, config_path, epochs, batch_size, lr, warmup_fraction,
          seed, k_w, k_p, alpha, beta, lambda_video, lambda_frame, lambda_patch,
          no_logit_scale, holdout_videos, validate_each_epoch, checkpoint_every,
          resume_path, threads) -> None:
    """Train alignment heads; writes checkpoint(s), metrics.jsonl and config.json."""
    file_values = read_flat_config(config_path) if config_path else {}
    cfg = TrainConfig(
        epochs=_merge(epochs, file_values, "epochs", 30),
        lr_heads=_merge(lr, file_values, "lr", 1e-4),
        batch_size=_merge(batch_size, file_values, "batch_size", 64),
        warmup_fraction=_merge(warmup_fraction, file_values, "warmup_fraction", 0.1),
        seed=_merge(seed, file_values, "seed", 0),
        k_w=_merge(k_w, file_values, "k_w", 8),
        k_p=_merge(k_p, file_values, "k_p", 3),
        loss=LossConfig(
            alpha=_merge(alpha, file_values, "alpha", 0.05),
            beta=_merge(beta, file_values, "beta", 0.001),
            lambda_video=_merge(lambda_video, file_values, "lambda_video", 5.0),
            lambda_frame=_merge(lambda_frame, file_values, "lambda_frame", 5.0),
            lambda_patch=_merge(lambda_patch, file_values, "lambda_patch", 1.0),
            use_logit_scale=not _merge(no_logit_scale or None, file_values, "no_logit_scale", False),
        ),
    )
    holdout = _merge(holdout_videos, file_values, "holdout_videos", 0)
    ckpt_every = _merge(checkpoint_every, file_values, "checkpoint_every", 0)
    try:
        cfg.validate()
        if holdout < 0:
            raise ConfigError("holdout_videos must be >= 0")
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    effective = {
        "command": "train", "corpus": str(corpus_path), "out": str(out_dir),
        "holdout_videos": holdout, "checkpoint_every": ckpt_every,
        "validate_each_epoch": validate_each_epoch,
        "config_hash": config_hash(cfg), **cfg.to_dict(),
    }
    (out_dir / "config.json").write_text(json.dumps(effective, sort_keys=True, indent=2),
                                         encoding="utf-8")

    corpus = _load_corpus(corpus_path, threads)
    if holdout >= corpus.n_videos:
        raise click.UsageError(f"holdout_videos={holdout} leaves no training videos")
    train_corpus = corpus.subset(range(corpus.n_videos - holdout)) if holdout else corpus
    val_corpus = corpus.subset(range(corpus.n_videos - holdout, corpus.n_videos)) \
        if (holdout and validate_each_epoch) else None

    resume = None
    if resume_path is not None:
        try:
            resume = Checkpoint.load(resume_path)
        except TcmaError as exc:
            raise _fail(f"cannot load resume checkpoint: {exc}") from exc
    try:
        _, log = fit(train_corpus, cfg, val_corpus=val_corpus, out_dir=out_dir,
                     checkpoint_every=ckpt_every, resume=resume)
    except TrainingDivergedError as exc:
        raise _fail(f"training diverged: {exc}; per-level losses {exc.breakdown}") from exc
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc
    except TcmaError as exc:
        raise _fail(str(exc)) from exc
    final = log[-1]["loss"] if log else float("nan")
    click.echo(f"trained {cfg.epochs} epochs on {train_corpus.n_videos} videos; "
               f"final epoch mean loss {final:.6f}; checkpoint at {out_dir / 'checkpoint'}")


def _report_table(reports: dict) -> str:
    lines = [f"{'direction':<10}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'MdR':>8}{'MnR':>10}{'queries':>9}"]
    for name, rep in reports.items():
        lines.append(f"{name:<10}{rep.r1:>8.1f}{rep.r5:>8.1f}{rep.r10:>8.1f}"
                     f"{rep.mdr:>8.1f}{rep.mnr:>10.2f}{rep.query_count:>9d}")
    return "\n".join(lines)


@main.command(name="eval")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--direction", default="both", type=click.Choice(["both", "t2v", "v2t"]))
@click.option("--n-candidates", default=50, show_default=True)
@click.option("--levels", default=None, type=click.Choice(sorted(_LEVEL_FUSION)))
@click.option("--fusion", "fusion_text", default=None,
              help="Explicit fusion weights, e.g. '5:5:1'. Mutually exclusive with --levels.")
@click.option("--holdout-videos", default=0, show_default=True,
              help="Evaluate only on the last K videos (manifest order).")
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--dump-ranks", "dump_ranks", default=None, type=click.Path(),
              help="Write per-query ranked lists (JSON lines).")
@click.option("--threads", envvar="TCMA_THREADS", default=None, type=int)
def eval_cmd(corpus_path, checkpoint_path, direction, n_candidates, levels,
             fusion_text, holdout_videos, out_dir, dump_ranks, threads) -> None:
    """Evaluate a checkpoint: R@K / MdR / MnR per direction."""
    if levels is not None and fusion_text is not None:
        raise click.UsageError("--levels and --fusion are mutually exclusive")
    fusion = _LEVEL_FUSION[levels] if levels is not None else (
        _parse_fusion(fusion_text) if fusion_text is not None else DEFAULT_FUSION)
    try:
        checkpoint = Checkpoint.load(checkpoint_path)
    except TcmaError as exc:
        raise _fail(f"cannot load checkpoint: {exc}") from exc
    corpus = _load_corpus(corpus_path, threads)
    if holdout_videos:
        if holdout_videos >= corpus.n_videos:
            raise click.UsageError("holdout exceeds corpus size")
        corpus = corpus.subset(range(corpus.n_videos - holdout_videos, corpus.n_videos))

    directions = ["t2v", "v2t"] if direction == "both" else [direction]
    reports = {}
    try:
        for d in directions:
            reports[d] = evaluate(corpus, checkpoint.heads, direction=d,
                                  n_candidates=n_candidates, fusion=fusion)
    except TcmaError as exc:
        raise _fail(str(exc)) from exc
    click.echo(_report_table(reports))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {d: rep.to_dict() for d, rep in reports.items()}
        payload["n_candidates"] = n_candidates
        payload["fusion"] = list(fusion)
        (out / "metrics.json").write_text(json.dumps(payload, sort_keys=True, indent=2),
                                          encoding="utf-8")
    if dump_ranks is not None:
        index = build_index(corpus, checkpoint.heads)
        results = []
        if "t2v" in directions:
            results += [retrieve_t2v(cap, index, checkpoint.heads, n_candidates, fusion)
                        for cap in corpus.captions]
        if "v2t" in directions:
            from .retrieval import retrieve_v2t
            results += [retrieve_v2t(j, corpus, index, checkpoint.heads, n_candidates, fusion)
                        for j in range(corpus.n_videos)]
        write_results_jsonl(results, dump_ranks)


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--caption-id", default=None)
@click.option("--sentence-file", default=None, type=click.Path(),
              help="Query by raw embedding files instead of a caption id.")
@click.option("--words-file", default=None, type=click.Path())
@click.option("--valid-words", default=None, type=int)
@click.option("--k", default=10, show_default=True)
@click.option("--n-candidates", default=50, show_default=True)
@click.option("--fusion", "fusion_text", default=None)
@click.option("--threads", envvar="TCMA_THREADS", default=None, type=int)
def query(corpus_path, checkpoint_path, caption_id, sentence_file, words_file,
          valid_words, k, n_candidates, fusion_text, threads) -> None:
    """Rank videos for one caption query."""
    from .store import CaptionData, read_embeddings

    if (caption_id is None) == (sentence_file is None):
        raise click.UsageError("provide exactly one of --caption-id or --sentence-file")
    fusion = _parse_fusion(fusion_text) if fusion_text else DEFAULT_FUSION
    try:
        checkpoint = Checkpoint.load(checkpoint_path)
    except TcmaError as exc:
        raise _fail(f"cannot load checkpoint: {exc}") from exc
    corpus = _load_corpus(corpus_path, threads)

    if caption_id is not None:
        matches = [c for c in corpus.captions if c.caption_id == caption_id]
        if not matches:
            raise click.UsageError(f"unknown caption id {caption_id!r}")
        cap = matches[0]
    else:
        try:
            sentence = read_embeddings(sentence_file, expect_shape=(corpus.dim,))
            if words_file is not None:
                words = read_embeddings(words_file)
                valid = valid_words if valid_words is not None else words.shape[0]
            else:
                words = sentence[None, :]
                valid = 1
        except TcmaError as exc:
            raise _fail(str(exc)) from exc
        cap = CaptionData("query", "", sentence, words, valid)

    try:
        index = build_index(corpus, checkpoint.heads)
        result = retrieve_t2v(cap, index, checkpoint.heads, n_candidates, fusion)
    except TcmaError as exc:
        raise _fail(str(exc)) from exc
    k = min(k, len(result.ranking))
    click.echo(f"{'rank':<6}{'video_id':<16}{'fused':>10}{'video':>10}{'frame':>10}{'patch':>10}")
    for i, cand in enumerate(result.ranking[:k], start=1):
        fus = f"{cand.fused:.4f}" if cand.fused is not None else "-"
        sf = f"{cand.s_frame:.4f}" if cand.s_frame is not None else "-"
        sp = f"{cand.s_patch:.4f}" if cand.s_patch is not None else "-"
        click.echo(f"{i:<6}{cand.candidate_id:<16}{fus:>10}{cand.s_video:>10.4f}{sf:>10}{sp:>10}")


if __name__ == "__main__":
    sys.exit(main())
