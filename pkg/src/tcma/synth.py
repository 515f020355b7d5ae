"""Planted synthetic corpora for tests and acceptance runs.

Each video gets a latent unit "topic" vector. Every embedding attached to
that video (frames, patches) or to its captions (sentence, words) is the
topic plus an independent Gaussian perturbation, then unit-normalized.

The noise parameter is the expected L2 norm of the perturbation relative to
the unit topic: each component is drawn with standard deviation
``noise / sqrt(dim)``. A configurable fraction of patches per frame and of
valid words per caption is "salient" (perturbation ``noise/4``); the rest
are distractors (``4 * noise``), so saliency scoring has signal to find.
Salient positions are the indices of the smallest raw draws from a dedicated
stream. Word rows past ``valid_words`` are filled with pure unit noise and
carry no topic at all, which poisons any consumer that ignores the validity
count.

Everything is keyed off :mod:`tcma.rng` streams (field code, entity index),
so identical seeds produce byte-identical corpora.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rng import StreamBank, Stream, stream_key
from .store import CorpusManifest, VideoEntry, CaptionEntry, file_sha256, save_manifest, write_embeddings

# stream field codes
_TOPIC, _FRAME, _PATCH, _PATCH_POS, _SENT, _WORD, _WORD_POS, _VALID = range(1, 9)


def _bank(seed: int, field: int, n: int) -> StreamBank:
    return StreamBank(seed, [stream_key(field, i) for i in range(n)])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norms, 1e-12)


def _salient_mask(seed: int, field: int, n_entities: int, groups: int, size: int,
                  k_salient: np.ndarray | int) -> np.ndarray:
    """(n_entities, groups, size) bool mask marking the k smallest draws per group."""
    draws = _bank(seed, field, n_entities).u64_block(groups * size).reshape(n_entities, groups, size)
    ranks = np.argsort(np.argsort(draws, axis=-1, kind="stable"), axis=-1, kind="stable")
    k = np.asarray(k_salient).reshape(-1, 1, 1) if np.ndim(k_salient) else int(k_salient)
    return ranks < k


def generate_synthetic_corpus(
    out_dir,
    *,
    seed: int,
    n_videos: int,
    captions_per_video: int = 5,
    dim: int = 64,
    frames_per_video: int = 12,
    patches_per_frame: int = 16,
    max_words: int = 32,
    noise: float = 0.4,
    salient_fraction: float = 0.25,
    structured: bool = True,
) -> Path:
    """Write a corpus under ``out_dir`` and return the manifest path.

    ``structured=False`` drops the topics entirely (every embedding is an
    independent unit Gaussian), giving a null corpus with no planted signal.
    """
    if n_videos <= 0 or captions_per_video <= 0:
        raise ConfigError("generate_synthetic_corpus: counts must be positive")
    for name, v in (("dim", dim), ("frames_per_video", frames_per_video),
                    ("patches_per_frame", patches_per_frame), ("max_words", max_words)):
        if v <= 0:
            raise ConfigError(f"generate_synthetic_corpus: {name} must be positive")
    if noise < 0 or not 0 < salient_fraction <= 1:
        raise ConfigError("generate_synthetic_corpus: bad noise/salient_fraction")

    out_dir = Path(out_dir)
    emb_dir = out_dir / "embeddings"
    emb_dir.mkdir(parents=True, exist_ok=True)

    d, t, m, l = dim, frames_per_video, patches_per_frame, max_words
    nv, cpv = n_videos, captions_per_video
    nc = nv * cpv
    comp = noise / math.sqrt(d)  # per-component noise std

    topics = _unit_rows(_bank(seed, _TOPIC, nv).normal_block(d))
    topic_w = 1.0 if structured else 0.0

    # frames: (nv, T, D)
    g = _bank(seed, _FRAME, nv).normal_block(t * d).reshape(nv, t, d)
    frames = _unit_rows(topic_w * topics[:, None, :] + comp * g)

    # patches: (nv, T, M, D) with per-patch noise scale
    k_sal_p = max(1, round(salient_fraction * m))
    sal_p = _salient_mask(seed, _PATCH_POS, nv, t, m, k_sal_p)
    g = _bank(seed, _PATCH, nv).normal_block(t * m * d).reshape(nv, t, m, d)
    scale_p = np.where(sal_p, comp / 4.0, comp * 4.0)[..., None]
    patches = _unit_rows(topic_w * topics[:, None, None, :] + scale_p * g)

    # caption-side: topic of the owning video, repeated captions_per_video times
    cap_topics = np.repeat(topics, cpv, axis=0)
    g = _bank(seed, _SENT, nc).normal_block(d)
    sentences = _unit_rows(topic_w * cap_topics + comp * g)

    lo_valid = max(1, (l + 1) // 2)
    valid = _bank(seed, _VALID, nc).integer_block(1, lo_valid, l)[:, 0]

    g = _bank(seed, _WORD, nc).normal_block(l * d).reshape(nc, l, d)
    k_sal_w = np.maximum(1, np.round(salient_fraction * valid).astype(np.int64))
    # salient word slots are drawn within the valid prefix only: padded
    # positions sort last by forcing their draws to the maximum
    draws = _bank(seed, _WORD_POS, nc).u64_block(l)
    pad_u64 = np.arange(l)[None, :] >= valid[:, None]
    draws = np.where(pad_u64, np.uint64(0xFFFFFFFFFFFFFFFF), draws)
    ranks = np.argsort(np.argsort(draws, axis=-1, kind="stable"), axis=-1, kind="stable")
    sal_w = ranks < k_sal_w[:, None]
    scale_w = np.where(sal_w, comp / 4.0, comp * 4.0)[..., None]
    words = _unit_rows(topic_w * cap_topics[:, None, :] + scale_w * g)
    # rows past valid_words carry no topic: pure unit noise
    words = np.where(pad_u64[..., None], _unit_rows(g), words)

    digests: dict[str, str] = {}

    def emit(rel: str, arr: np.ndarray) -> str:
        path = emb_dir / rel
        write_embeddings(arr, path)
        digests[f"embeddings/{rel}"] = file_sha256(path)
        return f"embeddings/{rel}"

    videos = []
    captions = []
    for i in range(nv):
        vid = f"v{i:05d}"
        videos.append(VideoEntry(
            video_id=vid,
            frame_file=emit(f"{vid}_frames.tcma", frames[i]),
            patch_file=emit(f"{vid}_patches.tcma", patches[i]),
        ))
        for j in range(cpv):
            k = i * cpv + j
            cid = f"{vid}_c{j}"
            captions.append(CaptionEntry(
                caption_id=cid,
                video_id=vid,
                sentence_file=emit(f"{cid}_sentence.tcma", sentences[k]),
                word_file=emit(f"{cid}_words.tcma", words[k]),
                valid_words=int(valid[k]),
            ))

    manifest = CorpusManifest(1, d, t, m, l, videos, captions)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path, digests)

    info = {
        "seed": seed, "n_videos": nv, "captions_per_video": cpv,
        "dim": d, "frames_per_video": t, "patches_per_frame": m, "max_words": l,
        "noise": repr(noise), "salient_fraction": repr(salient_fraction),
        "structured": structured,
    }
    (out_dir / "synth_info.json").write_text(json.dumps(info, sort_keys=True), encoding="utf-8")
    return manifest_path
