"""Shared fixtures and corpus-building helpers."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pytest

from tcma.store import (CaptionEntry, CorpusManifest, VideoEntry, file_sha256,
                        load_corpus, save_manifest, write_embeddings)


def write_corpus(root: Path, dim: int, frames_per_video: int, patches_per_frame: int,
                 max_words: int, videos: dict[str, tuple[np.ndarray, np.ndarray]],
                 captions: list[dict]) -> Path:
    """Assemble a corpus directory from explicit arrays.

    ``videos`` maps video_id -> (frames (T,D), patches (T,M,D));
    ``captions`` entries need caption_id, video_id, sentence, words, valid_words.
    Returns the manifest path.
    """
    emb = root / "embeddings"
    emb.mkdir(parents=True, exist_ok=True)
    digests: dict[str, str] = {}

    def emit(rel: str, arr) -> str:
        path = emb / rel
        write_embeddings(np.asarray(arr, dtype=np.float64), path)
        digests[f"embeddings/{rel}"] = file_sha256(path)
        return f"embeddings/{rel}"

    video_entries = []
    for vid, (frames, patches) in videos.items():
        video_entries.append(VideoEntry(
            video_id=vid,
            frame_file=emit(f"{vid}_frames.tcma", frames),
            patch_file=emit(f"{vid}_patches.tcma", patches),
        ))
    caption_entries = []
    for cap in captions:
        caption_entries.append(CaptionEntry(
            caption_id=cap["caption_id"],
            video_id=cap["video_id"],
            sentence_file=emit(f"{cap['caption_id']}_sentence.tcma", cap["sentence"]),
            word_file=emit(f"{cap['caption_id']}_words.tcma", cap["words"]),
            valid_words=cap["valid_words"],
            text=cap.get("text"),
        ))
    manifest = CorpusManifest(1, dim, frames_per_video, patches_per_frame, max_words,
                              video_entries, caption_entries)
    manifest_path = root / "manifest.json"
    save_manifest(manifest, manifest_path, digests)
    return manifest_path


def make_planted_corpus(root: Path, n_videos: int = 4, captions_per_video: int = 1,
                        dim: int = 8, t: int = 3, m: int = 4, l: int = 5,
                        noise: float = 0.0, seed: int = 0) -> Path:
    """Small hand-rolled planted corpus (unit topics plus optional noise)."""
    rs = np.random.default_rng(seed)

    def unit(x):
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        return x / np.maximum(n, 1e-12)

    topics = unit(rs.normal(size=(n_videos, dim)))
    videos = {}
    captions = []
    for i in range(n_videos):
        vid = f"v{i:03d}"
        frames = unit(topics[i] + noise * rs.normal(size=(t, dim)))
        patches = unit(topics[i] + noise * rs.normal(size=(t, m, dim)))
        videos[vid] = (frames, patches)
        for j in range(captions_per_video):
            captions.append({
                "caption_id": f"{vid}_c{j}",
                "video_id": vid,
                "sentence": unit(topics[i] + noise * rs.normal(size=dim)),
                "words": unit(topics[i] + noise * rs.normal(size=(l, dim))),
                "valid_words": l,
            })
    return write_corpus(root, dim, t, m, l, videos, captions)


def dir_hash(path: Path) -> str:
    """Content hash of a directory tree (names + bytes, order-independent)."""
    h = hashlib.sha256()
    for p in sorted(Path(path).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def tiny_corpus(tmp_path):
    """1 video, 1 caption, T=2, M=2, D=4, L=3 (the minimal round-trip case)."""
    frames = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    patches = np.array([
        [[1.0, 0, 0, 0], [0, 1.0, 0, 0]],
        [[0, 0, 1.0, 0], [0, 0, 0, 1.0]],
    ])
    sentence = np.array([0.5, 0.5, 0.5, 0.5])
    words = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0]])
    manifest = write_corpus(
        tmp_path, 4, 2, 2, 3,
        {"vid0": (frames, patches)},
        [{"caption_id": "vid0_c0", "video_id": "vid0", "sentence": sentence,
          "words": words, "valid_words": 2, "text": "a tiny clip"}],
    )
    return manifest


@pytest.fixture
def planted_corpus_path(tmp_path):
    return make_planted_corpus(tmp_path / "corpus", n_videos=5, captions_per_video=2,
                               noise=0.05, seed=3)


@pytest.fixture
def loaded_planted(planted_corpus_path):
    return load_corpus(planted_corpus_path)
