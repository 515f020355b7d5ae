"""Two-stage retrieval and rank-based evaluation.

Stage 1 ranks every candidate with the cheap text-agnostic video-level
cosine; stage 2 recomputes the text-conditioned frame and patch similarities
for the top-N candidates only and re-ranks them under fused weights, leaving
the remainder in stage-1 order behind them. Fusion weights default to the
training-level ratio 5:5:1, normalized.

Ranking ties always break toward the lower candidate position (manifest
order), via stable sorts, so results are identical across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import TextBatch, VideoBatch, forward_batch
from .errors import ConfigError, EmptyInputError
from .heads import HeadParameters
from .store import CaptionData, Corpus
from .tensor import l2_normalize

DEFAULT_FUSION = (5.0, 5.0, 1.0)


@dataclass
class VideoIndex:
    video_ids: list[str]
    pooled: np.ndarray    # (n, D), unit rows
    frames: np.ndarray    # (n, T, D)
    patches: np.ndarray   # (n, T, M, D)

    @property
    def size(self) -> int:
        return len(self.video_ids)


def build_index(corpus: Corpus, heads: HeadParameters) -> VideoIndex:
    """Precompute pooled unit vectors for stage 1; order follows the manifest."""
    heads.validate()
    if heads.k_p > corpus.patches_per_frame:
        raise ConfigError(
            f"k_p={heads.k_p} exceeds patches per frame ({corpus.patches_per_frame})")
    if corpus.n_videos == 0:
        raise EmptyInputError("cannot index an empty corpus")
    frames = np.stack([v.frames for v in corpus.videos])
    patches = np.stack([v.patches for v in corpus.videos])
    pooled = l2_normalize(frames.mean(axis=1), axis=-1)
    return VideoIndex([v.video_id for v in corpus.videos], pooled, frames, patches)


@dataclass
class RankedCandidate:
    candidate_id: str
    fused: float | None      # None for candidates outside the re-ranked top-N
    s_video: float
    s_frame: float | None
    s_patch: float | None


@dataclass
class RetrievalResult:
    query_id: str
    ranking: list[RankedCandidate]
    stage1_candidates: int

    def rank_of(self, candidate_id: str) -> int:
        for i, cand in enumerate(self.ranking):
            if cand.candidate_id == candidate_id:
                return i + 1
        raise KeyError(f"candidate {candidate_id!r} not in ranking")


def _normalize_fusion(fusion) -> tuple[float, float, float]:
    w = tuple(float(x) for x in fusion)
    if len(w) != 3 or any(x < 0 for x in w) or sum(w) <= 0:
        raise ConfigError(f"fusion weights must be 3 non-negative values with positive sum, got {fusion}")
    s = sum(w)
    return (w[0] / s, w[1] / s, w[2] / s)


def _stage1_order(scores: np.ndarray) -> np.ndarray:
    # stable argsort of -scores: ties resolve to the lower candidate position
    return np.argsort(-scores, kind="stable")


def retrieve_t2v(caption: CaptionData, index: VideoIndex, heads: HeadParameters,
                 n_candidates: int = 50, fusion=DEFAULT_FUSION) -> RetrievalResult:
    """Rank videos for one caption query."""
    if n_candidates < 1:
        raise ConfigError(f"n_candidates must be >= 1, got {n_candidates}")
    wv, wf, wp = _normalize_fusion(fusion)
    s_video = index.pooled @ l2_normalize(caption.sentence)
    order = _stage1_order(s_video)
    n = min(n_candidates, index.size)
    cand = order[:n]

    texts = TextBatch(sentences=caption.sentence[None], words=caption.words[None],
                      valid=np.asarray([caption.valid_words]))
    vids = VideoBatch(frames=index.frames[cand], patches=index.patches[cand])
    bundle = forward_batch(vids, texts, heads)
    s_frame, s_patch = bundle.s_frame[0], bundle.s_patch[0]
    fused = wv * s_video[cand] + wf * s_frame + wp * s_patch
    rerank = np.lexsort((cand, -fused))

    ranking = [
        RankedCandidate(index.video_ids[cand[i]], float(fused[i]), float(s_video[cand[i]]),
                        float(s_frame[i]), float(s_patch[i]))
        for i in rerank
    ]
    ranking += [
        RankedCandidate(index.video_ids[j], None, float(s_video[j]), None, None)
        for j in order[n:]
    ]
    return RetrievalResult(caption.caption_id, ranking, n)


def retrieve_v2t(video_position: int, corpus: Corpus, index: VideoIndex,
                 heads: HeadParameters, n_candidates: int = 50,
                 fusion=DEFAULT_FUSION) -> RetrievalResult:
    """Rank captions for one video query; mirror of the text-to-video path."""
    if n_candidates < 1:
        raise ConfigError(f"n_candidates must be >= 1, got {n_candidates}")
    if corpus.n_captions == 0:
        raise EmptyInputError("corpus has no captions to rank")
    wv, wf, wp = _normalize_fusion(fusion)
    sentences = np.stack([c.sentence for c in corpus.captions])
    s_video = l2_normalize(sentences, axis=-1) @ index.pooled[video_position]
    order = _stage1_order(s_video)
    n = min(n_candidates, corpus.n_captions)
    cand = order[:n]

    texts = TextBatch.from_corpus(corpus, cand)
    vids = VideoBatch(frames=index.frames[video_position][None],
                      patches=index.patches[video_position][None])
    bundle = forward_batch(vids, texts, heads)
    s_frame, s_patch = bundle.s_frame[:, 0], bundle.s_patch[:, 0]
    fused = wv * s_video[cand] + wf * s_frame + wp * s_patch
    rerank = np.lexsort((cand, -fused))

    ranking = [
        RankedCandidate(corpus.captions[cand[i]].caption_id, float(fused[i]),
                        float(s_video[cand[i]]), float(s_frame[i]), float(s_patch[i]))
        for i in rerank
    ]
    ranking += [
        RankedCandidate(corpus.captions[j].caption_id, None, float(s_video[j]), None, None)
        for j in order[n:]
    ]
    return RetrievalResult(index.video_ids[video_position], ranking, n)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    direction: str
    r1: float
    r5: float
    r10: float
    mdr: float
    mnr: float
    query_count: int

    @classmethod
    def from_ranks(cls, direction: str, ranks) -> "MetricsReport":
        ranks = np.asarray(list(ranks), dtype=np.int64)
        if ranks.size == 0:
            raise EmptyInputError("no queries to evaluate")
        ordered = np.sort(ranks)
        return cls(
            direction=direction,
            r1=100.0 * float(np.mean(ranks <= 1)),
            r5=100.0 * float(np.mean(ranks <= 5)),
            r10=100.0 * float(np.mean(ranks <= 10)),
            mdr=float(ordered[(ranks.size - 1) // 2]),  # lower median for even counts
            mnr=float(ranks.mean()),
            query_count=int(ranks.size),
        )

    def to_dict(self) -> dict:
        return {
            "direction": self.direction, "R@1": self.r1, "R@5": self.r5, "R@10": self.r10,
            "MdR": self.mdr, "MnR": self.mnr, "queries": self.query_count,
        }


def _fused_matrix(corpus: Corpus, index: VideoIndex, heads: HeadParameters,
                  fusion, chunk: int = 64) -> np.ndarray:
    """(n_captions, n_videos) fused scores for every pair, text-chunked."""
    wv, wf, wp = _normalize_fusion(fusion)
    vids = VideoBatch(frames=index.frames, patches=index.patches)
    out = np.empty((corpus.n_captions, index.size))
    for lo in range(0, corpus.n_captions, chunk):
        positions = range(lo, min(lo + chunk, corpus.n_captions))
        texts = TextBatch.from_corpus(corpus, positions)
        bundle = forward_batch(vids, texts, heads)
        out[lo:lo + chunk] = wv * bundle.s_video + wf * bundle.s_frame + wp * bundle.s_patch
    return out


def _rank_with_ties(scores: np.ndarray, true_pos: int) -> int:
    """Rank of ``true_pos`` under descending scores, ties to lower position."""
    s = scores[true_pos]
    better = int(np.sum(scores > s))
    tied_before = int(np.sum((scores == s) & (np.arange(scores.size) < true_pos)))
    return 1 + better + tied_before


def query_ranks(corpus: Corpus, heads: HeadParameters, direction: str = "t2v",
                n_candidates: int = 50, fusion=DEFAULT_FUSION) -> list[int]:
    """Ground-truth rank per query under two-stage retrieval.

    When N covers every candidate the fused matrix is computed in one batched
    sweep; otherwise each query runs the two-stage path individually. Both
    paths order identically.
    """
    index = build_index(corpus, heads)
    if direction not in ("t2v", "v2t"):
        raise ConfigError(f"direction must be 't2v' or 'v2t', got {direction!r}")
    ranks: list[int] = []
    if direction == "t2v":
        full = n_candidates >= index.size
        fused = _fused_matrix(corpus, index, heads, fusion) if full else None
        for i, cap in enumerate(corpus.captions):
            true_pos = corpus.video_pos[cap.video_id]
            if full:
                ranks.append(_rank_with_ties(fused[i], true_pos))
            else:
                result = retrieve_t2v(cap, index, heads, n_candidates, fusion)
                ranks.append(result.rank_of(cap.video_id))
    else:
        for v in corpus.videos:
            if not corpus.captions_by_video[v.video_id]:
                raise EmptyInputError(f"video {v.video_id} has no caption to serve as ground truth")
        full = n_candidates >= corpus.n_captions
        fused = _fused_matrix(corpus, index, heads, fusion) if full else None
        for j, v in enumerate(corpus.videos):
            if full:
                col = fused[:, j]
                best = min(_rank_with_ties(col, c) for c in corpus.captions_by_video[v.video_id])
                ranks.append(best)
            else:
                result = retrieve_v2t(j, corpus, index, heads, n_candidates, fusion)
                best = min(result.rank_of(corpus.captions[c].caption_id)
                           for c in corpus.captions_by_video[v.video_id])
                ranks.append(best)
    return ranks


def evaluate(corpus: Corpus, heads: HeadParameters, direction: str = "t2v",
             n_candidates: int = 50, fusion=DEFAULT_FUSION) -> MetricsReport:
    """Standard retrieval metrics: R@1/5/10 (percent), median and mean rank.

    Text-to-video treats each caption as a query whose ground truth is its
    video; video-to-text scores each video by the best rank among its
    captions.
    """
    return MetricsReport.from_ranks(
        direction, query_ranks(corpus, heads, direction, n_candidates, fusion))


def write_results_jsonl(results: list[RetrievalResult], path) -> None:
    """One JSON object per query: ranked candidate ids plus scores."""
    with open(Path(path), "w", encoding="utf-8") as fh:
        for res in results:
            fh.write(json.dumps({
                "query_id": res.query_id,
                "stage1_candidates": res.stage1_candidates,
                "ranked_ids": [c.candidate_id for c in res.ranking],
                "fused": [c.fused for c in res.ranking],
                "s_video": [c.s_video for c in res.ranking],
                "s_frame": [c.s_frame for c in res.ranking],
                "s_patch": [c.s_patch for c in res.ranking],
            }, sort_keys=True) + "\n")
