"""Text-conditioned multi-granularity alignment.

Produces three similarity matrices per batch:

* video level: cosine between the sentence embedding and the text-agnostic
  mean-pooled video embedding;
* frame level: cosine against a sentence-guided attention pool over frames,
  sharpened per text by a learned dynamic temperature;
* patch level: cosine against a word-guided aggregate of the most salient
  patches, using the top-k selected words of the caption.

Two implementations of the same math live here on purpose. The per-item
functions (:func:`pool_video` ... :func:`aggregate_patches`) are the plain
reference path used by tests and oracles; :func:`build_forward` assembles the
batched differentiation graph used for training and retrieval. The test
suite pins them against each other.

Selection is hard top-k. Gradients do not flow through the discrete index
choice itself; instead the saliency scores are reused downstream — selected
patch scores bias the word-patch attention logits, and selected word scores
gate the per-word average — so the scoring heads remain trainable. Both
reuses are exact no-ops at zero initialization (uniform gate, zero bias).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, EmptyInputError, ShapeError
from .heads import HeadParameters
from .store import Corpus
from .tensor import NORM_FLOOR, l2_normalize, softmax_temp, softplus, topk_indices

LEVELS = ("video", "frame", "patch")


# ---------------------------------------------------------------------------
# per-item reference operations


def pool_video(frames: np.ndarray) -> np.ndarray:
    """Mean over the frame axis of a (T, D) block."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInputError(f"pool_video expects a non-empty (T, D) block, got {frames.shape}")
    return frames.mean(axis=0)


def dynamic_temperature(text_feat: np.ndarray, heads: HeadParameters) -> float:
    """softplus(w . text + b) + epsilon; strictly greater than epsilon."""
    return float(softplus(float(heads.temp_w @ text_feat) + float(heads.temp_b))) + heads.epsilon


def aggregate_frames(frames: np.ndarray, text_feat: np.ndarray,
                     heads: HeadParameters) -> np.ndarray:
    """Convex combination of frames, weighted by sentence-frame attention."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInputError(f"aggregate_frames expects non-empty (T, D), got {frames.shape}")
    scores = frames @ text_feat
    weights = softmax_temp(scores, dynamic_temperature(text_feat, heads))
    return weights @ frames


def select_words(words: np.ndarray, valid: int, text_feat: np.ndarray,
                 heads: HeadParameters) -> tuple[np.ndarray, list[int], np.ndarray]:
    """Top-k salient words among the valid prefix.

    Returns (selected rows, ascending indices, their saliency scores); the
    count is min(k_w, valid).
    """
    words = np.asarray(words, dtype=np.float64)
    if valid < 1:
        raise EmptyInputError("select_words: caption has no valid words")
    if valid > words.shape[0]:
        raise ShapeError(f"select_words: valid={valid} exceeds word rows {words.shape[0]}")
    d = heads.dim
    scores = words[:valid] @ heads.word_w[:d] + float(text_feat @ heads.word_w[d:] + heads.word_b)
    k = min(heads.k_w, valid)
    idx = topk_indices(scores, k)
    return words[idx].copy(), idx, scores[idx].copy()


def select_patches(patches: np.ndarray, frames: np.ndarray, video_feat: np.ndarray,
                   heads: HeadParameters) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame top-k of projected patches.

    Each patch is fused with its frame through the projection head; the
    saliency score additionally folds in the pooled video feature. Returns
    (projected selected patches (T, k_p, D), indices (T, k_p), scores).
    """
    patches = np.asarray(patches, dtype=np.float64)
    frames = np.asarray(frames, dtype=np.float64)
    t, m, d = patches.shape
    if heads.k_p > m:
        raise ConfigError(f"k_p={heads.k_p} exceeds patches per frame ({m})")
    proj = patches @ heads.patch_proj_w[:d] + (frames @ heads.patch_proj_w[d:])[:, None, :]
    proj = proj + heads.patch_proj_b
    scores = proj @ heads.patch_score_w[:d] + float(
        video_feat @ heads.patch_score_w[d:] + heads.patch_score_b
    )
    idx = np.empty((t, heads.k_p), dtype=np.intp)
    for n in range(t):
        idx[n] = topk_indices(scores[n], heads.k_p)
    sel = np.take_along_axis(proj, idx[:, :, None], axis=1)
    sel_scores = np.take_along_axis(scores, idx, axis=1)
    return sel, idx, sel_scores


def aggregate_patches(selected_patches: np.ndarray, selected_words: np.ndarray,
                      heads: HeadParameters, *, patch_scores: np.ndarray | None = None,
                      word_scores: np.ndarray | None = None) -> np.ndarray:
    """Word-guided aggregate of the selected patches.

    For every selected word, attention over all T*k_p selected patches with
    that word's dynamic temperature (per-patch saliency scores, when given,
    bias the logits); the per-word vectors are then averaged under the word
    gate (softmax of word saliency scores; uniform when absent).
    """
    sel = np.asarray(selected_patches, dtype=np.float64).reshape(-1, heads.dim)
    words = np.atleast_2d(np.asarray(selected_words, dtype=np.float64))
    if words.shape[0] == 0:
        raise EmptyInputError("aggregate_patches: no selected words")
    n = sel.shape[0]
    bias = np.zeros(n) if patch_scores is None else np.asarray(patch_scores, dtype=np.float64).reshape(n)
    per_word = np.empty((words.shape[0], heads.dim))
    for l, w in enumerate(words):
        logits = sel @ w + bias
        attn = softmax_temp(logits, dynamic_temperature(w, heads))
        per_word[l] = attn @ sel
    if word_scores is None:
        gate = np.full(words.shape[0], 1.0 / words.shape[0])
    else:
        gate = softmax_temp(np.asarray(word_scores, dtype=np.float64).reshape(-1), 1.0)
    return gate @ per_word


# ---------------------------------------------------------------------------
# batched graph


@dataclass
class VideoBatch:
    frames: np.ndarray   # (B, T, D)
    patches: np.ndarray  # (B, T, M, D)

    @classmethod
    def from_corpus(cls, corpus: Corpus, positions) -> "VideoBatch":
        return cls(
            frames=np.stack([corpus.videos[i].frames for i in positions]),
            patches=np.stack([corpus.videos[i].patches for i in positions]),
        )

    @property
    def size(self) -> int:
        return self.frames.shape[0]


@dataclass
class TextBatch:
    sentences: np.ndarray  # (B, D)
    words: np.ndarray      # (B, L, D)
    valid: np.ndarray      # (B,) int

    @classmethod
    def from_corpus(cls, corpus: Corpus, positions) -> "TextBatch":
        caps = [corpus.captions[i] for i in positions]
        return cls(
            sentences=np.stack([c.sentence for c in caps]),
            words=np.stack([c.words for c in caps]),
            valid=np.asarray([c.valid_words for c in caps], dtype=np.int64),
        )

    @property
    def size(self) -> int:
        return self.sentences.shape[0]


@dataclass
class SimilarityBundle:
    s_video: np.ndarray | None = None
    s_frame: np.ndarray | None = None
    s_patch: np.ndarray | None = None

    def level(self, name: str) -> np.ndarray:
        return {"video": self.s_video, "frame": self.s_frame, "patch": self.s_patch}[name]


@dataclass
class ForwardGraph:
    sims: dict          # level -> Node (Bt, Bv)
    feats: dict         # level -> (video Node (B, D), text Node (B, D)); square batches only
    word_indices: np.ndarray | None = None   # (Bt, k_w) selected word slots
    patch_indices: np.ndarray | None = None  # (Bv, T, k_p) selected patch slots


def head_nodes(heads: HeadParameters, *, trainable: bool = True) -> dict[str, ad.Node]:
    return {name: ad.Node(arr, trainable=trainable) for name, arr in heads.param_items()}


def _word_selection(score_values: np.ndarray, valid: np.ndarray,
                    k_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (B, k_w) and keep-mask from per-word score values.

    Row i selects min(k_w, valid_i) words among its valid prefix, ascending,
    ties to the lower index; surplus slots repeat index 0 and are masked out.
    """
    b, _ = score_values.shape
    idx = np.zeros((b, k_w), dtype=np.intp)
    mask = np.zeros((b, k_w), dtype=bool)
    for i in range(b):
        v = int(valid[i])
        k = min(k_w, v)
        chosen = topk_indices(score_values[i, :v], k)
        idx[i, :k] = chosen
        mask[i, :k] = True
    return idx, mask


def _patch_selection(score_values: np.ndarray, k_p: int) -> np.ndarray:
    """(B, T, k_p) per-frame top-k indices, ascending, stable ties."""
    order = np.argsort(-score_values, axis=-1, kind="stable")[..., :k_p]
    return np.sort(order, axis=-1)


def build_forward(videos: VideoBatch, texts: TextBatch, params: dict[str, ad.Node],
                  heads: HeadParameters, *, levels=LEVELS,
                  pair_feats: bool = False) -> ForwardGraph:
    """Assemble the differentiable forward pass for a batch.

    ``pair_feats`` additionally exposes, per level, the (video, text) unit
    feature matrices of matched pairs (requires a square batch); these feed
    the correlation regularizer.
    """
    bt, bv = texts.size, videos.size
    if bt == 0 or bv == 0:
        raise EmptyInputError("build_forward: empty batch")
    t, m = videos.frames.shape[1], videos.patches.shape[2]
    if heads.k_p > m:
        raise ConfigError(f"k_p={heads.k_p} exceeds patches per frame ({m})")
    if np.any(texts.valid < 1):
        raise EmptyInputError("build_forward: a caption has no valid words")
    if pair_feats and bt != bv:
        raise ShapeError(f"pair features need a square batch, got {bt}x{bv}")

    eps = heads.epsilon
    frames = ad.constant(videos.frames)
    sent = ad.constant(texts.sentences)
    sent_n = ad.unit_last(sent, NORM_FLOOR)

    sims: dict[str, ad.Node] = {}
    feats: dict[str, tuple[ad.Node, ad.Node]] = {}
    word_idx: np.ndarray | None = None
    patch_idx: np.ndarray | None = None

    vvid = ad.mean_axis(frames, axis=1)  # (Bv, T, D) -> (Bv, D)
    vvid_n = ad.unit_last(vvid, NORM_FLOOR)

    if "video" in levels:
        sims["video"] = ad.einsum2("id,jd->ij", sent_n, vvid_n)
        if pair_feats:
            feats["video"] = (vvid_n, sent_n)

    if "frame" in levels:
        tau = ad.softplus(ad.einsum2("id,d->i", sent, params["temp_w"]) + params["temp_b"]) + eps
        logits = ad.einsum2("id,jtd->ijt", sent, frames)
        attn = ad.softmax_last(logits / ad.reshape(tau, (bt, 1, 1)))
        vfr = ad.einsum2("ijt,jtd->ijd", attn, frames)
        vfr_n = ad.unit_last(vfr, NORM_FLOOR)
        sims["frame"] = ad.einsum2("id,ijd->ij", sent_n, vfr_n)
        if pair_feats:
            feats["frame"] = (ad.matched_rows(vfr_n), sent_n)

    if "patch" in levels:
        d = heads.dim
        words = ad.constant(texts.words)
        patches = ad.constant(videos.patches)

        # word saliency over the valid prefix; the sentence half shifts every
        # word of a caption equally, so it cannot affect ranking or gating
        u_words = ad.einsum2("ild,d->il", words, _slice0(params["word_w"], 0, d)) + ad.reshape(
            ad.einsum2("id,d->i", sent, _slice0(params["word_w"], d, 2 * d)) + params["word_b"], (bt, 1)
        )
        idx_w, mask_w = _word_selection(u_words.value, texts.valid, heads.k_w)
        word_idx = idx_w
        sel_words = ad.gather_along(words, np.broadcast_to(idx_w[:, :, None], (bt, heads.k_w, d)), axis=1)
        u_sel_words = ad.gather_along(u_words, idx_w, axis=1)
        gate = ad.softmax_last(u_sel_words, mask=mask_w)  # (Bt, k_w)

        # project patches with their frame, score against the pooled video
        proj = ad.einsum2("jtmd,de->jtme", patches, _slice0(params["patch_proj_w"], 0, d))
        proj = proj + ad.reshape(
            ad.einsum2("jtd,de->jte", frames, _slice0(params["patch_proj_w"], d, 2 * d)),
            (bv, t, 1, d),
        )
        proj = proj + params["patch_proj_b"]
        u_patch = ad.einsum2("jtme,e->jtm", proj, _slice0(params["patch_score_w"], 0, d))
        u_patch = u_patch + ad.reshape(
            ad.einsum2("jd,d->j", vvid, _slice0(params["patch_score_w"], d, 2 * d))
            + params["patch_score_b"],
            (bv, 1, 1),
        )
        idx_p = _patch_selection(u_patch.value, heads.k_p)
        patch_idx = idx_p
        sel_patches = ad.gather_along(
            proj, np.broadcast_to(idx_p[:, :, :, None], (bv, t, heads.k_p, d)), axis=2
        )
        u_sel_patches = ad.gather_along(u_patch, idx_p, axis=2)
        n_sel = t * heads.k_p
        flat_patches = ad.reshape(sel_patches, (bv, n_sel, d))
        flat_scores = ad.reshape(u_sel_patches, (bv, n_sel))

        tau_w = ad.softplus(
            ad.einsum2("ild,d->il", sel_words, params["temp_w"]) + params["temp_b"]
        ) + eps
        logits = ad.einsum2("ild,jnd->iljn", sel_words, flat_patches)
        logits = logits + ad.reshape(flat_scores, (1, 1, bv, n_sel))
        attn = ad.softmax_last(logits / ad.reshape(tau_w, (bt, heads.k_w, 1, 1)))
        per_word = ad.einsum2("iljn,jnd->iljd", attn, flat_patches)
        vpt = ad.einsum2("il,iljd->ijd", gate, per_word)
        vpt_n = ad.unit_last(vpt, NORM_FLOOR)
        sims["patch"] = ad.einsum2("id,ijd->ij", sent_n, vpt_n)
        if pair_feats:
            feats["patch"] = (ad.matched_rows(vpt_n), sent_n)

    return ForwardGraph(sims=sims, feats=feats, word_indices=word_idx, patch_indices=patch_idx)


def _slice0(node: ad.Node, lo: int, hi: int) -> ad.Node:
    """Slice along axis 0 (the concat boundary of the fused-input heads),
    routing gradient back into the full parameter."""
    out = ad.Node(node.value[lo:hi].copy(), parents=(node,))

    def bw(g):
        buf = np.zeros_like(node.value)
        buf[lo:hi] = g
        node._accumulate(buf)

    out.backward_fn = bw
    return out


def forward_batch(videos: VideoBatch, texts: TextBatch, heads: HeadParameters,
                  *, levels=LEVELS) -> SimilarityBundle:
    """Value-level forward pass; entries are cosines of unit vectors."""
    heads.validate()
    graph = build_forward(videos, texts, head_nodes(heads, trainable=False), heads, levels=levels)
    bundle = SimilarityBundle(
        s_video=graph.sims["video"].value if "video" in graph.sims else None,
        s_frame=graph.sims["frame"].value if "frame" in graph.sims else None,
        s_patch=graph.sims["patch"].value if "patch" in graph.sims else None,
    )
    for name in levels:
        mat = bundle.level(name)
        assert mat is None or np.all(np.abs(mat) <= 1.0 + 1e-9), f"{name} similarity out of range"
    return bundle


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two vectors with the engine's norm floor."""
    return float(l2_normalize(a) @ l2_normalize(b))
