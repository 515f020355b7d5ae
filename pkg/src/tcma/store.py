"""On-disk corpus representation: binary embedding container plus JSON manifest.

Binary container layout (little-endian throughout):

    bytes 0-3    magic ``b"TCMA"``
    bytes 4-7    format_version (u32): 1 = float32 payload, 2 = float64 payload
    bytes 8-11   rank (u32), 1..4
    then         rank extents (u32 each)
    then         prod(extents) IEEE-754 values (4 bytes each for v1, 8 for v2)

Corpus embeddings are stored as version 1 (32-bit, matching typical encoder
dumps) and widened to float64 on load; version 2 exists so checkpoints can
round-trip 64-bit training state exactly.

The manifest is a single canonical JSON document (sorted keys, no
whitespace). It carries a sha256 per referenced file plus a self-digest over
its own canonical content, so any byte-level corruption of either the
manifest or an embedding file is rejected at load time with a diagnostic.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusFormatError, CorpusValidationError, DomainError, ShapeError
from .tensor import MAX_RANK

MAGIC = b"TCMA"
FORMAT_F32 = 1
FORMAT_F64 = 2

_DIGEST_KEY = "manifest_sha256"


# ---------------------------------------------------------------------------
# binary container


def write_embeddings(tensor, path, *, format_version: int = FORMAT_F32) -> None:
    """Serialize one tensor; float64 values are narrowed to float32 for v1
    (round-to-nearest-even). Non-finite payloads are refused."""
    arr = np.ascontiguousarray(np.asarray(tensor, dtype=np.float64))
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ShapeError(f"write_embeddings: rank must be 1..{MAX_RANK}, got {arr.ndim}")
    if any(e <= 0 for e in arr.shape):
        raise ShapeError(f"write_embeddings: extents must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"write_embeddings: refusing non-finite payload for {path}")
    if format_version == FORMAT_F32:
        payload = arr.astype("<f4").tobytes()
    elif format_version == FORMAT_F64:
        payload = arr.astype("<f8").tobytes()
    else:
        raise DomainError(f"write_embeddings: unknown format version {format_version}")
    header = MAGIC + struct.pack("<II", format_version, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_embeddings(path, *, expect_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Load one tensor, widened to float64; every structural defect is a
    :class:`CorpusFormatError` naming the file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorpusFormatError(f"{path}: cannot read embedding file ({exc})") from exc
    if len(raw) < 12:
        raise CorpusFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version not in (FORMAT_F32, FORMAT_F64):
        raise CorpusFormatError(f"{path}: unsupported format version {version}")
    if not 1 <= rank <= MAX_RANK:
        raise CorpusFormatError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
    header_len = 12 + 4 * rank
    if len(raw) < header_len:
        raise CorpusFormatError(f"{path}: truncated extents")
    extents = struct.unpack_from(f"<{rank}I", raw, 12)
    if any(e == 0 for e in extents):
        raise CorpusFormatError(f"{path}: zero extent in shape {extents}")
    count = 1
    for e in extents:
        count *= e
    itemsize = 4 if version == FORMAT_F32 else 8
    expected = header_len + itemsize * count
    if len(raw) != expected:
        raise CorpusFormatError(
            f"{path}: payload length mismatch (file {len(raw)} bytes, "
            f"header declares {expected})"
        )
    dtype = "<f4" if version == FORMAT_F32 else "<f8"
    values = np.frombuffer(raw, dtype=dtype, offset=header_len).astype(np.float64)
    arr = values.reshape(extents)
    if not np.all(np.isfinite(arr)):
        raise CorpusFormatError(f"{path}: payload contains non-finite values")
    if expect_shape is not None and tuple(extents) != tuple(expect_shape):
        raise CorpusValidationError(
            f"{path}: shape {tuple(extents)} does not match declared {tuple(expect_shape)}"
        )
    return arr


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# manifest schema


@dataclass
class VideoEntry:
    video_id: str
    frame_file: str
    patch_file: str
    category: str | None = None


@dataclass
class CaptionEntry:
    caption_id: str
    video_id: str
    sentence_file: str
    word_file: str
    valid_words: int
    text: str | None = None


@dataclass
class CorpusManifest:
    version: int
    dim: int
    frames_per_video: int
    patches_per_frame: int
    max_words: int
    videos: list[VideoEntry] = field(default_factory=list)
    captions: list[CaptionEntry] = field(default_factory=list)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise CorpusValidationError(msg)


_VIDEO_KEYS = {"video_id", "frame_file", "patch_file", "category"}
_CAPTION_KEYS = {"caption_id", "video_id", "sentence_file", "word_file", "valid_words", "text"}
_TOP_KEYS = {
    "version", "dim", "frames_per_video", "patches_per_frame", "max_words",
    "videos", "captions", "file_digests", _DIGEST_KEY,
}


def manifest_to_dict(manifest: CorpusManifest, file_digests: dict[str, str]) -> dict:
    def video_obj(v: VideoEntry) -> dict:
        obj = {"video_id": v.video_id, "frame_file": v.frame_file, "patch_file": v.patch_file}
        if v.category is not None:
            obj["category"] = v.category
        return obj

    def caption_obj(c: CaptionEntry) -> dict:
        obj = {
            "caption_id": c.caption_id,
            "video_id": c.video_id,
            "sentence_file": c.sentence_file,
            "word_file": c.word_file,
            "valid_words": c.valid_words,
        }
        if c.text is not None:
            obj["text"] = c.text
        return obj

    return {
        "version": manifest.version,
        "dim": manifest.dim,
        "frames_per_video": manifest.frames_per_video,
        "patches_per_frame": manifest.patches_per_frame,
        "max_words": manifest.max_words,
        "videos": [video_obj(v) for v in manifest.videos],
        "captions": [caption_obj(c) for c in manifest.captions],
        "file_digests": dict(sorted(file_digests.items())),
    }


def save_manifest(manifest: CorpusManifest, path, file_digests: dict[str, str]) -> None:
    """Write the manifest atomically (temp file + rename), digest included."""
    obj = manifest_to_dict(manifest, file_digests)
    obj[_DIGEST_KEY] = hashlib.sha256(
        canonical_json({k: v for k, v in obj.items() if k != _DIGEST_KEY}).encode("ascii")
    ).hexdigest()
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(canonical_json(obj), encoding="utf-8")
    os.replace(tmp, path)


def _parse_str(obj: dict, key: str, where: str) -> str:
    _require(key in obj, f"{where}: missing required key {key!r}")
    val = obj[key]
    _require(isinstance(val, str) and val != "", f"{where}: {key!r} must be a non-empty string")
    return val


def _parse_int(obj: dict, key: str, where: str) -> int:
    _require(key in obj, f"{where}: missing required key {key!r}")
    val = obj[key]
    _require(isinstance(val, int) and not isinstance(val, bool), f"{where}: {key!r} must be an integer")
    return val


def parse_manifest(text: str) -> tuple[CorpusManifest, dict[str, str]]:
    """Parse and strictly validate manifest JSON, including the self-digest."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"manifest: invalid JSON ({exc})") from exc
    _require(isinstance(obj, dict), "manifest: top level must be an object")
    unknown = set(obj) - _TOP_KEYS
    _require(not unknown, f"manifest: unknown keys {sorted(unknown)}")
    _require(_DIGEST_KEY in obj, f"manifest: missing {_DIGEST_KEY}")
    stored = obj[_DIGEST_KEY]
    _require(isinstance(stored, str), f"manifest: {_DIGEST_KEY} must be a string")
    computed = hashlib.sha256(
        canonical_json({k: v for k, v in obj.items() if k != _DIGEST_KEY}).encode("ascii")
    ).hexdigest()
    _require(stored == computed, "manifest: self-digest mismatch (content corrupted)")

    where = "manifest"
    version = _parse_int(obj, "version", where)
    dim = _parse_int(obj, "dim", where)
    t = _parse_int(obj, "frames_per_video", where)
    m = _parse_int(obj, "patches_per_frame", where)
    l = _parse_int(obj, "max_words", where)
    for name, val in (("dim", dim), ("frames_per_video", t), ("patches_per_frame", m), ("max_words", l)):
        _require(val > 0, f"manifest: {name} must be positive, got {val}")
    _require(isinstance(obj.get("videos"), list), "manifest: 'videos' must be a list")
    _require(isinstance(obj.get("captions"), list), "manifest: 'captions' must be a list")
    digests = obj.get("file_digests")
    _require(isinstance(digests, dict), "manifest: 'file_digests' must be an object")
    for k, v in digests.items():
        _require(isinstance(k, str) and isinstance(v, str), "manifest: file_digests entries must be strings")

    videos = []
    seen_vid = set()
    for i, v in enumerate(obj["videos"]):
        where = f"manifest videos[{i}]"
        _require(isinstance(v, dict), f"{where}: must be an object")
        _require(not set(v) - _VIDEO_KEYS, f"{where}: unknown keys {sorted(set(v) - _VIDEO_KEYS)}")
        vid = _parse_str(v, "video_id", where)
        _require(vid not in seen_vid, f"{where}: duplicate video_id {vid!r}")
        seen_vid.add(vid)
        cat = v.get("category")
        _require(cat is None or isinstance(cat, str), f"{where}: category must be a string")
        videos.append(VideoEntry(vid, _parse_str(v, "frame_file", where),
                                 _parse_str(v, "patch_file", where), cat))

    captions = []
    seen_cap = set()
    for i, c in enumerate(obj["captions"]):
        where = f"manifest captions[{i}]"
        _require(isinstance(c, dict), f"{where}: must be an object")
        _require(not set(c) - _CAPTION_KEYS, f"{where}: unknown keys {sorted(set(c) - _CAPTION_KEYS)}")
        cid = _parse_str(c, "caption_id", where)
        _require(cid not in seen_cap, f"{where}: duplicate caption_id {cid!r}")
        seen_cap.add(cid)
        vid = _parse_str(c, "video_id", where)
        _require(vid in seen_vid, f"{where}: video_id {vid!r} does not reference any video")
        valid = _parse_int(c, "valid_words", where)
        _require(1 <= valid <= l, f"{where}: valid_words {valid} outside 1..{l}")
        text_val = c.get("text")
        _require(text_val is None or isinstance(text_val, str), f"{where}: text must be a string")
        captions.append(CaptionEntry(cid, vid, _parse_str(c, "sentence_file", where),
                                     _parse_str(c, "word_file", where), valid, text_val))

    manifest = CorpusManifest(version, dim, t, m, l, videos, captions)
    return manifest, dict(digests)


# ---------------------------------------------------------------------------
# in-memory corpus


@dataclass
class VideoData:
    video_id: str
    frames: np.ndarray   # (T, D)
    patches: np.ndarray  # (T, M, D)
    category: str | None = None


@dataclass
class CaptionData:
    caption_id: str
    video_id: str
    sentence: np.ndarray  # (D,)
    words: np.ndarray     # (L, D); rows beyond valid_words are ignored
    valid_words: int
    text: str | None = None


@dataclass
class Corpus:
    dim: int
    frames_per_video: int
    patches_per_frame: int
    max_words: int
    videos: list[VideoData]
    captions: list[CaptionData]

    def __post_init__(self):
        self.video_pos = {v.video_id: i for i, v in enumerate(self.videos)}
        self.captions_by_video: dict[str, list[int]] = {v.video_id: [] for v in self.videos}
        for i, c in enumerate(self.captions):
            self.captions_by_video[c.video_id].append(i)

    @property
    def n_videos(self) -> int:
        return len(self.videos)

    @property
    def n_captions(self) -> int:
        return len(self.captions)

    def subset(self, video_positions) -> "Corpus":
        """Corpus restricted to the given video positions (with their captions),
        preserving order."""
        vids = [self.videos[i] for i in video_positions]
        keep = {v.video_id for v in vids}
        caps = [c for c in self.captions if c.video_id in keep]
        return Corpus(self.dim, self.frames_per_video, self.patches_per_frame,
                      self.max_words, vids, caps)


def load_corpus(manifest_path, *, threads: int | None = None) -> Corpus:
    """Load and fully validate a corpus.

    Order of checks per file: existence, recorded sha256, container parse,
    finite payload, shape against the manifest. Every failure names the
    offending entry; nothing is returned partially loaded.
    """
    manifest_path = Path(manifest_path)
    try:
        raw = manifest_path.read_bytes()
    except OSError as exc:
        raise CorpusFormatError(f"{manifest_path}: cannot read manifest ({exc})") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusFormatError(f"{manifest_path}: manifest is not valid UTF-8 ({exc})") from exc
    manifest, digests = parse_manifest(text)

    base = manifest_path.parent
    d, t, m, l = manifest.dim, manifest.frames_per_video, manifest.patches_per_frame, manifest.max_words

    jobs: list[tuple[str, tuple[int, ...]]] = []
    for v in manifest.videos:
        jobs.append((v.frame_file, (t, d)))
        jobs.append((v.patch_file, (t, m, d)))
    for c in manifest.captions:
        jobs.append((c.sentence_file, (d,)))
        jobs.append((c.word_file, (l, d)))

    referenced = {rel for rel, _ in jobs}
    extra = set(digests) - referenced
    if extra:
        raise CorpusValidationError(f"manifest: file_digests lists unreferenced files {sorted(extra)[:3]}")

    def load_one(job: tuple[str, tuple[int, ...]]) -> np.ndarray:
        rel, shape = job
        path = base / rel
        if not path.is_file():
            raise CorpusValidationError(f"corpus file missing: {path}")
        if rel not in digests:
            raise CorpusValidationError(f"manifest: no digest recorded for {rel}")
        actual = file_sha256(path)
        if actual != digests[rel]:
            raise CorpusValidationError(f"{path}: sha256 mismatch (file corrupted or replaced)")
        return read_embeddings(path, expect_shape=shape)

    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            arrays = list(pool.map(load_one, jobs))
    else:
        arrays = [load_one(j) for j in jobs]

    videos: list[VideoData] = []
    captions: list[CaptionData] = []
    k = 0
    for v in manifest.videos:
        videos.append(VideoData(v.video_id, arrays[k], arrays[k + 1], v.category))
        k += 2
    for c in manifest.captions:
        captions.append(CaptionData(c.caption_id, c.video_id, arrays[k], arrays[k + 1],
                                    c.valid_words, c.text))
        k += 2
    return Corpus(d, t, m, l, videos, captions)
