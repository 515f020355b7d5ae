"""Binary container layout, manifest validation, and loader diagnostics."""

import json
import struct

import numpy as np
import pytest

from conftest import write_corpus
from tcma.errors import (CorpusError, CorpusFormatError, CorpusValidationError,
                         DomainError, ShapeError)
from tcma.store import (FORMAT_F64, MAGIC, file_sha256, load_corpus,
                        read_embeddings, write_embeddings)


class TestContainer:
    @pytest.mark.parametrize("shape", [(5,), (3, 4), (2, 3, 4), (2, 2, 3, 4)])
    def test_roundtrip_after_narrowing(self, tmp_path, shape):
        rs = np.random.default_rng(hash(shape) % 2 ** 32)
        arr = rs.normal(size=shape)
        path = tmp_path / "x.tcma"
        write_embeddings(arr, path)
        out = read_embeddings(path)
        np.testing.assert_array_equal(out, arr.astype(np.float32).astype(np.float64))

    def test_f64_roundtrip_bit_exact(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(4, 3))
        path = tmp_path / "x64.tcma"
        write_embeddings(arr, path, format_version=FORMAT_F64)
        np.testing.assert_array_equal(read_embeddings(path), arr)

    def test_file_size_matches_header_spec(self, tmp_path):
        path = tmp_path / "x.tcma"
        write_embeddings(np.arange(6.0).reshape(2, 3), path)
        # magic + version + rank + 2 extents + 6 float32 values
        assert path.stat().st_size == 4 + 4 + 4 + 8 + 24

    def test_nan_payload_refused(self, tmp_path):
        arr = np.ones((2, 2))
        arr[0, 0] = np.nan
        with pytest.raises(DomainError):
            write_embeddings(arr, tmp_path / "bad.tcma")

    def test_rank_limits(self, tmp_path):
        with pytest.raises(ShapeError):
            write_embeddings(np.ones((2, 2, 2, 2, 2)), tmp_path / "r5.tcma")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.tcma"
        write_embeddings(np.ones(3), path)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(raw)
        with pytest.raises(CorpusFormatError, match="magic"):
            read_embeddings(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "x.tcma"
        write_embeddings(np.ones(3), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 9)
        path.write_bytes(raw)
        with pytest.raises(CorpusFormatError, match="version"):
            read_embeddings(path)

    def test_truncated_and_length_mismatch(self, tmp_path):
        path = tmp_path / "x.tcma"
        write_embeddings(np.ones((2, 3)), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:8])
        with pytest.raises(CorpusFormatError, match="truncated"):
            read_embeddings(path)
        path.write_bytes(raw + b"\x00\x00\x00\x00")
        with pytest.raises(CorpusFormatError, match="length"):
            read_embeddings(path)

    def test_nonfinite_payload_rejected_on_read(self, tmp_path):
        path = tmp_path / "x.tcma"
        write_embeddings(np.ones(2), path)
        raw = bytearray(path.read_bytes())
        raw[-4:] = struct.pack("<f", float("inf"))
        path.write_bytes(raw)
        with pytest.raises(CorpusFormatError, match="non-finite"):
            read_embeddings(path)

    def test_shape_check_against_expectation(self, tmp_path):
        path = tmp_path / "x.tcma"
        write_embeddings(np.ones((2, 3)), path)
        with pytest.raises(CorpusValidationError, match="shape"):
            read_embeddings(path, expect_shape=(3, 2))

    def test_every_header_byte_corruption_rejected(self, tmp_path):
        """Single-field fuzz over the full header: magic, version, rank, extents."""
        path = tmp_path / "x.tcma"
        write_embeddings(np.arange(12.0).reshape(3, 4), path)
        pristine = path.read_bytes()
        header_len = 12 + 2 * 4
        for offset in range(header_len):
            for delta in (1, 0x80, 0xFF):
                raw = bytearray(pristine)
                raw[offset] = (raw[offset] + delta) % 256
                if bytes(raw) == pristine:
                    continue
                path.write_bytes(bytes(raw))
                with pytest.raises(CorpusError):
                    read_embeddings(path, expect_shape=(3, 4))
        path.write_bytes(pristine)
        read_embeddings(path, expect_shape=(3, 4))


class TestCorpusLoad:
    def test_minimal_roundtrip(self, tiny_corpus):
        corpus = load_corpus(tiny_corpus)
        assert corpus.n_videos == 1 and corpus.n_captions == 1
        assert corpus.videos[0].frames.shape == (2, 4)
        assert corpus.videos[0].patches.shape == (2, 2, 4)
        assert corpus.captions[0].valid_words == 2
        assert corpus.captions[0].text == "a tiny clip"
        # loaded values equal the written float32 narrowing of the originals
        np.testing.assert_array_equal(
            corpus.captions[0].sentence,
            np.array([0.5, 0.5, 0.5, 0.5], dtype=np.float32).astype(np.float64))

    def test_threaded_load_matches(self, tiny_corpus):
        a = load_corpus(tiny_corpus)
        b = load_corpus(tiny_corpus, threads=4)
        np.testing.assert_array_equal(a.videos[0].patches, b.videos[0].patches)

    def test_missing_file_names_path(self, tiny_corpus):
        victim = tiny_corpus.parent / "embeddings" / "vid0_frames.tcma"
        victim.unlink()
        with pytest.raises(CorpusValidationError, match="vid0_frames.tcma"):
            load_corpus(tiny_corpus)

    def test_corrupted_magic_no_partial_load(self, tiny_corpus):
        victim = tiny_corpus.parent / "embeddings" / "vid0_patches.tcma"
        raw = bytearray(victim.read_bytes())
        raw[0] ^= 0xFF
        victim.write_bytes(raw)
        with pytest.raises(CorpusError):
            load_corpus(tiny_corpus)

    def test_digest_mismatch_detected(self, tiny_corpus):
        victim = tiny_corpus.parent / "embeddings" / "vid0_c0_words.tcma"
        raw = bytearray(victim.read_bytes())
        raw[-1] ^= 0x01  # payload-only corruption keeps header fully valid
        victim.write_bytes(raw)
        with pytest.raises(CorpusValidationError, match="sha256"):
            load_corpus(tiny_corpus)

    def test_manifest_self_digest(self, tiny_corpus):
        text = tiny_corpus.read_text(encoding="utf-8")
        # flip the valid_words count: syntactically fine, semantically caught
        assert '"valid_words":2' in text
        tiny_corpus.write_text(text.replace('"valid_words":2', '"valid_words":1'),
                               encoding="utf-8")
        with pytest.raises(CorpusValidationError, match="self-digest"):
            load_corpus(tiny_corpus)

    def test_dangling_video_id(self, tmp_path):
        frames = np.ones((2, 4))
        patches = np.ones((2, 2, 4))
        with pytest.raises(CorpusValidationError, match="does not reference"):
            write_corpus(tmp_path, 4, 2, 2, 3, {"v0": (frames, patches)},
                         [{"caption_id": "c0", "video_id": "GHOST",
                           "sentence": np.ones(4), "words": np.ones((3, 4)),
                           "valid_words": 1}])
            load_corpus(tmp_path / "manifest.json")

    def test_shape_mismatch_against_manifest(self, tmp_path):
        manifest = write_corpus(
            tmp_path, 4, 2, 2, 3,
            {"v0": (np.ones((2, 4)), np.ones((2, 2, 4)))},
            [{"caption_id": "c0", "video_id": "v0", "sentence": np.ones(4),
              "words": np.ones((3, 4)), "valid_words": 1}])
        # swap in a wrong-shape frames file and fix its digest so only the
        # shape check can complain
        victim = tmp_path / "embeddings" / "v0_frames.tcma"
        write_embeddings(np.ones((3, 4)), victim)
        obj = json.loads(manifest.read_text(encoding="utf-8"))
        obj["file_digests"]["embeddings/v0_frames.tcma"] = file_sha256(victim)
        from tcma.store import canonical_json, _DIGEST_KEY
        import hashlib
        obj.pop(_DIGEST_KEY)
        obj[_DIGEST_KEY] = hashlib.sha256(canonical_json(obj).encode()).hexdigest()
        manifest.write_text(canonical_json(obj), encoding="utf-8")
        with pytest.raises(CorpusValidationError, match="shape"):
            load_corpus(manifest)

    def test_invalid_json_rejected(self, tiny_corpus):
        tiny_corpus.write_text("{not json", encoding="utf-8")
        with pytest.raises(CorpusFormatError, match="JSON"):
            load_corpus(tiny_corpus)

    def test_subset_keeps_captions(self, tmp_path):
        from conftest import make_planted_corpus
        corpus = load_corpus(make_planted_corpus(tmp_path, n_videos=4, captions_per_video=2))
        sub = corpus.subset([1, 3])
        assert [v.video_id for v in sub.videos] == ["v001", "v003"]
        assert sub.n_captions == 4
        assert all(c.video_id in ("v001", "v003") for c in sub.captions)

    def test_captionless_video_tolerated_on_load(self, tmp_path):
        # a video without captions loads fine; only v2t evaluation minds
        frames, patches = np.ones((2, 4)), np.ones((2, 2, 4))
        manifest = write_corpus(tmp_path, 4, 2, 2, 3,
                                {"v0": (frames, patches), "v1": (frames * 0.5, patches)},
                                [{"caption_id": "c0", "video_id": "v0",
                                  "sentence": np.ones(4), "words": np.ones((3, 4)),
                                  "valid_words": 2}])
        corpus = load_corpus(manifest)
        assert corpus.captions_by_video["v1"] == []


def test_magic_constant():
    assert MAGIC == b"TCMA"
