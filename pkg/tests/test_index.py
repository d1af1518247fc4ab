import struct

import numpy as np
import pytest

from qdc.encoder import encode, init_params, tokenize
from qdc.errors import (
    CorruptIndexError,
    DimMismatchError,
    DuplicateDocIdError,
    EmptyCorpusError,
    ZeroVectorError,
)
from qdc.index import (
    CorpusIndex,
    DocRecord,
    build_index,
    doc_encoding_text,
    load_index,
    save_index,
    search_topk,
    search_topk_batch,
)

VOCAB, DIM = 64, 8


def _params(seed=0):
    return init_params(VOCAB, DIM, 0.5, np.random.default_rng(seed))


def _random_corpus(rng, n, prefix="d"):
    docs = []
    for i in range(n):
        words = " ".join(
            f"w{int(rng.integers(0, 400))}" for _ in range(int(rng.integers(3, 12)))
        )
        docs.append(DocRecord(doc_id=f"{prefix}{i:04d}", title="", text=words))
    return docs


def _brute_force(index, q, k):
    rows = index.rows.astype(np.float64)
    qn = q / np.linalg.norm(q)
    scores = rows @ qn / np.linalg.norm(rows, axis=1)
    ranked = sorted(
        zip(index.doc_ids, scores), key=lambda pair: (-pair[1], pair[0])
    )
    return [(doc_id, float(score)) for doc_id, score in ranked[:k]]


def test_doc_encoding_text_joins_title_and_body():
    assert doc_encoding_text(DocRecord("d1", "hello", "world")) == "hello world"


def test_singleton_corpus():
    params = _params()
    doc = DocRecord("only", "t", "alpha beta gamma")
    index = build_index(params, [doc], task_id=1)
    assert index.rows.shape == (1, DIM)
    assert index.doc_ids == ["only"]
    assert index.task_id == 1
    assert index.encoder_version == params.version
    expected = encode(params, tokenize(doc_encoding_text(doc), VOCAB))
    np.testing.assert_allclose(index.rows[0], expected, rtol=0, atol=1e-6)


def test_duplicate_doc_id_rejected():
    docs = [DocRecord("a", "", "x"), DocRecord("a", "", "y")]
    with pytest.raises(DuplicateDocIdError):
        build_index(_params(), docs, task_id=1)


def test_empty_corpus_rejected():
    with pytest.raises(EmptyCorpusError):
        build_index(_params(), [], task_id=1)


def test_rows_match_per_document_encode():
    rng = np.random.default_rng(0)
    params = _params()
    docs = _random_corpus(rng, 50)
    index = build_index(params, docs, task_id=2)
    for row, doc in zip(index.rows, docs):
        fresh = encode(params, tokenize(doc_encoding_text(doc), VOCAB))
        assert np.max(np.abs(row.astype(np.float64) - fresh)) <= 1e-6


def test_rebuild_is_bit_deterministic():
    rng = np.random.default_rng(5)
    docs = _random_corpus(rng, 20)
    a = build_index(_params(3), docs, task_id=1)
    b = build_index(_params(3), docs, task_id=1)
    np.testing.assert_array_equal(a.rows, b.rows)
    assert a.doc_ids == b.doc_ids


class TestSearch:
    def test_self_match_ranks_first(self):
        rng = np.random.default_rng(1)
        index = build_index(_params(1), _random_corpus(rng, 30), task_id=1)
        q = index.rows[7].astype(np.float64)
        top_id, top_score = search_topk(index, q, k=1)[0]
        assert top_id == index.doc_ids[7]
        assert top_score == pytest.approx(1.0, abs=1e-6)

    def test_k_clamped_to_corpus_size(self):
        rng = np.random.default_rng(2)
        index = build_index(_params(2), _random_corpus(rng, 6), task_id=1)
        hits = search_topk(index, np.ones(DIM), k=11)
        assert len(hits) == 6

    def test_k_below_one_rejected(self):
        rng = np.random.default_rng(2)
        index = build_index(_params(2), _random_corpus(rng, 6), task_id=1)
        with pytest.raises(ValueError):
            search_topk(index, np.ones(DIM), k=0)

    def test_zero_query_rejected(self):
        rng = np.random.default_rng(2)
        index = build_index(_params(2), _random_corpus(rng, 6), task_id=1)
        with pytest.raises(ZeroVectorError):
            search_topk(index, np.zeros(DIM), k=3)

    def test_query_dim_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        index = build_index(_params(2), _random_corpus(rng, 6), task_id=1)
        with pytest.raises(DimMismatchError):
            search_topk(index, np.ones(DIM + 1), k=3)

    def test_ties_break_by_ascending_doc_id(self):
        rows = np.array(
            [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=np.float32
        )
        index = CorpusIndex(
            task_id=1, encoder_version=1, dim=2, rows=rows,
            doc_ids=["zed", "abc", "mid"],
        )
        hits = search_topk(index, np.array([1.0, 0.0]), k=3)
        assert [h[0] for h in hits] == ["abc", "zed", "mid"]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = int(rng.integers(2, 120))
            rows = rng.normal(size=(n, DIM)).astype(np.float32)
            if n >= 4:
                rows[1] = rows[0]  # inject an exact tie
            index = CorpusIndex(
                task_id=1, encoder_version=1, dim=DIM, rows=rows,
                doc_ids=[f"doc{i:04d}" for i in rng.permutation(n)],
            )
            q = rng.normal(size=DIM)
            k = int(rng.integers(1, n + 3))
            got = search_topk(index, q, k)
            want = _brute_force(index, q, k)
            assert [g[0] for g in got] == [w[0] for w in want]
            np.testing.assert_allclose(
                [g[1] for g in got], [w[1] for w in want], rtol=0, atol=1e-12
            )

    def test_batch_variant_matches_single(self):
        rng = np.random.default_rng(4)
        index = build_index(_params(4), _random_corpus(rng, 25), task_id=1)
        queries = rng.normal(size=(5, DIM))
        batched = search_topk_batch(index, queries, k=4)
        assert batched == [search_topk(index, q, k=4) for q in queries]


class TestPersistence:
    def _saved(self, tmp_path, seed=6, n=15):
        rng = np.random.default_rng(seed)
        index = build_index(_params(seed), _random_corpus(rng, n), task_id=3)
        path = tmp_path / "task3.idx"
        save_index(index, path)
        return index, path

    def test_round_trip_bit_exact(self, tmp_path):
        index, path = self._saved(tmp_path)
        loaded = load_index(path)
        np.testing.assert_array_equal(loaded.rows, index.rows)
        assert loaded.doc_ids == index.doc_ids
        assert (loaded.task_id, loaded.encoder_version, loaded.dim) == (
            index.task_id, index.encoder_version, index.dim,
        )
        second = tmp_path / "again.idx"
        save_index(loaded, second)
        assert second.read_bytes() == path.read_bytes()

    def test_truncated_file_rejected(self, tmp_path):
        _, path = self._saved(tmp_path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(CorruptIndexError):
            load_index(path)

    def test_bad_magic_rejected(self, tmp_path):
        _, path = self._saved(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptIndexError):
            load_index(path)

    def test_payload_corruption_fails_crc(self, tmp_path):
        _, path = self._saved(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptIndexError):
            load_index(path)

    def test_header_dim_mismatch_rejected(self, tmp_path):
        # inflate the dim field so the declared row block outruns the payload
        _, path = self._saved(tmp_path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, 8 + 12, 10_000)
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptIndexError):
            load_index(path)

    def test_zero_count_header_rejected(self, tmp_path):
        _, path = self._saved(tmp_path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, 8 + 8, 0)
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptIndexError):
            load_index(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        import zlib

        _, path = self._saved(tmp_path)
        blob = path.read_bytes()
        # keep the CRC honest so only the layout check can object
        payload = blob[28:] + b"XY"
        crc = struct.pack("<I", zlib.crc32(payload))
        path.write_bytes(blob[:24] + crc + payload)
        with pytest.raises(CorruptIndexError):
            load_index(path)
