import math

import numpy as np
import pytest

from anneal import data, evaluation, model


def identity_model(dim):
    """Encoder that returns the raw features, for geometry-only tests."""
    from anneal import nn
    encoder = nn.Mlp([nn.DenseLayer(np.eye(dim), np.zeros(dim), "identity")])
    rng = np.random.default_rng(0)
    return model.SiameseModel.from_parts(
        encoder, nn.make_mlp([dim, dim], rng),
        nn.make_mlp([2 * dim, 1], rng, final_activation="sigmoid"))


def brute_force_ap_at_k(relevance, total_relevant):
    """Direct transcription of the AP@k definition."""
    k = len(relevance)
    denom = min(total_relevant, k)
    if denom == 0:
        return 0.0
    s = 0.0
    for i in range(1, k + 1):
        if relevance[i - 1]:
            prec = sum(relevance[:i]) / i
            s += prec
    return s / denom


def brute_force_map_at_k(q_feats, q_classes, g_feats, g_classes, g_ids, k):
    """Independent mAP implementation with explicit loops."""
    aps = []
    for qi in range(len(q_feats)):
        scored = []
        for gi in range(len(g_feats)):
            num = sum(a * b for a, b in zip(q_feats[qi], g_feats[gi]))
            na = math.sqrt(sum(a * a for a in q_feats[qi]))
            nb = math.sqrt(sum(b * b for b in g_feats[gi]))
            s = num / (na * nb) if na and nb else 0.0
            scored.append((-s, g_ids[gi], g_classes[gi]))
        scored.sort()
        rel = [1 if c == q_classes[qi] else 0 for _, _, c in scored[:k]]
        total = sum(1 for c in g_classes if c == q_classes[qi])
        aps.append(brute_force_ap_at_k(rel, total))
    return sum(aps) / len(aps)


class TestAveragePrecision:
    def test_all_relevant_is_one(self):
        assert evaluation.average_precision_at_k([1, 1, 1, 1, 1], 10) == 1.0

    def test_none_relevant_is_zero(self):
        assert evaluation.average_precision_at_k([0, 0, 0, 0, 0], 10) == 0.0

    def test_stated_example(self):
        got = evaluation.average_precision_at_k([1, 0, 1, 0, 0], 2)
        assert abs(got - (1.0 + 2.0 / 3.0) / 2.0) <= 1e-12

    def test_zero_total_relevant_defined_zero(self):
        assert evaluation.average_precision_at_k([0, 0, 0], 0) == 0.0

    def test_monotone_under_relevance_flips(self):
        # flipping irrelevant -> relevant at fixed total_relevant never hurts
        rng = np.random.default_rng(0)
        for _ in range(1000):
            k = int(rng.integers(1, 10))
            rel = rng.integers(0, 2, size=k).tolist()
            total = sum(rel) + int(rng.integers(1, 10))
            base = evaluation.average_precision_at_k(rel, total)
            zeros = [i for i, r in enumerate(rel) if r == 0]
            if not zeros:
                continue
            i = zeros[int(rng.integers(len(zeros)))]
            flipped = list(rel)
            flipped[i] = 1
            improved = evaluation.average_precision_at_k(flipped, total)
            assert improved >= base

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200)                                :
            k = int(rng.integers(1, 8))
            rel = rng.integers(0, 2, size=k).tolist()
            total = int(rng.integers(sum(rel), sum(rel) + 10))
            assert abs(evaluation.average_precision_at_k(rel, total)
                       - brute_force_ap_at_k(rel, total)) <= 1e-15


class TestRetrieveTopk:
    def make_gallery(self, feats, classes, start_id=100):
        return [data.ImageRecord(start_id + i, np.asarray(f, dtype=np.float64),
                                 c, "test")
                for i, (f, c) in enumerate(zip(feats, classes))]

    def test_exact_duplicate_ranks_first(self):
        m = identity_model(3)
        gallery = self.make_gallery(
            [[0.0, 1.0, 0.0], [1.0, 2.0, 3.0], [5.0, 0.0, 1.0]], [0, 1, 2])
        res = evaluation.retrieve_topk(m, [1.0, 2.0, 3.0], gallery, k=3)
        assert res.gallery_ids[0] == 101
        assert abs(res.scores[0] - 1.0) <= 1e-12

    def test_full_k_is_permutation(self):
        m = identity_model(4)
        rng = np.random.default_rng(2)
        gallery = self.make_gallery(rng.standard_normal((10, 4)), [0] * 10)
        res = evaluation.retrieve_topk(m, rng.standard_normal(4), gallery, k=10)
        assert sorted(res.gallery_ids) == [100 + i for i in range(10)]
        assert list(res.scores) == sorted(res.scores, reverse=True)

    def test_oversized_k_truncates_with_warning(self, caplog):
        m = identity_model(2)
        gallery = self.make_gallery([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        with caplog.at_level("WARNING"):
            res = evaluation.retrieve_topk(m, [1.0, 1.0], gallery, k=5)
        assert len(res.gallery_ids) == 2
        assert "truncating" in caplog.text

    def test_matches_brute_force_sort(self):
        m = identity_model(5)
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((20, 5))
        gallery = self.make_gallery(feats, [0] * 20)
        q = rng.standard_normal(5)
        res = evaluation.retrieve_topk(m, q, gallery, k=20)
        scored = []
        for i, f in enumerate(feats):
            s = float(f @ q / (np.linalg.norm(f) * np.linalg.norm(q)))
            scored.append((-s, 100 + i))
        scored.sort()
        assert list(res.gallery_ids) == [gid for _, gid in scored]

    def test_tie_broken_by_gallery_id(self):
        m = identity_model(2)
        gallery = self.make_gallery(
            [[2.0, 0.0], [1.0, 0.0], [3.0, 0.0]], [0, 0, 0])
        res = evaluation.retrieve_topk(m, [1.0, 0.0], gallery, k=3)
        # all three have cosine 1.0; ids ascending
        assert res.gallery_ids == (100, 101, 102)


class TestMapAtK:
    def synthetic(self, seed=0):
        return data.generate_synthetic(5, 30, 8, 0.2, seed=seed)

    def test_single_class_gallery_scores_one(self):
        records = []
        rng = np.random.default_rng(4)
        for i in range(10):
            records.append(data.ImageRecord(i, rng.standard_normal(4), 0,
                                            "validation" if i < 3 else "test"))
        records.append(data.ImageRecord(99, rng.standard_normal(4), 1, "train"))
        ds = data.Dataset(records)
        m = identity_model(4)
        assert evaluation.map_at_k(m, ds, k=5) == 1.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        records = []
        for i in range(30):
            records.append(data.ImageRecord(
                i, rng.standard_normal(6), int(rng.integers(4)), "validation"))
        for i in range(30, 80):
            records.append(data.ImageRecord(
                i, rng.standard_normal(6), int(rng.integers(4)), "test"))
        ds = data.Dataset(records)
        m = identity_model(6)
        got = evaluation.map_at_k(m, ds, k=5)
        q_ids = ds.ids("validation")
        g_ids = ds.ids("test")
        want = brute_force_map_at_k(
            [ds.by_id[i].features.tolist() for i in q_ids],
            [ds.by_id[i].oracle_class for i in q_ids],
            [ds.by_id[i].features.tolist() for i in g_ids],
            [ds.by_id[i].oracle_class for i in g_ids],
            g_ids, 5)
        assert abs(got - want) <= 1e-12

    def test_invariant_under_embedding_rescaling(self):
        ds = self.synthetic()
        m = identity_model(8)
        base = evaluation.map_at_k(m, ds, k=5)
        for layer in m.encoder.layers:
            layer.weights *= 10.0
        assert evaluation.map_at_k(m, ds, k=5) == base

    def test_empty_split_rejected(self):
        records = [data.ImageRecord(0, np.zeros(2), 0, "train"),
                   data.ImageRecord(1, np.zeros(2), 0, "test")]
        ds = data.Dataset(records)
        with pytest.raises(ValueError):
            evaluation.map_at_k(identity_model(2), ds, k=5)


class TestDumpRankings:
    def test_per_query_rows(self, tmp_path):
        ds = data.generate_synthetic(4, 20, 6, 0.2, seed=9)
        m = identity_model(6)
        path = tmp_path / "rank.csv"
        evaluation.dump_rankings(m, ds, path, k=3)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "query_id,rank,gallery_id,score,relevant"
        n_queries = len(ds.ids("validation"))
        assert len(lines) == 1 + 3 * n_queries
        first = lines[1].split(",")
        assert first[1] == "1"
        assert first[4] in ("0", "1")
        # scores non-increasing within a query block
        for q in range(n_queries):
            block = [float(l.split(",")[3])
                     for l in lines[1 + 3 * q:1 + 3 * (q + 1)]]
            assert block == sorted(block, reverse=True)


class TestExportCurve:
    def rows(self, n):
        return [evaluation.HistoryRow(i, 320.0 + 40 * i, 0.5 + 0.01 * i,
                                      320 + 40 * i, 7 * i)
                for i in range(n)]

    def test_writes_header_and_rows(self, tmp_path):
        path = tmp_path / "r.csv"
        evaluation.export_curve(self.rows(5), path, "anneal", 3)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == ("iteration,bits,strategy,seed,map_at_5,"
                            "labeled_pairs,transitive_pairs")
        assert len(lines) == 6
        assert lines[1].split(",")[2] == "anneal"

    def test_empty_history_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            evaluation.export_curve([], tmp_path / "r.csv", "anneal", 0)

    def test_roundtrip_at_printed_precision(self, tmp_path):
        rng = np.random.default_rng(6)
        rows = [evaluation.HistoryRow(i, float(rng.uniform(0, 5000)),
                                      float(rng.uniform(0, 1)), i, i)
                for i in range(10)]
        path = tmp_path / "r.csv"
        evaluation.export_curve(rows, path, "random", 1)
        lines = path.read_text().strip().split("\n")[1:]
        for row, line in zip(rows, lines):
            cells = line.split(",")
            assert cells[1] == evaluation.format_float(row.bits)
            assert cells[4] == evaluation.format_float(row.map_at_5)
            # parse back and compare at 9 significant digits
            assert float(cells[1]) == float(evaluation.format_float(row.bits))
            rel = abs(float(cells[4]) - row.map_at_5) / max(row.map_at_5, 1e-12)
            assert rel <= 1e-8
