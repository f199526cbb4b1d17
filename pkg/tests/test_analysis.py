import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synself import analysis as an
from synself import encoder as enc
from synself import sampler as sp
from synself.volume_io import EmbeddingMatrix, IntensityVolume, SynapseRecord, VolumeHeader
from oracles import ari_pair_loops, nmi_loops


def ramp_dataset():
    dims = (32, 24, 16)
    nx, ny, nz = dims
    vox = (np.arange(nx * ny * nz) % 241).astype(np.uint8).reshape(nz, ny, nx)
    vol = IntensityVolume(VolumeHeader(dims, "u8"), vox)
    recs = [
        SynapseRecord(0, (8, 8, 8), 1),
        SynapseRecord(1, (16, 8, 8), 1),
        SynapseRecord(2, (8, 16, 8), 2),
        SynapseRecord(3, (24, 16, 8), 2),
    ]
    return vol, recs


SMALL = enc.EncoderConfig(patch_side=8, channels=(2, 3), convs_per_block=1, h_dim=6, z_dim=4, init_seed=0)


class TestEmbedAll:
    def test_rows_match_manual_forward(self, tmp_path):
        vol, recs = ramp_dataset()
        params = enc.init(SMALL)
        ck = tmp_path / "ck.dckpt"
        enc.save(params, SMALL, ck)
        emb = an.embed_all(ck, vol, recs, patch_side=8)
        assert emb.kind == "penultimate"
        assert emb.values.shape == (4, 6)
        for i, rec in enumerate(recs):
            patch = sp.extract_patch(vol, rec.pos, 8)
            h, _, _ = enc.forward(params, patch[None], SMALL)
            assert np.array_equal(emb.values[i], h)

    def test_duplicate_position_identical_rows(self, tmp_path):
        vol, _ = ramp_dataset()
        recs = [SynapseRecord(0, (8, 8, 8), 1), SynapseRecord(1, (8, 8, 8), 2)]
        params = enc.init(SMALL)
        ck = tmp_path / "ck.dckpt"
        enc.save(params, SMALL, ck)
        emb = an.embed_all(ck, vol, recs, patch_side=8)
        assert np.array_equal(emb.values[0], emb.values[1])

    def test_patch_side_mismatch(self, tmp_path):
        vol, recs = ramp_dataset()
        ck = tmp_path / "ck.dckpt"
        enc.save(enc.init(SMALL), SMALL, ck)
        with pytest.raises(an.AnalysisError, match="patch_side"):
            an.embed_all(ck, vol, recs, patch_side=16)

    def test_threads_do_not_change_rows(self, tmp_path):
        vol, recs = ramp_dataset()
        ck = tmp_path / "ck.dckpt"
        enc.save(enc.init(SMALL), SMALL, ck)
        a = an.embed_all(ck, vol, recs, patch_side=8, threads=1)
        b = an.embed_all(ck, vol, recs, patch_side=8, threads=4)
        assert a.values.tobytes() == b.values.tobytes()

    def test_row_order_follows_table_order(self, tmp_path):
        vol, recs = ramp_dataset()
        ck = tmp_path / "ck.dckpt"
        enc.save(enc.init(SMALL), SMALL, ck)
        fwd = an.embed_all(ck, vol, recs, patch_side=8)
        rev = an.embed_all(ck, vol, recs[::-1], patch_side=8)
        assert rev.synapse_ids == fwd.synapse_ids[::-1]
        assert np.array_equal(rev.values, fwd.values[::-1])


class TestPCA:
    def test_line_data_first_component(self):
        t = np.linspace(-2, 2, 9)
        x = np.outer(t, np.array([3.0, 4.0, 0.0, 0.0]))
        res = an.pca_project(EmbeddingMatrix(list(range(9)), x), out_dim=2)
        assert np.allclose(np.abs(res.components[0]), [0.6, 0.8, 0, 0], atol=1e-10)
        assert res.components[0][1] > 0  # sign rule: largest-magnitude entry positive
        assert res.explained_variance[1] == 0.0
        assert res.n_positive == 1

    def test_matches_dense_eigensolver(self):
        rng = np.random.default_rng(0)
        for m, d in ((30, 5), (80, 8), (200, 12)):
            x = rng.normal(size=(m, d)) @ rng.normal(size=(d, d))
            res = an.pca_project(EmbeddingMatrix(list(range(m)), x), out_dim=2)
            cov = np.cov(x, rowvar=False)
            evals = np.sort(np.linalg.eigvalsh(cov))[::-1]
            want = evals[:2] / np.trace(cov)
            assert np.allclose(res.explained_variance, want, atol=1e-8)

    def test_components_orthonormal(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(50, 7))
        res = an.pca_project(EmbeddingMatrix(list(range(50)), x), out_dim=3)
        gram = res.components @ res.components.T
        assert np.allclose(gram, np.eye(3), atol=1e-8)

    def test_explained_variance_non_increasing(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(60, 6)) * np.array([5, 3, 2, 1, 0.5, 0.1])
        res = an.pca_project(EmbeddingMatrix(list(range(60)), x), out_dim=4)
        assert np.all(np.diff(res.explained_variance) <= 1e-12)

    def test_rotation_recovery_procrustes(self):
        # PCA commutes with orthonormal rotation: coords agree up to axis sign
        rng = np.random.default_rng(3)
        base = rng.normal(size=(40, 2)) * np.array([4.0, 1.5])
        q, _ = np.linalg.qr(rng.normal(size=(2, 2)))
        ref = an.pca_project(EmbeddingMatrix(list(range(40)), base), out_dim=2)
        rot = an.pca_project(EmbeddingMatrix(list(range(40)), base @ q.T), out_dim=2)
        for axis in range(2):
            match = min(
                np.max(np.abs(rot.coords[:, axis] - ref.coords[:, axis])),
                np.max(np.abs(rot.coords[:, axis] + ref.coords[:, axis])),
            )
            assert match < 1e-8

    def test_rank_deficient_reported_and_padded(self):
        x = np.ones((5, 3)) * 2.0  # zero variance
        res = an.pca_project(EmbeddingMatrix(list(range(5)), x), out_dim=2)
        assert res.n_positive == 0
        assert not res.components.any()
        assert not res.coords.any()


class TestKMeans:
    def test_k_equals_m(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 3))
        res = an.kmeans(x, k=6, seed=0)
        assert res.inertia == 0.0
        assert len(set(res.labels.tolist())) == 6

    def test_k1_centroid_is_mean(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(10, 4))
        res = an.kmeans(x, k=1, seed=0)
        assert np.allclose(res.centroids[0], x.mean(axis=0), atol=1e-12)
        want = float(((x - x.mean(axis=0)) ** 2).sum())
        assert abs(res.inertia - want) < 1e-9

    def test_two_blobs_hand_oracle(self):
        blob_a = np.array([[0.0, 0.0], [0.2, 0.0], [0.0, 0.2]])
        blob_b = np.array([[10.0, 10.0], [10.2, 10.0], [10.0, 10.2]])
        x = np.vstack([blob_a, blob_b])
        res = an.kmeans(x, k=2, seed=1)
        assert len(set(res.labels[:3].tolist())) == 1
        assert len(set(res.labels[3:].tolist())) == 1
        assert res.labels[0] != res.labels[3]
        want = sum(float(((b - b.mean(axis=0)) ** 2).sum()) for b in (blob_a, blob_b))
        assert abs(res.inertia - want) < 1e-12

    def test_inertia_non_increasing_per_iteration(self):
        rng = np.random.default_rng(6)
        for trial in range(5):
            x = rng.normal(size=(40, 3)) + rng.integers(0, 4, size=(40, 1)) * 3.0
            res = an.kmeans(x, k=4, seed=trial)
            assert all(a >= b for a, b in zip(res.inertia_history, res.inertia_history[1:]))

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(25, 4))
        a = an.kmeans(x, k=3, seed=9)
        b = an.kmeans(x, k=3, seed=9)
        assert np.array_equal(a.labels, b.labels) and a.inertia == b.inertia

    def test_bad_k(self):
        with pytest.raises(an.AnalysisError):
            an.kmeans(np.zeros((3, 2)), k=0)
        with pytest.raises(an.AnalysisError):
            an.kmeans(np.zeros((3, 2)), k=4)


class TestAgreementMetrics:
    def test_identical_labelings(self):
        labels = [0, 0, 1, 1, 2]
        assert an.nmi(labels, labels) == 1.0
        assert an.ari(labels, labels) == 1.0

    def test_constant_labeling(self):
        a = [1, 1, 1, 1]
        b = [0, 1, 0, 1]
        assert an.nmi(a, b) == 0.0
        assert an.ari(a, b) == 0.0

    def test_matches_contingency_oracles_random(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a = rng.integers(0, 4, size=30).tolist()
            b = rng.integers(0, 3, size=30).tolist()
            assert abs(an.nmi(a, b) - nmi_loops(a, b)) <= 1e-12
            assert abs(an.ari(a, b) - ari_pair_loops(a, b)) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=2, max_size=40), st.integers(0, 10**6))
    def test_symmetry_and_permutation_invariance(self, a, seed):
        rng = np.random.default_rng(seed)
        b = rng.integers(0, 4, size=len(a)).tolist()
        assert abs(an.nmi(a, b) - an.nmi(b, a)) <= 1e-12
        assert abs(an.ari(a, b) - an.ari(b, a)) <= 1e-12
        # relabeling is irrelevant
        remap = {v: 100 - v for v in set(a)}
        a2 = [remap[v] for v in a]
        assert abs(an.nmi(a, b) - an.nmi(a2, b)) <= 1e-12
        assert abs(an.ari(a, b) - an.ari(a2, b)) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(an.AnalysisError):
            an.nmi([1, 2], [1, 2, 3])
        with pytest.raises(an.AnalysisError):
            an.nmi([], [])


class TestConcordance:
    def recs(self, svs):
        return [SynapseRecord(i, (0, 0, 0), sv) for i, sv in enumerate(svs)]

    def test_identical_embeddings(self):
        emb = EmbeddingMatrix(list(range(4)), np.tile([1.0, 2.0], (4, 1)))
        intra, inter = an.concordance(emb, self.recs([1, 1, 2, 2]))
        assert intra == 1.0 and inter == 1.0

    def test_orthogonal_supervoxels(self):
        emb = EmbeddingMatrix(
            list(range(4)), np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        )
        intra, inter = an.concordance(emb, self.recs([1, 1, 2, 2]))
        assert intra == 1.0 and inter == 0.0

    def test_intra_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(9)
        svs = [s for s in range(5) for _ in range(3)]
        x = rng.normal(size=(15, 6))
        emb = EmbeddingMatrix(list(range(15)), x)
        intra, _ = an.concordance(emb, self.recs([s + 1 for s in svs]))
        vals = []
        for i in range(15):
            for j in range(i + 1, 15):
                if svs[i] == svs[j]:
                    u, v = x[i], x[j]
                    vals.append(float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v)))
        assert abs(intra - np.mean(vals)) < 1e-12

    def test_no_eligible_pairs(self):
        emb = EmbeddingMatrix([0, 1], np.ones((2, 2)))
        with pytest.raises(an.AnalysisError, match="intra"):
            an.concordance(emb, self.recs([1, 2]))


class TestScatter:
    def test_counts_and_determinism(self, tmp_path):
        coords = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]])
        labels = [1, 2, 1]
        p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
        an.emit_scatter(coords, labels, p1)
        an.emit_scatter(coords, labels, p2)
        assert p1.read_bytes() == p2.read_bytes()
        root = ET.fromstring(p1.read_text())
        ns = "{http://www.w3.org/2000/svg}"
        points = [c for c in root.findall(f"{ns}circle")]
        legends = root.findall(f"{ns}g")
        assert len(points) == 3
        assert len(legends) == 2

    def test_bounding_box_with_margin(self, tmp_path):
        rng = np.random.default_rng(10)
        coords = rng.normal(size=(20, 2)) * [3.0, 7.0] + [100.0, -50.0]
        p = tmp_path / "s.svg"
        an.emit_scatter(coords, ["x"] * 20, p)
        root = ET.fromstring(p.read_text())
        ns = "{http://www.w3.org/2000/svg}"
        pts = [
            (float(c.get("cx")), float(c.get("cy")))
            for c in root.findall(f"{ns}circle")
        ]
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        # all points inside the viewport, margin keeps them off the exact edge
        assert min(xs) > 0 and max(xs) < 640
        assert min(ys) > 0 and max(ys) < 480
        # extremes map to the 5% margin positions: span fraction ~ 1/1.1
        # (coords are written with 3 decimals, hence the loose tolerance)
        assert (max(xs) - min(xs)) / (640 - 120) == pytest.approx(1 / 1.1, rel=1e-4)
