"""Dataset IO: netpbm files, impression logs, grouping, synthetic data."""
import numpy as np
import numpy.testing as npt
import pytest

from ctrnet import netpbm
from ctrnet.data import (
    DataFormatError,
    ImageStore,
    Impression,
    build_group_index,
    center_crop,
    load_image,
    load_impressions,
    nearest_resize,
    random_crop_mirror,
    write_impressions,
)
from ctrnet.metrics import eval_auc
from ctrnet.nn import sigmoid
from ctrnet.synth import SynthSpec, load_images_meta, synth_generate, synth_tables


class TestNetpbm:
    def test_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (3, 5, 7)).astype(np.uint8)
        path = tmp_path / "x.ppm"
        netpbm.write_ppm(path, img)
        npt.assert_array_equal(netpbm.read_netpbm(path), img)

    def test_pgm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (4, 6)).astype(np.uint8)
        path = tmp_path / "x.pgm"
        netpbm.write_pgm(path, img)
        npt.assert_array_equal(netpbm.read_netpbm(path), img)

    def test_comments_in_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 64, 128, 255]))
        npt.assert_array_equal(netpbm.read_netpbm(path), [[0, 64], [128, 255]])

    def test_truncated_raster(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n2 2\n255\n\x00\x01")
        with pytest.raises(netpbm.NetpbmError, match="raster"):
            netpbm.read_netpbm(path)


class TestImageStore:
    def test_black_image_is_zero_tensor(self, tmp_path):
        netpbm.write_ppm(tmp_path / "a.ppm", np.zeros((3, 4, 4), dtype=np.uint8))
        store = ImageStore(tmp_path)
        npt.assert_array_equal(load_image(store, "a"), 0.0)

    def test_max_image_is_ones_tensor(self, tmp_path):
        netpbm.write_ppm(tmp_path / "b.ppm", np.full((3, 4, 4), 255, dtype=np.uint8))
        store = ImageStore(tmp_path)
        npt.assert_array_equal(load_image(store, "b"), 1.0)

    def test_byte_maps_to_exact_fraction(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, (3, 3, 3)).astype(np.uint8)
        netpbm.write_ppm(tmp_path / "c.ppm", img)
        store = ImageStore(tmp_path)
        loaded = load_image(store, "c")
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    assert loaded[c, i, j] == img[c, i, j] / 255.0

    def test_missing_id(self, tmp_path):
        with pytest.raises(KeyError):
            ImageStore(tmp_path).load("nope")


class TestImpressionIo:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.tsv"
        path.write_text("")
        assert load_impressions(path, 10) == []

    def test_format_definition_line(self, tmp_path):
        path = tmp_path / "one.tsv"
        path.write_text("img7\t1\t12:1,153:1\n")
        (imp,) = load_impressions(path, 200)
        assert imp.image_id == "img7"
        assert imp.label == 1
        assert imp.features == [(12, 1.0), (153, 1.0)]

    def test_empty_feature_field(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("img\t0\t\n")
        (imp,) = load_impressions(path, 10)
        assert imp.features == []

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("img\t1\t0:1\nimg only-two-fields\n")
        with pytest.raises(DataFormatError, match=":2"):
            load_impressions(path, 10)

    def test_index_beyond_dim(self, tmp_path):
        path = tmp_path / "dim.tsv"
        path.write_text("img\t1\t12:1\n")
        with pytest.raises(DataFormatError):
            load_impressions(path, 10)

    def test_bad_label(self, tmp_path):
        path = tmp_path / "lab.tsv"
        path.write_text("img\t2\t0:1\n")
        with pytest.raises(DataFormatError):
            load_impressions(path, 10)

    def test_write_load_roundtrip_10k(self, tmp_path):
        rng = np.random.default_rng(3)
        dim = 500
        imps = []
        for i in range(10_000):
            nnz = int(rng.integers(0, 6))
            idx = sorted(rng.choice(dim, size=nnz, replace=False).tolist())
            feats = [(int(j), float(rng.normal())) for j in idx]
            imps.append(Impression.create(f"im{rng.integers(50)}", int(rng.integers(2)), feats, dim))
        path = tmp_path / "rt.tsv"
        write_impressions(path, imps)
        back = load_impressions(path, dim)
        assert len(back) == len(imps)
        for a, b in zip(imps, back):
            assert a.image_id == b.image_id and a.label == b.label
            npt.assert_array_equal(a.idx, b.idx)
            npt.assert_array_equal(a.val, b.val)


class TestGroupIndex:
    def test_single_impression(self):
        imp = Impression.create("a", 1, [(0, 1.0)], 5)
        g = build_group_index([imp])
        assert g.image_ids == ["a"]
        npt.assert_array_equal(g.counts, [1])

    def test_partition_by_id(self):
        imps = [
            Impression.create("a", 0, [], 5),
            Impression.create("b", 1, [], 5),
            Impression.create("a", 1, [], 5),
        ]
        g = build_group_index(imps)
        assert g.image_ids == ["a", "b"]
        npt.assert_array_equal(g.rows_by_image[0], [0, 2])
        npt.assert_array_equal(g.rows_by_image[1], [1])

    def test_partition_properties_random(self):
        rng = np.random.default_rng(4)
        imps = [Impression.create(f"im{rng.integers(40)}", 0, [], 5) for _ in range(10_000)]
        g = build_group_index(imps)
        assert g.counts.sum() == 10_000
        all_rows = np.concatenate(g.rows_by_image)
        assert len(all_rows) == 10_000
        npt.assert_array_equal(np.sort(all_rows), np.arange(10_000))


class TestCrops:
    def test_center_crop(self):
        img = np.arange(3 * 6 * 6, dtype=np.float64).reshape(3, 6, 6)
        out = center_crop(img, 4)
        npt.assert_array_equal(out, img[:, 1:5, 1:5])

    def test_random_crop_mirror_shape_and_content(self):
        rng = np.random.default_rng(5)
        img = rng.random((3, 8, 8))
        out = random_crop_mirror(img, 6, rng)
        assert out.shape == (3, 6, 6)
        # every crop value exists in the source image
        assert np.isin(out.round(12), img.round(12)).all()

    def test_nearest_resize_exact_on_integer_scale(self):
        img = np.arange(2 * 2 * 3, dtype=np.float64).reshape(3, 2, 2)
        out = nearest_resize(img, 4, 4)
        npt.assert_array_equal(out[:, ::2, ::2], img)


class TestSynth:
    def test_zero_visual_weight_image_carries_no_signal(self):
        spec = SynthSpec(n_images=20, count_mu=20.0, visual_weight=0.0)
        t = synth_tables(spec, seed=0)
        labels = np.array([i.label for i in t.impressions])
        auc_basic = eval_auc(sigmoid(t.logit_basic), labels)
        auc_full = eval_auc(t.true_prob, labels)
        assert auc_basic == auc_full

    def test_two_images_three_each(self):
        spec = SynthSpec(n_images=2, count_mu=3.0, count_sigma=1e-9, count_min=3, count_max=3)
        t = synth_tables(spec, seed=1)
        assert len(t.impressions) == 6
        g = build_group_index(t.impressions)
        npt.assert_array_equal(np.sort(g.counts), [3, 3])

    def test_default_spec_positive_rate_matches_truth(self):
        t = synth_tables(SynthSpec(), seed=7)
        assert len(t.impressions) >= 50_000
        rate = np.mean([i.label for i in t.impressions])
        mean_p = t.true_prob.mean()
        assert abs(rate - mean_p) <= 0.1 * mean_p

    def test_generate_writes_consistent_files(self, tmp_path):
        spec = SynthSpec(n_images=6, count_mu=5.0, dim=200)
        paths = synth_generate(spec, seed=3, out_dir=tmp_path)
        imps = load_impressions(paths["impressions"], spec.dim)
        train = load_impressions(paths["train"], spec.dim)
        ev = load_impressions(paths["eval"], spec.dim)
        cold = load_impressions(paths["cold"], spec.dim)
        assert len(imps) == len(train) + len(ev) + len(cold)
        store = ImageStore(paths["images"])
        meta = load_images_meta(paths["images_meta"])
        assert set(meta) == {i.image_id for i in imps}
        cold_ids = {i.image_id for i in cold}
        assert cold_ids.isdisjoint({i.image_id for i in train})
        # patch pixels carry the recorded brightness (within quantization)
        for image_id, (cat, top, left, size, bright) in meta.items():
            img = store.load(image_id)
            patch = img[:, top : top + size, left : left + size]
            assert abs(patch.mean() - bright) < 1.0 / 255.0
        # truth rows align with the impressions file
        with open(paths["truth"]) as f:
            for line in f:
                image_id, row, prob = line.split("\t")
                assert imps[int(row)].image_id == image_id
                assert 0.0 < float(prob) < 1.0

    def test_generation_deterministic(self, tmp_path):
        spec = SynthSpec(n_images=5, count_mu=4.0, dim=150)
        p1 = synth_generate(spec, seed=9, out_dir=tmp_path / "a")
        p2 = synth_generate(spec, seed=9, out_dir=tmp_path / "b")
        for key in ("impressions", "train", "eval", "cold", "truth", "images_meta"):
            assert open(p1[key], "rb").read() == open(p2[key], "rb").read()

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SynthSpec(n_images=0).validate()
        with pytest.raises(ValueError):
            SynthSpec(patch_size=40, image_size=32).validate()
