import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homocl import synthdata as sd
from homocl.fnsim import analytic_fn_rate


class TestDistributions:
    def test_uniform(self):
        np.testing.assert_array_equal(sd.uniform(10).weights, np.full(10, 0.1))

    def test_explicit_collision(self):
        d = sd.make_distribution("explicit", [0.5, 0.5])
        assert len(d) == 2
        assert d.collision_probability == pytest.approx(0.5)

    @pytest.mark.parametrize("kind,k,hi,lo", [("msl", 19, 0.3476, 0.0034),
                                              ("hirise", 8, 0.8139, 0.0068)])
    def test_presets_keep_anchors(self, kind, k, hi, lo):
        d = sd.make_distribution(kind)
        assert len(d) == k
        assert d.weights.max() == pytest.approx(hi, abs=1e-12)
        assert d.weights.min() == pytest.approx(lo, abs=1e-12)
        assert d.weights.sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("kind", ["msl", "hirise"])
    def test_presets_are_non_increasing(self, kind):
        w = sd.make_distribution(kind).weights
        assert np.all(np.diff(w) <= 1e-15)

    def test_msl_calibrated_to_batch_fn_rate(self):
        assert analytic_fn_rate(sd.msl_like(), 128) == pytest.approx(15.0, abs=1e-9)

    def test_hirise_smallest_middle_weight_meets_floor(self):
        w = sd.hirise_like().weights
        assert w[-2] == pytest.approx(w[-1], abs=1e-12)

    def test_skewed(self):
        d = sd.skewed(5, 0.35)
        assert d.weights[0] == 0.35
        np.testing.assert_allclose(d.weights[1:], 0.1625)

    @pytest.mark.parametrize("bad", [[0.5, 0.4], [1.2, -0.2], [], [np.nan, 1.0]])
    def test_invalid_weights(self, bad):
        with pytest.raises(ValueError):
            sd.ClassDistribution(np.array(bad, dtype=float))

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            sd.uniform(0)
        with pytest.raises(ValueError):
            sd.make_distribution("zipf")

    def test_empirical_collision_rate(self):
        # two independent draws share a class with probability sum p^2
        d = sd.msl_like()
        rng = np.random.default_rng(0)
        a = rng.choice(len(d), size=10**6, p=d.weights)
        b = rng.choice(len(d), size=10**6, p=d.weights)
        assert np.mean(a == b) == pytest.approx(d.collision_probability, abs=0.005)


class TestSynthesisSpec:
    @pytest.mark.parametrize("kw", [dict(image_size=4), dict(samples=0),
                                    dict(prototype_noise_std=1.5), dict(class_count=0)])
    def test_rejects_invalid(self, kw):
        base = dict(class_count=3)
        base.update(kw)
        with pytest.raises(ValueError):
            sd.SynthesisSpec(**base)


class TestGenerate:
    def test_single_class_noise_free(self):
        spec = sd.SynthesisSpec(1, 8, 3, 4, 0.0, 0)
        d = sd.generate_dataset(spec, sd.uniform(1))
        assert np.all(d.class_ids == 0)
        for i in range(1, 4):
            np.testing.assert_array_equal(d.pixels[i], d.pixels[0])

    def test_class_counts_binomial(self):
        spec = sd.SynthesisSpec(5, 8, 1, 5000, 0.1, 1, seed=1)
        d = sd.generate_dataset(spec, sd.uniform(5))
        counts = np.bincount(d.class_ids, minlength=5)
        sigma = np.sqrt(5000 * 0.2 * 0.8)
        assert np.all(np.abs(counts - 1000) < 5 * sigma)

    def test_deterministic(self):
        spec = sd.SynthesisSpec(3, 8, 3, 20, 0.1, 2, seed=7, instance_texture=0.3, tile_size=4)
        a = sd.generate_dataset(spec, sd.uniform(3))
        b = sd.generate_dataset(spec, sd.uniform(3))
        assert a.equals(b)
        assert a.pixels.tobytes() == b.pixels.tobytes()

    def test_samples_independent_of_count(self):
        # per-sample streams: the first images do not depend on N
        small = sd.generate_dataset(sd.SynthesisSpec(2, 8, 3, 5, seed=2), sd.uniform(2))
        large = sd.generate_dataset(sd.SynthesisSpec(2, 8, 3, 9, seed=2), sd.uniform(2))
        same = small.class_ids == large.class_ids[:5]
        np.testing.assert_array_equal(small.pixels[same], large.pixels[:5][same])

    def test_splits_partition(self, small_dataset):
        n = len(small_dataset)
        sizes = [len(small_dataset.split(s)) for s in ("train", "val", "test")]
        assert sum(sizes) == n
        assert sizes[2] == int(np.floor(0.2 * n))

    def test_distribution_size_mismatch(self):
        with pytest.raises(ValueError):
            sd.generate_dataset(sd.SynthesisSpec(3, 8), sd.uniform(4))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 6), st.floats(0, 1), st.integers(0, 3), st.floats(0, 1),
           st.integers(0, 1000))
    def test_pixels_in_range(self, k, noise, shift, texture, seed):
        spec = sd.SynthesisSpec(k, 8, 3, 6, noise, shift, seed, instance_texture=texture)
        d = sd.generate_dataset(spec, sd.uniform(k))
        d.validate()
        assert d.pixels.dtype == np.float32


class TestMix:
    def test_fraction_one_is_permutation(self, small_dataset):
        other = sd.generate_dataset(sd.SynthesisSpec(2, 8, 3, 10, seed=1), sd.uniform(2), 1)
        m = sd.mix_datasets(small_dataset, other, 1.0, len(small_dataset))
        assert np.all(m.domain_ids == 0)
        assert sorted(m.meta["origin"].tolist()) == small_dataset.sample_ids.tolist()

    def test_counts_and_disjoint_labels(self, small_dataset):
        other = sd.generate_dataset(sd.SynthesisSpec(3, 8, 3, 60, seed=1), sd.uniform(3), 1)
        m = sd.mix_datasets(small_dataset, other, 0.25, 80, seed=3)
        assert len(m) == 80
        assert np.sum(m.domain_ids == 0) == 20
        assert np.all(m.class_ids[m.domain_ids == 1] >= 4)
        assert np.unique(m.sample_ids).size == 80
        m.validate()

    def test_mixed_collision_closed_form(self):
        mix = sd.mixed_distribution(sd.uniform(19), sd.uniform(1000), 0.5)
        assert mix.collision_probability == pytest.approx(0.25 * (1 / 19 + 1 / 1000), rel=1e-12)
        assert mix.collision_probability == pytest.approx(0.013408, abs=5e-7)

    def test_too_many_requested(self, small_dataset):
        with pytest.raises(ValueError):
            sd.mix_datasets(small_dataset, small_dataset, 0.5, 10 * len(small_dataset))


class TestFileFormat:
    def test_round_trip_bit_exact(self, small_dataset, tmp_path):
        p = tmp_path / "d.hcl"
        sd.save_dataset(small_dataset, p)
        back = sd.load_dataset(p)
        assert back.equals(small_dataset)
        sd.save_dataset(back, tmp_path / "e.hcl")
        assert p.read_bytes() == (tmp_path / "e.hcl").read_bytes()

    def test_header_layout(self, small_dataset, tmp_path):
        p = tmp_path / "d.hcl"
        sd.save_dataset(small_dataset, p)
        raw = p.read_bytes()
        assert raw[:4] == b"HCL1"
        n, h, w, c, k, dom = np.frombuffer(raw[4:28], dtype="<u4")
        assert (n, h, w, c, k, dom) == (96, 8, 8, 3, 4, 0)
        rec0 = np.frombuffer(raw[28:33], dtype=[("c", "<u4"), ("s", "u1")])[0]
        assert rec0["c"] == small_dataset.class_ids[0]
        assert rec0["s"] == small_dataset.splits[0]

    def test_core_only_file_loads(self, small_dataset, tmp_path):
        p = tmp_path / "d.hcl"
        sd.save_dataset(small_dataset, p)
        raw = p.read_bytes()
        core = 28 + 5 * 96 + 4 * 96 * 8 * 8 * 3
        (tmp_path / "core.hcl").write_bytes(raw[:core])
        back = sd.load_dataset(tmp_path / "core.hcl")
        np.testing.assert_array_equal(back.pixels, small_dataset.pixels)
        np.testing.assert_array_equal(back.class_ids, small_dataset.class_ids)

    def test_bad_magic(self, small_dataset, tmp_path):
        p = tmp_path / "d.hcl"
        sd.save_dataset(small_dataset, p)
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(sd.DatasetFormatError):
            sd.load_dataset(p)

    @pytest.mark.parametrize("cut", [10, 100, 2000])
    def test_truncated(self, small_dataset, tmp_path, cut):
        p = tmp_path / "d.hcl"
        sd.save_dataset(small_dataset, p)
        p.write_bytes(p.read_bytes()[:cut])
        with pytest.raises(sd.TruncatedFileError):
            sd.load_dataset(p)


class TestPPM:
    def test_round_trip(self, tmp_path, rng):
        img = np.round(rng.random((5, 7, 3)) * 255) / 255
        sd.write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_allclose(sd.read_ppm(tmp_path / "a.ppm"), img, atol=1e-6)

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# hi\n1 1\n255\n" + bytes([255, 0, 51]))
        np.testing.assert_allclose(sd.read_ppm(tmp_path / "c.ppm")[0, 0], [1.0, 0.0, 0.2])

    def test_rejects_ascii(self, tmp_path):
        (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(sd.DatasetFormatError):
            sd.read_ppm(tmp_path / "p3.ppm")
