import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eafpmed import checkpoint, netpbm
from eafpmed.data import (
    AugmentSpec,
    DatasetError,
    Sample,
    augment,
    batches,
    decode_image,
    hflip,
    load_manifest,
    load_samples,
    resize_bilinear,
    rotate90,
    split,
    synth_fixture,
    write_dataset,
)
from eafpmed.netpbm import FormatError


class TestNetpbm:
    def test_pgm_round_trip(self, tmp_path):
        px = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        path = netpbm.write_u8(tmp_path / "a.pgm", px)
        back = netpbm.read(path)
        assert back.shape == (3, 4)
        np.testing.assert_array_equal(np.rint(back * 255).astype(np.uint8), px)

    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 4)) / 255.0
        path = netpbm.write(tmp_path / "a.ppm", img)
        np.testing.assert_allclose(decode_image(path), img, atol=1e-7)

    def test_header_comments(self):
        blob = b"P5\n# made by hand\n2 1\n# max\n255\n" + bytes([0, 255])
        np.testing.assert_array_equal(netpbm.decode(blob), [[0.0, 1.0]])

    def test_low_maxval_scales(self):
        assert netpbm.decode(b"P5 1 1 15\n" + bytes([15]))[0, 0] == 1.0

    @pytest.mark.parametrize("blob", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00",
                                      b"P5\n1 1\n10\n\x0b", b"P5\n1 x\n255\n\x00"])
    def test_malformed(self, blob):
        with pytest.raises(FormatError):
            netpbm.decode(blob)

    def test_encode_range(self):
        with pytest.raises(ValueError):
            netpbm.encode(np.full((2, 2), 1.5))


class TestCheckpoint:
    def test_round_trip(self):
        arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b.c": np.float32([1.5]), "s": np.float32(2.0)}
        back = checkpoint.loads(checkpoint.dumps(arrays))
        assert list(back) == list(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_deterministic_bytes(self):
        arrays = {"w": np.random.default_rng(0).random((3, 3))}
        assert checkpoint.dumps(arrays) == checkpoint.dumps(arrays)

    def test_rejects_corruption(self):
        blob = checkpoint.dumps({"w": np.ones(4, np.float32)})
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(b"XXXX" + blob[4:])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(blob[:-3])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(blob + b"\x00")


class TestResize:
    def test_two_by_two_to_three(self):
        img = np.array([[0.0, 1.0], [1.0, 0.0]], np.float32)
        out = resize_bilinear(img, 3, 3)
        assert out[1, 1] == pytest.approx(0.5)
        np.testing.assert_array_equal(out[[0, 0, 2, 2], [0, 2, 0, 2]], [0, 1, 1, 0])

    def test_identity_size(self):
        img = np.random.default_rng(0).random((1, 5, 7)).astype(np.float32)
        np.testing.assert_array_equal(resize_bilinear(img, 5, 7), img)

    @given(st.integers(1, 20), st.integers(1, 20), st.floats(0, 1))
    @settings(max_examples=40)
    def test_constant_preserved(self, h, w, v):
        out = resize_bilinear(np.full((2, 4, 3), v, np.float64), h, w)
        np.testing.assert_allclose(out, v, atol=1e-12)


class TestSplit:
    def samples(self, counts):
        return [Sample(np.zeros((1, 2, 2), np.float32), label, f"{label}:{i}")
                for label, n in enumerate(counts) for i in range(n)]

    @pytest.mark.parametrize("seed", range(50))
    def test_partition(self, seed):
        items = self.samples([10, 7, 3])
        tr, te = split(items, 0.8, seed)
        names = sorted(s.source for s in tr + te)
        assert names == sorted(s.source for s in items)
        assert not {s.source for s in tr} & {s.source for s in te}
        for label, n in enumerate([10, 7, 3]):
            n_test = sum(s.label == label for s in te)
            assert n_test >= 1
            assert sum(s.label == label for s in tr) == min(int(np.ceil(0.8 * n - 1e-9)), n - 1)

    def test_reproducible(self):
        items = self.samples([5, 5])
        a = split(items, 0.6, 3)
        b = split(items, 0.6, 3)
        assert [s.source for s in a[1]] == [s.source for s in b[1]]

    def test_two_minimum(self):
        with pytest.raises(DatasetError):
            split(self.samples([5, 1]), 0.8, 0)

    def test_ratio_bounds(self):
        with pytest.raises(ValueError):
            split(self.samples([5, 5]), 1.0, 0)

    def test_batches_cover_all(self):
        items = self.samples([5, 4])
        got = [y for _, ys in batches(items, 4, shuffle_seed=1) for y in ys]
        assert sorted(got) == [0] * 5 + [1] * 4


class TestAugment:
    def test_identity(self):
        s = Sample(np.random.default_rng(0).random((1, 8, 8)).astype(np.float32), 0, box=(1, 2, 3, 4))
        out = augment(s, AugmentSpec.identity(), np.random.default_rng(5))
        np.testing.assert_array_equal(out.image, s.image)
        assert out.box == s.box

    def test_rotate_mapping(self):
        n = 5
        img = np.zeros((1, n, n))
        img[0, 1, 3] = 1
        out = rotate90(img, 1)
        assert out[0, 3, n - 1 - 1] == 1

    def test_rotation_order_four(self):
        img = np.random.default_rng(0).random((2, 6, 6))
        np.testing.assert_array_equal(rotate90(img, 4), img)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_box_tracks_lesion(self, seed):
        rng = np.random.default_rng(seed)
        img = np.zeros((1, 16, 16), np.float32)
        r0, c0 = rng.integers(0, 12, size=2)
        img[0, r0 : r0 + 3, c0 : c0 + 2] = 1
        s = Sample(img, 0, box=(int(r0), int(c0), int(r0) + 2, int(c0) + 1))
        out = augment(s, AugmentSpec(), rng)
        rows, cols = np.nonzero(out.image[0] > 0.5)
        assert (rows.min(), cols.min(), rows.max(), cols.max()) == out.box

    def test_hflip_involution(self):
        img = np.random.default_rng(0).random((1, 3, 4))
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_same_seed_same_draw(self):
        s = Sample(np.random.default_rng(0).random((1, 16, 16)).astype(np.float32), 0)
        spec = AugmentSpec(crop=0.8, max_angle=10)
        a = augment(s, spec, np.random.default_rng(9)).image
        b = augment(s, spec, np.random.default_rng(9)).image
        assert a.tobytes() == b.tobytes()


class TestSynth:
    def test_reproducible(self):
        a = synth_fixture(3, 4, 32, seed=7)
        b = synth_fixture(3, 4, 32, seed=7)
        assert all(x.image.tobytes() == y.image.tobytes() and x.box == y.box for x, y in zip(a, b))

    def test_boxes_tight(self):
        for s in synth_fixture(3, 10, 64, seed=7):
            r0, c0, r1, c1 = s.box
            assert 0 <= r0 <= r1 < 64 and 0 <= c0 <= c1 < 64
            lesion = s.image[0] > 0.2 + 0.15
            inside = np.zeros_like(lesion)
            inside[r0 : r1 + 1, c0 : c1 + 1] = True
            assert lesion[inside].any()
            assert not (s.image[0][~inside] > 0.2 + 0.2).any()

    def test_box_size_orders_classes(self):
        samples = synth_fixture(3, 20, 64, seed=7)
        area = [np.mean([(s.box[2] - s.box[0] + 1) * (s.box[3] - s.box[1] + 1) for s in samples if s.label == k])
                for k in range(3)]
        assert area[0] > area[1] > area[2]

    def test_class_means_differ(self):
        samples = synth_fixture(3, 20, 64, seed=7)
        means = [np.mean([s.image.mean() for s in samples if s.label == k]) for k in range(3)]
        assert means[0] > means[1] > means[2]

    def test_too_small(self):
        with pytest.raises(ValueError):
            synth_fixture(size=16)


class TestFolders:
    def test_write_and_load(self, tmp_path):
        samples = synth_fixture(3, 3, 32, seed=1)
        write_dataset(samples, tmp_path)
        (tmp_path / "2-local" / "notes.txt").write_text("not an image")
        manifest = load_manifest(tmp_path)
        assert manifest.categories == ["0-global", "1-regional", "2-local"]
        assert manifest.counts == {"0-global": 3, "1-regional": 3, "2-local": 3}
        assert manifest.skipped == ["2-local/notes.txt"]
        loaded = load_samples(manifest, size=32)
        assert [s.label for s in loaded] == [s.label for s in samples]
        assert [s.box for s in loaded] == [s.box for s in samples]
        np.testing.assert_allclose(loaded[0].image, samples[0].image, atol=0.5 / 255 + 1e-6)
        assert json.loads(manifest.to_json())["counts"]["1-regional"] == 3

    def test_resized_on_load(self, tmp_path):
        write_dataset(synth_fixture(2, 2, 32, seed=1), tmp_path, ["a", "b"])
        loaded = load_samples(load_manifest(tmp_path), size=48)
        assert loaded[0].image.shape == (1, 48, 48)

    def test_needs_two_categories(self, tmp_path):
        (tmp_path / "only").mkdir()
        with pytest.raises(DatasetError):
            load_manifest(tmp_path)

    def test_empty_category(self, tmp_path):
        write_dataset(synth_fixture(2, 2, 32, seed=1), tmp_path, ["a", "b"])
        (tmp_path / "c").mkdir()
        with pytest.raises(DatasetError, match="'c'"):
            load_manifest(tmp_path)
