import struct

import numpy as np
import pytest

from oracles import rotate_reference
from rwta import data as D
from rwta.engine import SeededRng
from rwta.errors import ConfigError, ContractError, DataError, FormatError, ShapeError


@pytest.fixture
def idx_pair(tmp_path):
    images = np.array([[[0, 255], [128, 7]], [[1, 2], [3, 4]]], dtype=np.uint8)
    labels = np.array([3, 9], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    D.write_idx(images, labels, ip, lp)
    return images, labels, ip, lp


class TestIdx:
    def test_fixture_round_trip(self, idx_pair):
        images, labels, ip, lp = idx_pair
        ds = D.load_idx(ip, lp)
        assert ds.images.shape == (2, 1, 2, 2)
        np.testing.assert_array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), images)
        np.testing.assert_array_equal(ds.labels, labels)
        assert ds.class_count == 10

    def test_header_bytes(self, idx_pair):
        _, _, ip, lp = idx_pair
        assert ip.read_bytes()[:16] == struct.pack(">4I", 2051, 2, 2, 2)
        assert lp.read_bytes()[:8] == struct.pack(">2I", 2049, 2)

    def test_gzip_input(self, idx_pair, tmp_path):
        import gzip

        images, _, ip, lp = idx_pair
        gz = tmp_path / "img.idx.gz"
        gz.write_bytes(gzip.compress(ip.read_bytes()))
        np.testing.assert_array_equal(D.load_idx(gz, lp).images, D.load_idx(ip, lp).images)

    def test_bad_magic(self, idx_pair):
        _, _, ip, lp = idx_pair
        with pytest.raises(FormatError) as exc:
            D.load_idx(lp, lp)
        assert exc.value.offset == 0

    def test_truncated(self, idx_pair):
        _, _, ip, lp = idx_pair
        ip.write_bytes(ip.read_bytes()[:-1])
        with pytest.raises(FormatError, match="truncated"):
            D.load_idx(ip, lp)

    def test_count_mismatch_names_both_counts(self, idx_pair, tmp_path):
        images, _, ip, _ = idx_pair
        lp = tmp_path / "three.idx"
        lp.write_bytes(struct.pack(">2I", 2049, 3) + bytes([0, 1, 2]))
        with pytest.raises(FormatError, match=r"image count 2.*label count 3"):
            D.load_idx(ip, lp)


class TestRotation:
    def test_zero_step_repeats_frame(self):
        img = np.random.default_rng(0).random((5, 5))
        v = D.rotate_video(img, 4, 0.0)
        assert v.shape == (4, 1, 5, 5)
        for f in v:
            np.testing.assert_array_equal(f[0], img)

    def test_quarter_turn_is_a_permutation(self):
        img = np.arange(9.0).reshape(3, 3)
        out = D.rotate_image(img, 90)[0]
        np.testing.assert_array_equal(out, np.rot90(img))  # np.rot90 turns counter-clockwise

    def test_matches_inverse_map_oracle(self):
        img = np.random.default_rng(1).random((28, 28))
        v = D.rotate_video(img, 5, 18.0)
        for k in range(5):
            np.testing.assert_allclose(v[k, 0], rotate_reference(img, 18.0 * k), atol=1e-6)

    def test_rgb(self):
        img = np.random.default_rng(2).random((3, 6, 6))
        v = D.rotate_video(img, 2, 30)
        assert v.shape == (2, 3, 6, 6)
        np.testing.assert_allclose(v[1, 2], D.rotate_image(img[2], 30)[0])

    def test_full_turn_composition_returns_near_original(self):
        rng = np.random.default_rng(3)
        img = np.zeros((28, 28))
        img[6:22, 6:22] = rng.random((16, 16))
        from scipy.ndimage import gaussian_filter

        img = gaussian_filter(img, 1.0)
        steps = 5
        cur = img
        for _ in range(steps):
            cur = D.rotate_image(cur, 360 / steps)[0]
        interior = (slice(4, 24), slice(4, 24))
        assert np.mean(np.abs(cur[interior] - img[interior])) < 0.05

    def test_needs_two_frames(self):
        with pytest.raises(ContractError):
            D.rotate_video(np.zeros((3, 3)), 1, 10)


class TestScan:
    def test_nine_frames_vertical_first(self):
        img = np.random.default_rng(4).random((32, 32))
        v = D.scan_video(img, 16, 8)
        assert v.shape == (9, 1, 16, 16)
        np.testing.assert_array_equal(v[0, 0], img[0:16, 0:16])
        np.testing.assert_array_equal(v[1, 0], img[8:24, 0:16])
        np.testing.assert_array_equal(v[3, 0], img[0:16, 8:24])
        np.testing.assert_array_equal(v[8, 0], img[16:32, 16:32])

    def test_constant_image(self):
        v = D.scan_video(np.full((32, 32), 0.3))
        assert np.all(v == 0.3)

    @pytest.mark.parametrize("size,window,stride", [(32, 16, 8), (24, 8, 4), (20, 10, 5)])
    def test_frame_count(self, size, window, stride):
        v = D.scan_video(np.zeros((size, size)), window, stride)
        assert len(v) == ((size - window) // stride + 1) ** 2

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            D.scan_video(np.zeros((28, 28)), 16, 8)

    def test_pad_to(self):
        out = D.pad_to(np.ones((1, 1, 28, 28)), 32)
        assert out.shape == (1, 1, 32, 32)
        assert out.sum() == 28 * 28 and out[0, 0, 2, 2] == 1 and out[0, 0, 1, 1] == 0


class TestSynthesis:
    def test_labels_preserved(self):
        rng = np.random.default_rng(5)
        imgs = D.ImageDataset(rng.random((6, 1, 32, 32)), np.array([0, 1, 2, 3, 4, 5]), 6)
        for vids in (D.synthesize_rotations(imgs, 5, 18), D.synthesize_scans(imgs)):
            np.testing.assert_array_equal(vids.labels, imgs.labels)
            np.testing.assert_array_equal(vids.source_ids, np.arange(6))
        assert D.synthesize_scans(imgs).videos.shape == (6, 9, 1, 16, 16)


class TestZca:
    def test_identity_covariance(self):
        x = np.random.default_rng(6).normal(size=(200000, 3))
        t = D.zca_fit(x, 0.0)
        np.testing.assert_allclose(t.whiten, np.eye(3), atol=0.02)

    def test_closed_form_diagonal(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(4000, 2))
        z = (z - z.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(z.T, bias=True))).T
        x = z * np.sqrt([2.0, 0.5])  # covariance exactly diag(2, 0.5)
        t = D.zca_fit(x, 0.0)
        np.testing.assert_allclose(t.whiten, np.diag([1 / np.sqrt(2), np.sqrt(2)]), atol=1e-10)

    def test_fitted_set_is_white(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3000, 10)) @ rng.normal(size=(10, 10))
        t = D.zca_fit(x, 0.0)
        w = D.zca_apply(t, x)
        cov = (w - w.mean(0)).T @ (w - w.mean(0)) / len(w)
        np.testing.assert_allclose(cov, np.eye(10), atol=1e-6)
        np.testing.assert_allclose(t.whiten, t.whiten.T)

    def test_mean_maps_to_zero(self):
        x = np.random.default_rng(9).normal(size=(500, 4))
        t = D.zca_fit(x)
        np.testing.assert_allclose(D.zca_apply(t, t.mean[None]), 0, atol=1e-12)

    def test_identity_transform(self):
        t = D.ZcaTransform(np.zeros(4), np.eye(4), 0.0)
        x = np.random.default_rng(10).normal(size=(3, 1, 2, 2))
        np.testing.assert_array_equal(D.zca_apply(t, x), x)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(800, 6)) @ rng.normal(size=(6, 6))
        t = D.zca_fit(x, 0.0)
        back = D.zca_apply(t, x) @ np.linalg.inv(t.whiten) + t.mean
        np.testing.assert_allclose(back, x, atol=1e-8)

    def test_default_epsilon(self):
        x = np.random.default_rng(12).normal(size=(100, 4)) * [1, 2, 3, 4]
        t = D.zca_fit(x)
        lam = np.linalg.eigvalsh(np.cov(x.T, bias=True))
        assert t.epsilon == pytest.approx(0.01 * lam.mean())

    def test_frame_layout(self):
        rng = np.random.default_rng(13)
        frames = rng.random((50, 9, 1, 4, 4))
        t = D.zca_fit(frames.reshape(-1, 16), 0.1)
        out = D.zca_apply(t, frames)
        assert out.shape == frames.shape
        np.testing.assert_allclose(out[3, 2, 0].reshape(-1), (frames[3, 2, 0].reshape(-1) - t.mean) @ t.whiten)

    def test_dimension_mismatch(self):
        t = D.zca_fit(np.random.default_rng(14).normal(size=(50, 4)))
        with pytest.raises(ShapeError):
            D.zca_apply(t, np.zeros((2, 5)))

    def test_non_finite(self):
        with pytest.raises(DataError):
            D.zca_fit(np.array([[np.nan, 1.0], [1.0, 2.0], [0.0, 0.0]]))


def small_videos(n=10, frames=3):
    rng = np.random.default_rng(15)
    return D.VideoDataset(rng.random((n, frames, 1, 4, 4)), np.arange(n) % 3, 3)


class TestBatchIter:
    def test_sizes(self):
        assert [len(b.indices) for b in D.batch_iter(small_videos(), 3)] == [3, 3, 3, 1]

    def test_seeded_order(self):
        a = [b.indices for b in D.batch_iter(small_videos(), 4, True, SeededRng(1))]
        b = [b.indices for b in D.batch_iter(small_videos(), 4, True, SeededRng(1))]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_partition(self):
        idx = np.concatenate([b.indices for b in D.batch_iter(small_videos(), 3, True, SeededRng(2))])
        assert sorted(idx.tolist()) == list(range(10))

    def test_batch_contents(self):
        ds = small_videos()
        for b in D.batch_iter(ds, 4, True, SeededRng(3)):
            np.testing.assert_array_equal(b.videos, ds.videos[b.indices])
            assert b.time_major().shape[:2] == (3, len(b.indices))

    def test_invalid_size(self):
        with pytest.raises(ContractError):
            next(D.batch_iter(small_videos(), 0))


class TestContainer:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, tmp_path, dtype):
        ds = small_videos().astype(dtype)
        ds.meta = {"mode": "rotate", "frames": 3, "step": 18.0}
        D.save_dataset(ds, tmp_path / "v.rwd")
        back = D.load_dataset(tmp_path / "v.rwd")
        assert back.videos.dtype == dtype
        np.testing.assert_array_equal(back.videos, ds.videos)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.source_ids, ds.source_ids)
        assert back.meta == ds.meta and back.class_count == 3

    def test_header_layout(self, tmp_path):
        ds = small_videos(n=2, frames=5)
        D.save_dataset(ds, tmp_path / "v.rwd")
        raw = (tmp_path / "v.rwd").read_bytes()
        magic, version, precision, n, t, c, h, w, k, _, lab, meta = struct.unpack("<8sIIQIIIIIIQQ", raw[:64])
        assert (magic, version, precision, n, t, c, h, w, k) == (b"RWTADSET", 1, 64, 2, 5, 1, 4, 4, 3)
        assert lab == 64 + 2 * 5 * 16 * 8 and meta == lab + 2 * 12

    def test_truncated(self, tmp_path):
        D.save_dataset(small_videos(), tmp_path / "v.rwd")
        p = tmp_path / "v.rwd"
        p.write_bytes(p.read_bytes()[:100])
        with pytest.raises(FormatError):
            D.load_dataset(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.rwd"
        p.write_bytes(b"\0" * 80)
        with pytest.raises(FormatError):
            D.load_dataset(p)


class TestDatasetTypes:
    def test_label_range(self):
        with pytest.raises(DataError):
            D.ImageDataset(np.zeros((2, 1, 3, 3)), [0, 5], 3)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            D.VideoDataset(np.zeros((2, 3, 1, 3, 3)), [0], 2)
