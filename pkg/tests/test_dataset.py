import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicepath.dataset import (
    ChecksumMismatch,
    MaskEmpty,
    NoContourFound,
    NormalizationParams,
    SchemaVersionMismatch,
    denormalize,
    normalize,
    normalize_arrays,
    read_records,
    silhouette_from_photo,
    write_records,
)
from slicepath.gcode import Keypoint, LayerToolpath
from slicepath.geometry import ShapeSpec, rasterize, synth_sample


def layer_from_points(points, z=0.2):
    return LayerToolpath(z, tuple(Keypoint(x, y, e) for x, y, e in points))


def random_layer(rng, n=None):
    n = n or int(rng.integers(2, 120))
    xy = rng.uniform(-40, 180, (n, 2))
    e = np.cumsum(rng.uniform(0, 0.4, n))
    return layer_from_points(np.column_stack([xy, e]))


class TestNormalize:
    def test_square_corners_map_to_unit_box(self):
        layer = layer_from_points([(0, 0, 0), (10, 0, 1), (10, 10, 2), (0, 10, 3)])
        record = normalize(layer, n_max=8)
        assert record.norm.xy_mid == (5.0, 5.0)
        assert record.norm.xy_scale == 5.0
        corners = record.x0[:4, :2]
        assert np.allclose(np.abs(corners), 1.0)

    def test_aspect_ratio_preserved(self):
        layer = layer_from_points([(0, 0, 0), (10, 0, 1), (10, 5, 2), (0, 5, 3)])
        record = normalize(layer, n_max=8)
        ys = record.x0[:4, 1]
        assert ys.min() == pytest.approx(-0.5)
        assert ys.max() == pytest.approx(0.5)

    def test_constant_e_is_degenerate(self):
        layer = layer_from_points([(0, 0, 1.5), (5, 0, 1.5), (5, 5, 1.5)])
        record = normalize(layer, n_max=4)
        assert record.norm.degenerate_e
        assert np.all(record.x0[:3, 2] == 0.0)

    def test_padding_and_mask(self):
        layer = layer_from_points([(0, 0, 0), (1, 0, 1)])
        record = normalize(layer, n_max=6)
        assert record.true_len == 2
        assert record.mask.tolist() == [1, 1, 0, 0, 0, 0]
        assert np.all(record.x0[2:] == 0.0)

    def test_truncation_keeps_prefix(self):
        points = [(float(i), 0.0, float(i)) for i in range(10)]
        record = normalize(layer_from_points(points), n_max=4)
        assert record.true_len == 4
        # first 4 keypoints span x in [0, 3]; midpoint 1.5, scale 1.5
        assert record.norm.xy_mid[0] == pytest.approx(1.5)
        assert record.norm.xy_scale == pytest.approx(1.5)


class TestDenormalize:
    def test_exact_inverse(self, rng):
        for _ in range(20):
            layer = random_layer(rng)
            points = np.array([(p.x, p.y, p.e) for p in layer.keypoints])
            normalized, params = normalize_arrays(points)
            back = denormalize(normalized, np.ones(len(points)), params)
            recovered = np.array([(p.x, p.y, p.e) for p in back])
            assert np.allclose(recovered, points, rtol=1e-9, atol=1e-12)

    def test_target_scale_doubles_distances(self):
        layer = layer_from_points([(0, 0, 0), (10, 0, 1), (10, 10, 2)])
        record = normalize(layer, n_max=4)
        base = denormalize(record.x0, record.mask, record.norm)
        doubled = denormalize(
            record.x0, record.mask, record.norm, target_scale_mm=4 * record.norm.xy_scale
        )
        for i in range(1, 3):
            d0 = np.hypot(base[i].x - base[0].x, base[i].y - base[0].y)
            d1 = np.hypot(doubled[i].x - doubled[0].x, doubled[i].y - doubled[0].y)
            assert d1 == pytest.approx(2 * d0, rel=1e-9)

    def test_extrusion_multiplier_doubles_deltas(self):
        layer = layer_from_points([(0, 0, 1.0), (1, 0, 1.5), (2, 0, 2.5), (3, 0, 2.5)])
        record = normalize(layer, n_max=4)
        base = denormalize(record.x0, record.mask, record.norm)
        scaled = denormalize(record.x0, record.mask, record.norm, extrusion_multiplier=2.0)
        base_deltas = np.diff([p.e for p in base])
        scaled_deltas = np.diff([p.e for p in scaled])
        assert np.allclose(scaled_deltas, 2 * base_deltas)
        assert scaled[0].e == pytest.approx(base[0].e)
        es = [p.e for p in scaled]
        assert all(b >= a for a, b in zip(es, es[1:]))

    def test_degenerate_e_round_trip(self):
        layer = layer_from_points([(0, 0, 2.0), (5, 0, 2.0)])
        record = normalize(layer, n_max=4)
        back = denormalize(record.x0, record.mask, record.norm)
        assert [p.e for p in back] == [2.0, 2.0]

    def test_mask_empty(self):
        record = normalize(layer_from_points([(0, 0, 0), (1, 1, 1)]), n_max=4)
        with pytest.raises(MaskEmpty):
            denormalize(record.x0, np.zeros(4), record.norm)


coord = st.floats(min_value=-100, max_value=100, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(coord, coord, st.floats(0, 50)), min_size=1, max_size=40))
def test_normalize_bounds_and_round_trip(points):
    arr = np.asarray(points, dtype=float)
    normalized, params = normalize_arrays(arr)
    assert np.all(np.abs(normalized) <= 1 + 1e-12)
    back = denormalize(normalized, np.ones(len(arr)), params)
    recovered = np.array([(p.x, p.y, p.e) for p in back])
    if not params.degenerate_e:
        assert np.allclose(recovered, arr, rtol=1e-9, atol=1e-9)
    else:
        assert np.allclose(recovered[:, :2], arr[:, :2], rtol=1e-9, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(coord, coord, st.floats(0, 50)), min_size=2, max_size=40))
def test_aspect_ratio_preserved_property(points):
    arr = np.asarray(points, dtype=float)
    w = arr[:, 0].max() - arr[:, 0].min()
    h = arr[:, 1].max() - arr[:, 1].min()
    if w <= 1e-9 or h <= 1e-9:
        return
    normalized, _ = normalize_arrays(arr)
    wn = normalized[:, 0].max() - normalized[:, 0].min()
    hn = normalized[:, 1].max() - normalized[:, 1].min()
    assert wn / hn == pytest.approx(w / h, rel=1e-9)


class TestSilhouette:
    @staticmethod
    def disk_image(size=512, radius_frac=0.35, value=1.0, background=0.0):
        yy, xx = np.mgrid[0:size, 0:size]
        r = size * radius_frac
        disk = (xx - size / 2) ** 2 + (yy - size / 2) ** 2 <= r**2
        return np.where(disk, value, background)

    @staticmethod
    def iou(a, b):
        a, b = a > 0.5, b > 0.5
        union = np.logical_or(a, b).sum()
        return np.logical_and(a, b).sum() / union if union else 1.0

    def test_binary_disk_recovered(self):
        photo = self.disk_image()
        silhouette = silhouette_from_photo(photo)
        reference = silhouette_from_photo(self.disk_image())  # determinism sanity
        assert self.iou(silhouette.pixels, reference.pixels) == 1.0
        # compare against the ideal reframed disk
        yy, xx = np.mgrid[0:224, 0:224]
        ideal = (xx - 111.5) ** 2 + (yy - 111.5) ** 2 <= (0.45 * 224) ** 2
        assert self.iou(silhouette.pixels, ideal) >= 0.98

    def test_uniform_image_rejected(self):
        with pytest.raises(NoContourFound):
            silhouette_from_photo(np.full((256, 256), 0.5))

    def test_noisy_disk_close_to_clean(self, rng):
        clean = silhouette_from_photo(self.disk_image())
        noisy_input = self.disk_image() + rng.normal(0, 0.05, (512, 512))
        noisy = silhouette_from_photo(noisy_input)
        assert self.iou(noisy.pixels, clean.pixels) >= 0.9

    def test_idempotent_on_own_output(self):
        # asymmetric blob: offset ellipse
        yy, xx = np.mgrid[0:400, 0:400]
        blob = (((xx - 230) / 120.0) ** 2 + ((yy - 180) / 70.0) ** 2) <= 1.0
        first = silhouette_from_photo(blob.astype(float))
        second = silhouette_from_photo(first.pixels)
        assert self.iou(second.pixels, first.pixels) >= 0.99


class TestPersistence:
    @staticmethod
    def synthetic_records(count=10, n_max=64):
        records = []
        for i in range(count):
            contour, toolpath = synth_sample(ShapeSpec("square", density=0.8), rng_seed=i)
            records.append(normalize(toolpath, n_max=n_max).with_image(rasterize(contour)))
        return records

    def test_empty_dataset_header_only(self, tmp_path):
        manifest = write_records([], tmp_path / "data")
        lines = manifest.read_text().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["count"] == 0
        assert read_records(manifest) == []

    def test_round_trip_bit_exact(self, tmp_path):
        records = self.synthetic_records()
        write_records(records, tmp_path / "data")
        back = read_records(tmp_path / "data")
        assert len(back) == len(records)
        for a, b in zip(records, back):
            assert np.array_equal(a.x0, b.x0) and a.x0.dtype == b.x0.dtype
            assert np.array_equal(a.mask, b.mask)
            assert a.norm == b.norm
            assert a.true_len == b.true_len
            assert np.array_equal(a.image.pixels, b.image.pixels)

    def test_unknown_schema_version(self, tmp_path):
        write_records(self.synthetic_records(2), tmp_path / "data")
        manifest = tmp_path / "data" / "manifest.jsonl"
        lines = manifest.read_text().splitlines()
        header = json.loads(lines[0])
        header["schema_version"] = 99
        manifest.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
        with pytest.raises(SchemaVersionMismatch):
            read_records(tmp_path / "data")

    def test_checksum_mismatch(self, tmp_path):
        write_records(self.synthetic_records(2), tmp_path / "data")
        blob = tmp_path / "data" / "r00000_x0.f32"
        data = bytearray(blob.read_bytes())
        data[0] ^= 0xFF
        blob.write_bytes(bytes(data))
        with pytest.raises(ChecksumMismatch):
            read_records(tmp_path / "data")


def test_norm_params_validation():
    with pytest.raises(ValueError):
        NormalizationParams((0, 0), 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        NormalizationParams((0, 0), 1.0, 2.0, 1.0)
