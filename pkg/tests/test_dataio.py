"""Synthetic generator determinism, binary round trips, corruption handling,
resampling, and the OFF importer."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from pointmt.dataio import (
    Dataset,
    ParseError,
    SHAPE_CLASSES,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    read_off,
    resample,
    sample_mesh_surface,
    save_dataset,
)
from pointmt.geometry import PointCloud


def _small_cfg(**kw):
    base = dict(classes=("sphere", "cube", "torus"), samples_per_class=4,
                points_per_cloud=32, noise_sigma=0.02, seed=9)
    base.update(kw)
    return SynthConfig(**base)


# generation --------------------------------------------------------------------


def test_generate_deterministic():
    a = generate_synthetic(_small_cfg())
    b = generate_synthetic(_small_cfg())
    assert len(a) == len(b) == 12
    for sa, sb in zip(a.samples, b.samples):
        npt.assert_array_equal(sa.coords, sb.coords)
        assert sa.label == sb.label


def test_generate_sphere_noise_free_unit_norms():
    cfg = _small_cfg(classes=("sphere", "cube"), noise_sigma=0.0, points_per_cloud=128)
    ds = generate_synthetic(cfg)
    for s in ds.samples:
        if ds.class_names[s.label] != "sphere":
            continue
        norms = np.linalg.norm(s.coords.astype(np.float64), axis=1)
        npt.assert_allclose(norms, np.ones_like(norms), atol=1e-6)


def test_generate_all_classes_normalized():
    cfg = SynthConfig(samples_per_class=2, points_per_cloud=64, seed=4)
    ds = generate_synthetic(cfg)
    assert len(ds) == 2 * len(SHAPE_CLASSES)
    for s in ds.samples:
        assert np.abs(s.coords.astype(np.float64).mean(axis=0)).max() < 1e-5
        assert abs(np.linalg.norm(s.coords.astype(np.float64), axis=1).max() - 1.0) < 1e-5


def test_linear_probe_beats_chance():
    """Nearest-centroid over simple radial statistics must beat 1/8 chance."""
    train = generate_synthetic(SynthConfig(samples_per_class=16, points_per_cloud=96, seed=21))
    test = generate_synthetic(SynthConfig(samples_per_class=8, points_per_cloud=96, seed=22),
                              split="test")

    def featurize(cloud):
        r = np.linalg.norm(cloud.coords, axis=1)
        qs = np.quantile(r, [0.1, 0.25, 0.5, 0.75, 0.9])
        return np.concatenate([qs, [r.mean(), r.std()]])

    x_train = np.stack([featurize(s) for s in train.samples])
    y_train = train.labels()
    centroids = np.stack([x_train[y_train == c].mean(axis=0) for c in range(8)])
    x_test = np.stack([featurize(s) for s in test.samples])
    preds = np.argmin(((x_test[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
    acc = float((preds == test.labels()).mean())
    assert acc > 0.25  # chance is 0.125


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(classes=("sphere",))
    with pytest.raises(ValueError):
        SynthConfig(classes=("sphere", "pyramid"))
    with pytest.raises(ValueError):
        SynthConfig(points_per_cloud=8)


# binary round trip ---------------------------------------------------------------


def test_round_trip_bit_exact(tmp_path):
    ds = generate_synthetic(_small_cfg())
    path = tmp_path / "data.pmtc"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.class_names == ds.class_names
    assert len(back) == len(ds)
    for a, b in zip(back.samples, ds.samples):
        assert a.label == b.label
        npt.assert_array_equal(a.coords, b.coords)
    # a second write of the loaded dataset produces identical bytes
    path2 = tmp_path / "data2.pmtc"
    save_dataset(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_hand_built_two_point_file(tmp_path):
    buf = b"PMTC"
    buf += struct.pack("<I", 1)          # version
    buf += struct.pack("<I", 2)          # two classes
    for name in (b"alpha", b"beta"):
        buf += struct.pack("<I", len(name)) + name
    buf += struct.pack("<I", 1)          # one sample
    buf += struct.pack("<I", 1)          # label "beta"
    buf += struct.pack("<I", 2)          # two points
    coords = np.array([[-1, 0, 0], [1, 0, 0]], dtype="<f4")
    buf += coords.tobytes()
    path = tmp_path / "hand.pmtc"
    path.write_bytes(buf)
    ds = load_dataset(path)
    assert ds.class_names == ["alpha", "beta"]
    assert ds.samples[0].label == 1
    npt.assert_array_equal(ds.samples[0].coords, coords)


def test_truncations_always_parse_error(tmp_path):
    ds = generate_synthetic(_small_cfg())
    path = tmp_path / "data.pmtc"
    save_dataset(ds, path)
    raw = path.read_bytes()
    rng = np.random.default_rng(0)
    for cut in rng.integers(0, len(raw) - 1, size=40):
        (tmp_path / "cut.pmtc").write_bytes(raw[:int(cut)])
        with pytest.raises(ParseError):
            load_dataset(tmp_path / "cut.pmtc")


def test_trailing_bytes_rejected(tmp_path):
    ds = generate_synthetic(_small_cfg())
    path = tmp_path / "data.pmtc"
    save_dataset(ds, path)
    (tmp_path / "pad.pmtc").write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ParseError):
        load_dataset(tmp_path / "pad.pmtc")


def test_bad_magic_version_label(tmp_path):
    ds = generate_synthetic(_small_cfg())
    path = tmp_path / "data.pmtc"
    save_dataset(ds, path)
    raw = bytearray(path.read_bytes())

    bad_magic = bytearray(raw)
    bad_magic[0] = ord("X")
    bad_version = bytearray(raw)
    bad_version[4] = 9
    bad_label = bytearray(raw)
    # label of sample 0 sits right after header, class names, and sample count
    off = 12
    for name in ds.class_names:
        off += 4 + len(name.encode())
    off += 4
    struct.pack_into("<I", bad_label, off, 999)

    for payload in (bad_magic, bad_version, bad_label):
        (tmp_path / "bad.pmtc").write_bytes(bytes(payload))
        with pytest.raises(ParseError):
            load_dataset(tmp_path / "bad.pmtc")


def test_nonfinite_coordinates_rejected(tmp_path):
    ds = Dataset([PointCloud(np.array([[0.0, 0, 0], [1, 0, 0]], dtype=np.float32), label=0)],
                 ["only"], split="train")
    path = tmp_path / "data.pmtc"
    save_dataset(ds, path)
    raw = bytearray(path.read_bytes())
    # overwrite the first coordinate float with NaN
    struct.pack_into("<f", raw, len(raw) - 24, float("nan"))
    (tmp_path / "nan.pmtc").write_bytes(bytes(raw))
    with pytest.raises(ParseError):
        load_dataset(tmp_path / "nan.pmtc")


def test_loader_normalizes_foreign_clouds(tmp_path):
    # a hand-written file with unnormalized coordinates gets normalized on load
    coords = np.array([[10, 0, 0], [12, 0, 0], [14, 0, 0]], dtype="<f4")
    buf = b"PMTC" + struct.pack("<I", 1) + struct.pack("<I", 1)
    buf += struct.pack("<I", 1) + b"c"
    buf += struct.pack("<I", 1) + struct.pack("<I", 0) + struct.pack("<I", 3)
    buf += coords.tobytes()
    path = tmp_path / "raw.pmtc"
    path.write_bytes(buf)
    ds = load_dataset(path)
    got = ds.samples[0].coords.astype(np.float64)
    assert np.abs(got.mean(axis=0)).max() < 1e-6
    assert abs(np.linalg.norm(got, axis=1).max() - 1.0) < 1e-6


# resample -----------------------------------------------------------------------


def test_resample_identity_and_singleton():
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.standard_normal((20, 3)), label=1)
    same = resample(cloud, 20)
    assert set(map(tuple, same.coords)) == set(map(tuple, cloud.coords))
    one = resample(cloud, 1)
    from pointmt.geometry import farthest_point_sample

    seed_idx = farthest_point_sample(cloud.coords, 1)[0]
    npt.assert_array_equal(one.coords[0], cloud.coords[seed_idx])


def test_resample_subset_membership():
    rng = np.random.default_rng(4)
    cloud = PointCloud(rng.standard_normal((40, 3)))
    half = resample(cloud, 20)
    original = set(map(tuple, cloud.coords))
    assert all(tuple(row) in original for row in half.coords)
    assert len(set(map(tuple, half.coords))) == 20  # no duplicates when N >= n


def test_resample_upsamples_with_replacement():
    rng = np.random.default_rng(5)
    cloud = PointCloud(rng.standard_normal((6, 3)))
    big = resample(cloud, 15, seed=1)
    assert big.coords.shape == (15, 3)
    original = set(map(tuple, cloud.coords))
    assert all(tuple(row) in original for row in big.coords)
    again = resample(cloud, 15, seed=1)
    npt.assert_array_equal(big.coords, again.coords)


# OFF import -----------------------------------------------------------------------


OFF_TETRA = """OFF
4 4 6
0 0 0
1 0 0
0 1 0
0 0 1
3 0 1 2
3 0 1 3
3 0 2 3
3 1 2 3
"""


def test_read_off_and_sample(tmp_path):
    path = tmp_path / "tetra.off"
    path.write_text(OFF_TETRA)
    verts, faces = read_off(path)
    assert verts.shape == (4, 3)
    assert faces.shape == (4, 3)
    pts = sample_mesh_surface(verts, faces, 256, seed=0)
    assert pts.shape == (256, 3)
    # every sample lies on one of the four triangle planes
    assert np.isfinite(pts).all()


def test_read_off_rejects_garbage(tmp_path):
    path = tmp_path / "bad.off"
    path.write_text("not an off file\n1 2 3\n")
    with pytest.raises(ParseError):
        read_off(path)


def test_import_off_directory(tmp_path):
    from pointmt.dataio import import_off_directory

    for cls in ("thing", "widget"):
        d = tmp_path / cls / "train"
        d.mkdir(parents=True)
        (d / "s0.off").write_text(OFF_TETRA)
    ds = import_off_directory(tmp_path, n_points=64, split="train")
    assert len(ds) == 2
    assert ds.class_names == ["thing", "widget"]
    for s in ds.samples:
        assert s.coords.shape == (64, 3)
        assert abs(np.linalg.norm(s.coords.astype(np.float64), axis=1).max() - 1.0) < 1e-5
