import struct

import numpy as np
import pytest

from conftest import random_batch, random_calib
from fusionpaint import fileio
from fusionpaint.errors import DataError
from fusionpaint.fusion import init_params
from fusionpaint.geometry import PointCloud
from fusionpaint.painting import Box3D, SemanticMask


def test_points_round_trip(rng, tmp_path):
    xyz = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
    for inten in (None, rng.uniform(size=50).astype(np.float32)):
        fileio.write_points(tmp_path / "p.bin", PointCloud(xyz, inten))
        back = fileio.read_points(tmp_path / "p.bin")
        np.testing.assert_array_equal(back.xyz, xyz)
        if inten is None:
            assert back.intensity is None
        else:
            np.testing.assert_array_equal(back.intensity, inten)
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:4] == b"FPPC" and struct.unpack("<IB", raw[4:9]) == (50, 1)
    assert len(raw) == 9 + 50 * 4 * 4


def test_labels_scores_round_trip(rng, tmp_path):
    labels = rng.integers(0, 11, 40)
    fileio.write_labels(tmp_path / "l.bin", labels)
    np.testing.assert_array_equal(fileio.read_labels(tmp_path / "l.bin"), labels)
    scores = rng.uniform(size=(40, 11)).astype(np.float32)
    fileio.write_scores(tmp_path / "s.fpsc", scores)
    np.testing.assert_array_equal(fileio.read_scores(tmp_path / "s.fpsc"), scores)


def test_voxels_round_trip(rng, tmp_path):
    b = random_batch(rng)
    fileio.write_voxels(tmp_path / "v.fpvx", b)
    back = fileio.read_voxels(tmp_path / "v.fpvx")
    np.testing.assert_array_equal(back["coords"], b.coords)
    np.testing.assert_array_equal(back["counts"], b.counts)
    np.testing.assert_array_equal(back["features"], b.features)


def test_painted_round_trip(rng, tmp_path):
    rec = rng.normal(size=(7, 9)).astype(np.float32)
    fileio.write_painted(tmp_path / "x.fppt", rec, 3)
    back, m = fileio.read_painted(tmp_path / "x.fppt")
    assert m == 3 and back.tobytes() == rec.tobytes()


def test_checkpoint_round_trip(tmp_path):
    params = init_params(4, 8, 12, seed=1, hidden=6)
    fileio.write_checkpoint(tmp_path / "c.fpnn", params.state())
    back = fileio.read_checkpoint(tmp_path / "c.fpnn")
    assert set(back) == set(params.state())
    for k, v in params.state().items():
        np.testing.assert_array_equal(back[k], v)
    assert (tmp_path / "c.fpnn").read_bytes()[:4] == b"FPNN"


def test_mask_round_trip_and_comments(rng, tmp_path):
    mask = SemanticMask(rng.integers(0, 5, (6, 9)), 5)
    fileio.write_mask(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(fileio.read_mask(tmp_path / "m.pgm", 5).data, mask.data)
    body = mask.data.astype(np.uint8).tobytes()
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n9 6\n255\n" + body)
    np.testing.assert_array_equal(fileio.read_mask(tmp_path / "c.pgm", 5).data, mask.data)
    with pytest.raises(DataError, match="only 3 classes"):
        fileio.read_mask(tmp_path / "m.pgm", 3)


def test_json_formats_round_trip(rng, tmp_path):
    calib = random_calib(rng)
    fileio.write_calib(tmp_path / "calib.json", calib)
    back = fileio.read_calib(tmp_path / "calib.json")
    np.testing.assert_array_equal(back.extrinsic, calib.extrinsic)
    assert (back.fx, back.width) == (calib.fx, calib.width)
    boxes = [Box3D((1, 2, 0.5), (4, 2, 1.5), 0.3, 2), Box3D((-3, 1, 1), (1, 1, 2), -1.0, 5)]
    fileio.write_boxes(tmp_path / "boxes.json", boxes)
    again = fileio.read_boxes(tmp_path / "boxes.json")
    assert [(b.center, b.size, b.yaw, b.class_id) for b in again] == \
        [(b.center, b.size, b.yaw, b.class_id) for b in boxes]


@pytest.mark.parametrize("reader,name", [
    (fileio.read_points, "p.bin"), (fileio.read_labels, "l.bin"), (fileio.read_scores, "s.fpsc"),
    (fileio.read_voxels, "v.fpvx"), (fileio.read_painted, "x.fppt"), (fileio.read_checkpoint, "c.fpnn"),
])
def test_bad_magic_reports_offset(reader, name, tmp_path):
    (tmp_path / name).write_bytes(b"NOPE" + bytes(32))
    with pytest.raises(DataError, match="bad magic .* at byte offset 0"):
        reader(tmp_path / name)


def test_truncation_and_trailing_bytes(rng, tmp_path):
    fileio.write_scores(tmp_path / "s.fpsc", rng.uniform(size=(4, 3)))
    raw = (tmp_path / "s.fpsc").read_bytes()
    (tmp_path / "t.fpsc").write_bytes(raw[:-2])
    with pytest.raises(DataError, match="truncated .* at byte offset 16"):
        fileio.read_scores(tmp_path / "t.fpsc")
    (tmp_path / "u.fpsc").write_bytes(raw + b"\0")
    with pytest.raises(DataError, match=f"1 trailing bytes at byte offset {len(raw)}"):
        fileio.read_scores(tmp_path / "u.fpsc")


def test_bad_pgm_and_json(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P2\n2 2\n255\n0000")
    with pytest.raises(DataError, match="byte offset 0"):
        fileio.read_mask(tmp_path / "m.pgm", 3)
    (tmp_path / "b.json").write_text('[{"center": ')
    with pytest.raises(DataError, match="byte offset"):
        fileio.read_boxes(tmp_path / "b.json")
    with pytest.raises(DataError, match="cannot read"):
        fileio.read_points(tmp_path / "missing.bin")
