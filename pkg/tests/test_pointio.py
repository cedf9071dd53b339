import numpy as np
import pytest

from fusioncal.cloudmap import PointCloud
from fusioncal.errors import CloudFormatError
from fusioncal.pointio import read_cloud, read_pcd, read_ply, write_cloud, write_pcd, write_ply


@pytest.fixture
def cloud(rng):
    return PointCloud(rng.normal(size=(50, 3)), rng.uniform(0, 255, 50).astype(np.float32), rng.uniform(0, 1, 50))


def assert_same(a, b):
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.intensities, b.intensities)
    assert np.array_equal(a.timestamps, b.timestamps)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(cloud, tmp_path, binary):
    path = tmp_path / "c.ply"
    write_ply(cloud, path, binary=binary)
    assert_same(read_ply(path), cloud)


def test_pcd_round_trip(cloud, tmp_path):
    path = tmp_path / "c.pcd"
    write_pcd(cloud, path)
    assert_same(read_pcd(path), cloud)


def test_dispatch_by_extension(cloud, tmp_path):
    for name in ("a.ply", "a.pcd"):
        write_cloud(cloud, tmp_path / name)
        assert len(read_cloud(tmp_path / name)) == 50
    with pytest.raises(CloudFormatError):
        read_cloud(tmp_path / "a.xyz")


def test_reflectivity_alias_and_float_types(tmp_path):
    path = tmp_path / "r.ply"
    path.write_text(
        "ply\nformat ascii 1.0\ncomment sensor\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\nproperty uchar reflectivity\n"
        "element face 0\nproperty list uchar int vertex_indices\nend_header\n"
        "1 2 3 10\n4 5 6 20\n"
    )
    c = read_ply(path)
    assert c.points.tolist() == [[1, 2, 3], [4, 5, 6]]
    assert c.intensities.tolist() == [10, 20]
    assert c.timestamps is None


def test_missing_intensity_is_rejected(tmp_path):
    path = tmp_path / "m.pcd"
    path.write_text("FIELDS x y z\nDATA ascii\n1 2 3\n")
    with pytest.raises(CloudFormatError, match="intensity"):
        read_pcd(path)


def test_truncated_binary_ply(cloud, tmp_path):
    path = tmp_path / "t.ply"
    write_ply(cloud, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CloudFormatError, match="truncated"):
        read_ply(path)


def test_binary_pcd_unsupported(tmp_path):
    path = tmp_path / "b.pcd"
    path.write_bytes(b"FIELDS x y z intensity\nDATA binary\n\x00\x00")
    with pytest.raises(CloudFormatError):
        read_pcd(path)
