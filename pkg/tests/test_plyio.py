import numpy as np
import pytest

from pseg import plyio, synth
from pseg.errors import FormatError
from pseg.geom import LabeledPointCloud, PointCloud


def sample_cloud(n=50, seed=0):
    spec = synth.random_specs(1, seed, points_per_cloud=max(n, 64))[0]
    return synth.generate_workpiece(spec, seed).take(np.arange(n))


def test_round_trip_float32_exact(tmp_path):
    lc = sample_cloud()
    plyio.write_ply(tmp_path / "a.ply", lc)
    back = plyio.read_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(back.cloud.xyz.astype(np.float32), lc.cloud.xyz.astype(np.float32))
    np.testing.assert_array_equal(back.labels, lc.labels)
    assert np.abs(np.linalg.norm(back.cloud.normals, axis=1) - 1).max() <= 1e-12
    plyio.write_ply(tmp_path / "b.ply", back)
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_defaults_for_missing_properties():
    text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n" \
           "end_header\n1 2 3\n4 5 6\n"
    lc = plyio.parse_ply(text)
    assert lc.labels.tolist() == [0, 0]
    assert lc.cloud.missing_normals.all()


def test_extra_elements_and_comments():
    text = ("ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 1\nproperty double x\nproperty double y\n"
            "property double z\nproperty uchar label\nelement face 0\nproperty list uchar int vertex_indices\n"
            "end_header\n0.5 0 0 3\n")
    lc = plyio.parse_ply(text)
    assert lc.labels.tolist() == [3] and lc.cloud.xyz[0, 0] == 0.5


@pytest.mark.parametrize("text", [
    "",
    "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n",
    "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n",
    "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n",
    "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\na b c\n",
    "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n",
])
def test_malformed_files_rejected(text):
    with pytest.raises(FormatError):
        plyio.parse_ply(text)


def test_corpus_round_trip(tmp_path):
    corpus = [sample_cloud(40, s) for s in range(3)]
    for i, lc in enumerate(corpus):
        lc.name = f"c{i}"
    doc = plyio.save_corpus(tmp_path, corpus, {"seed": 7})
    assert doc["seed"] == 7 and [e["file"] for e in doc["clouds"]] == ["c0.ply", "c1.ply", "c2.ply"]
    back = plyio.load_corpus(tmp_path)
    assert [lc.name for lc in back] == ["c0", "c1", "c2"]
    np.testing.assert_array_equal(back[1].labels, corpus[1].labels)
    with pytest.raises(FormatError):
        plyio.load_corpus(tmp_path / "missing")


def test_unlabeled_write():
    lc = LabeledPointCloud(PointCloud([[0.0, 0, 0]], [[0, 0, 1.0]]), [2])
    assert "label" not in plyio.format_ply(lc, with_labels=False)
