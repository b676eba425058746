import numpy as np
import pytest

from pseg import diffcore as dc
from pseg import fen
from pseg.errors import ParameterError, ShapeError
from pseg.geom import PointCloud
from pseg.gradsuite import TINY_FEN, extractor_case, toy_cloud


def rot_z(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


@pytest.fixture
def params():
    return fen.init_params(TINY_FEN, 3)


def test_tnet_identity_at_init(params):
    np.testing.assert_array_equal(fen.tnet_predict(toy_cloud(20, 0).cloud, params), np.eye(3))


def test_tnet_permutation_invariant(params, rng):
    params.tensors["tnet.out.w"] = rng.normal(0, 0.3, size=params.tensors["tnet.out.w"].shape)
    cloud = toy_cloud(30, 1).cloud
    perm = rng.permutation(30)
    a = fen.tnet_predict(cloud, params)
    b = fen.tnet_predict(PointCloud(cloud.xyz[perm], cloud.normals[perm]), params)
    assert np.abs(a - b).max() <= 1e-12
    assert np.isfinite(a).all() and np.abs(a - np.eye(3)).max() > 0


def test_apply_transform_examples():
    cloud = PointCloud([[1.0, 0, 0], [0.3, -0.2, 0.5]], [[1.0, 0, 0], [0, 0, 0]])
    same = fen.apply_transform(cloud, np.eye(3))
    np.testing.assert_array_equal(same.xyz, cloud.xyz)
    np.testing.assert_array_equal(same.normals, cloud.normals)
    scaled = fen.apply_transform(cloud, 2 * np.eye(3))
    np.testing.assert_array_equal(scaled.xyz[0], [2, 0, 0])
    np.testing.assert_array_equal(scaled.normals, [[1, 0, 0], [0, 0, 0]])
    turned = fen.apply_transform(cloud, rot_z(np.pi / 2))
    assert np.abs(turned.xyz[0] - [0, 1, 0]).max() <= 1e-12
    with pytest.raises(ParameterError):
        fen.apply_transform(cloud, np.full((3, 3), np.nan))


def test_reg_loss_examples(rng):
    assert fen.reg_loss(np.eye(3)) == 0.0
    assert fen.reg_loss(2 * np.eye(3)) == 27.0
    for _ in range(20):
        R = random_rotation(rng)
        assert fen.reg_loss(R) <= 1e-12
        assert np.abs(R @ R.T - np.eye(3)).max() <= 1e-9
        bent = R + rng.normal(0, 1e-3, (3, 3))
        assert fen.reg_loss(bent) > 0 and np.abs(bent @ bent.T - np.eye(3)).max() > 1e-9


def _run(f):
    g = dc.Graph()
    return f(g)


def test_edgeconv_identical_features_give_identical_rows(rng):
    theta, phi, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), rng.normal(size=5)
    v = rng.normal(size=4)
    H = np.tile(v, (8, 1))
    nbrs = rng.integers(0, 8, size=(8, 3))
    out = _run(lambda g: fen.edgeconv(g.constant(H), nbrs, g.constant(theta), g.constant(phi), g.constant(b))).value
    z = v @ phi + b
    expected = np.where(z > 0, z, 0.2 * z)
    assert np.abs(out - expected).max() <= 1e-12


def test_edgeconv_self_neighbor_only(rng):
    theta, phi, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), np.zeros(2)
    H = rng.normal(size=(5, 3))
    out = _run(lambda g: fen.edgeconv(g.constant(H), np.arange(5)[:, None], g.constant(theta), g.constant(phi),
                                      g.constant(b))).value
    z = H @ phi
    assert np.abs(out - np.where(z > 0, z, 0.2 * z)).max() <= 1e-12


def test_edgeconv_permutation_equivariant(rng):
    theta, phi, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), rng.normal(size=6)
    H = rng.normal(size=(16, 4))
    nbrs = rng.integers(0, 16, size=(16, 5))
    perm = rng.permutation(16)
    inv = np.argsort(perm)
    a = _run(lambda g: fen.edgeconv(g.constant(H), nbrs, g.constant(theta), g.constant(phi), g.constant(b))).value
    b2 = _run(lambda g: fen.edgeconv(g.constant(H[perm]), inv[nbrs[perm]], g.constant(theta), g.constant(phi),
                                     g.constant(b))).value
    assert np.abs(a[perm] - b2).max() <= 1e-12


def test_edgeconv_shape_error(rng):
    with pytest.raises(ShapeError):
        _run(lambda g: fen.edgeconv(g.constant(np.ones((4, 2))), np.zeros((3, 1), int), g.constant(np.ones((2, 2))),
                                    g.constant(np.ones((2, 2))), g.constant(np.ones(2))))


def test_self_attention_examples(rng):
    X = rng.normal(size=(7, 4))
    wq, wk = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    out, _ = _run(lambda g: fen.self_attention(g.constant(X), g.constant(wq), g.constant(wk),
                                               g.constant(np.zeros((4, 4)))))
    np.testing.assert_array_equal(out.value, X)
    wv = rng.normal(size=(4, 4))
    one, att = _run(lambda g: fen.self_attention(g.constant(X[:1]), g.constant(wq), g.constant(wk), g.constant(wv)))
    assert att.value.tolist() == [[1.0]]
    assert np.abs(one.value - (X[:1] + X[:1] @ wv)).max() <= 1e-12
    _, att = _run(lambda g: fen.self_attention(g.constant(X), g.constant(wq), g.constant(wk), g.constant(wv)))
    assert np.abs(att.value.sum(axis=1) - 1).max() <= 1e-9
    with pytest.raises(ShapeError):
        _run(lambda g: fen.self_attention(g.constant(X), g.constant(wq[:3]), g.constant(wk), g.constant(wv)))


def test_extract_features_equivariant_and_deterministic(params, rng):
    cloud = toy_cloud(40, 5).cloud
    perm = rng.permutation(40)
    f, A = fen.extract_features(cloud, params)
    fp, Ap = fen.extract_features(PointCloud(cloud.xyz[perm], cloud.normals[perm]), params)
    assert f.shape == (40, TINY_FEN.out_dim)
    assert np.abs(f[perm] - fp).max() <= 1e-9
    np.testing.assert_array_equal(A, Ap)
    again, _ = fen.extract_features(cloud, params)
    np.testing.assert_array_equal(f, again)
    other, _ = fen.extract_features(toy_cloud(40, 6).cloud, params)
    assert np.abs(other - f).max() > 0


def test_extract_features_independent_of_tnet_trunk_at_init(params, rng):
    cloud = toy_cloud(25, 2).cloud
    f, _ = fen.extract_features(cloud, params)
    for k in params.tensors:
        if k.startswith("tnet.conv") or k.startswith("tnet.fc"):
            params.tensors[k] = rng.normal(size=params.tensors[k].shape)
    g, _ = fen.extract_features(cloud, params)
    np.testing.assert_array_equal(f, g)


def test_extractor_gradients():
    name, f, x = extractor_case(seed=1)
    assert dc.grad_check(f, x) <= 1e-4


def test_config_validation():
    with pytest.raises(ParameterError):
        fen.FenConfig(k_neighbors=0)
    with pytest.raises(ParameterError):
        fen.FenConfig(head_widths=())
    assert fen.FenConfig().out_dim == 64
