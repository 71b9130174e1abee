import numpy as np
import pytest

from seqkd import autodiff as ad
from seqkd.autodiff import check_gradients
from seqkd.fusion import (FusionConfig, attach, embedding_alignment_mse, fuse,
                          hint_align_loss, project, standardize_embeddings)
from seqkd.models import (ModelError, StudentConfig, StudentModel, load_model,
                          pad_prefixes, save_model)


def fresh_model(seed=0, item_count=15, dim=4):
    return StudentModel(StudentConfig(kind="recurrent", item_count=item_count,
                                      embed_dim=dim, max_len=8, dropout=0.0), seed=seed)


def teacher_z(item_count=15, dt=6, seed=1):
    return np.random.default_rng(seed).standard_normal((item_count, dt))


def test_project_zero_input_zero_biases():
    m = attach(fresh_model(), teacher_z(), FusionConfig(mode="offset-sum"))
    m.params["proj.b1"].data[:] = 0.0
    m.params["proj.b2"].data[:] = 0.0
    out = project(m, np.zeros(6))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_project_dim_mismatch():
    m = attach(fresh_model(), teacher_z(), FusionConfig(mode="offset-sum"))
    with pytest.raises(ModelError):
        project(m, np.zeros(5))


def test_project_batch_equals_per_row():
    m = attach(fresh_model(seed=2), teacher_z(seed=3), FusionConfig(mode="offset-sum"))
    rows = np.random.default_rng(4).standard_normal((7, 6))
    batch = project(m, rows).data
    for r in range(7):
        np.testing.assert_allclose(project(m, rows[r]).data[0], batch[r], atol=1e-12)


def test_project_gradcheck():
    m = attach(fresh_model(seed=5), teacher_z(seed=6), FusionConfig(mode="offset-sum"))
    z = np.random.default_rng(7).standard_normal((5, 6))
    proj_params = {k: v for k, v in m.params.items() if k.startswith("proj.")}

    def build():
        out = project(m, z)
        return ad.tsum(ad.mul(out, out))

    err = check_gradients(build, proj_params, sample_count=60,
                          rng=np.random.default_rng(0))
    assert err < 1e-4


def test_fuse_modes():
    zp = ad.constant(np.array([[1.0, 2.0]]))
    b = ad.constant(np.array([[0.5, -0.5]]))
    np.testing.assert_array_equal(fuse(zp, b, "offset-sum").data, [[1.5, 1.5]])
    np.testing.assert_array_equal(fuse(zp, None, "offset-disabled").data, [[1.0, 2.0]])
    zero = ad.constant(np.zeros((1, 2)))
    np.testing.assert_array_equal(fuse(zp, zero, "offset-sum").data, zp.data)
    np.testing.assert_array_equal(fuse(zero, b, "offset-sum").data, b.data)


def test_fuse_additivity():
    rng = np.random.default_rng(8)
    x, y, u, v = (ad.constant(rng.standard_normal((3, 2))) for _ in range(4))
    left = ad.add(fuse(x, y, "offset-sum"), fuse(u, v, "offset-sum"))
    right = fuse(ad.add(x, u), ad.add(y, v), "offset-sum")
    np.testing.assert_allclose(left.data, right.data, atol=1e-12)


def test_hint_loss_zero_when_equal():
    ids = np.arange(4)
    e = ad.constant(np.ones((4, 3)))
    assert embedding_alignment_mse(e, ad.constant(np.ones((4, 3))), ids).item() == 0.0


def test_hint_loss_closed_form_12_5():
    # one item, embeddings (0,0) vs (3,4): mean of squared coords = 25/2
    e = ad.constant(np.array([[0.0, 0.0]]))
    z = ad.constant(np.array([[3.0, 4.0]]))
    assert embedding_alignment_mse(e, z, np.array([0])).item() == pytest.approx(12.5)


def test_hint_loss_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(9)
    for _ in range(20):
        a = rng.standard_normal((5, 3))
        b = rng.standard_normal((5, 3))
        v = embedding_alignment_mse(ad.constant(a), ad.constant(b), np.arange(5)).item()
        assert v > 0
    assert embedding_alignment_mse(ad.constant(a), ad.constant(a), np.arange(5)).item() == 0


def test_hint_loss_outside_mode_rejected():
    m = attach(fresh_model(), teacher_z(), FusionConfig(mode="offset-sum"))
    with pytest.raises(ModelError, match="hint"):
        hint_align_loss(m, np.array([0, 1]))


def test_hint_loss_gradcheck():
    m = attach(fresh_model(seed=10), teacher_z(seed=11), FusionConfig(mode="hint-align"))
    ids = np.array([0, 3, 7])

    def build():
        return hint_align_loss(m, ids)

    err = check_gradients(build, m.params, sample_count=60,
                          rng=np.random.default_rng(1))
    assert err < 1e-4


def test_attach_none_mode_is_identity():
    m = fresh_model(seed=12)
    before = {k: v.data.copy() for k, v in m.params.items()}
    out = attach(m, teacher_z(), FusionConfig(mode="none"))
    assert out is m
    assert set(m.params) == set(before)
    prefix = [1, 2, 3]
    assert m.top_k(prefix, 5) == m.top_k(prefix, 5)


def test_attach_replaces_free_table_in_offset_modes():
    m = attach(fresh_model(seed=13), teacher_z(seed=14), FusionConfig(mode="offset-sum"))
    assert "emb.items" not in m.params
    assert "fuse.offset" in m.params
    m2 = attach(fresh_model(seed=13), teacher_z(seed=14), FusionConfig(mode="offset-disabled"))
    assert "emb.items" not in m2.params
    assert "fuse.offset" not in m2.params
    m3 = attach(fresh_model(seed=13), teacher_z(seed=14), FusionConfig(mode="hint-align"))
    assert "emb.items" in m3.params and "proj.w1" in m3.params


def test_attach_catalog_mismatch():
    with pytest.raises(ModelError):
        attach(fresh_model(), teacher_z(item_count=9), FusionConfig(mode="offset-sum"))


def test_offset_receives_gradient_with_frozen_projector():
    m = attach(fresh_model(seed=15), teacher_z(seed=16), FusionConfig(mode="offset-sum"))
    batch = [([1, 2], 3, [4]), ([5], 6, [7])]
    loss = m.rec_loss(batch)
    loss.backward()
    g = m.params["fuse.offset"].grad
    assert g is not None and np.any(g != 0)


def test_gradients_reach_both_projector_and_offset():
    m = attach(fresh_model(seed=17), teacher_z(seed=18), FusionConfig(mode="offset-sum"))
    loss = m.rec_loss([([1, 2, 3], 4, [5])])
    loss.backward()
    assert np.any(m.params["proj.w1"].grad != 0)
    assert np.any(m.params["fuse.offset"].grad != 0)


def test_topk_invariant_under_joint_rotation():
    # Dot products survive any orthogonal transform applied to both sides.
    m = fresh_model(seed=19, item_count=20, dim=4)
    rng = np.random.default_rng(20)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    with ad.no_grad():
        e_s = m.encode_sequence([2, 3, 4]).data
        table = m.item_table().data
    base = np.argsort(-(table @ e_s), kind="stable")[:8]
    rotated = np.argsort(-((table @ q) @ (q.T @ e_s)), kind="stable")[:8]
    assert np.array_equal(base, rotated)


def test_zero_projector_offset_sum_degenerates_to_free_student():
    # With the projector frozen at zero, offset-sum is exactly a free
    # embedding table parameterized by the offset.
    m = attach(fresh_model(seed=21), teacher_z(seed=22), FusionConfig(mode="offset-sum"))
    for name in ("proj.w1", "proj.b1", "proj.w2", "proj.b2"):
        m.params[name].data[:] = 0.0
    rng = np.random.default_rng(23)
    offset = rng.standard_normal(m.params["fuse.offset"].data.shape)
    m.params["fuse.offset"].data[:] = offset
    np.testing.assert_allclose(m.item_table().data, offset, atol=1e-15)


def test_attach_checkpoint_round_trip_identical_scores(tmp_path):
    for mode in ("offset-sum", "offset-disabled", "hint-align"):
        m = attach(fresh_model(seed=24), teacher_z(seed=25), FusionConfig(mode=mode))
        path = tmp_path / f"{mode}.ckpt"
        save_model(path, m)
        loaded = load_model(path)
        for prefix in ([1, 2], [3], [4, 5, 6]):
            assert m.top_k(prefix, 10) == loaded.top_k(prefix, 10)


def test_standardize_embeddings():
    rng = np.random.default_rng(26)
    z = rng.standard_normal((50, 4)) * np.array([1.0, 100.0, 0.01, 5.0]) + 7.0
    s = standardize_embeddings(z)
    np.testing.assert_allclose(s.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(s.std(axis=0), 1.0, atol=1e-12)
