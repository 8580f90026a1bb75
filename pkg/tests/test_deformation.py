import numpy as np
import pytest

from shade4d import deformation as dfm
from shade4d import triplane as tp
from shade4d.autodiff import Tape, Tensor, finite_diff_check
from shade4d.nn import named_tensors

RNG = np.random.default_rng(31)


def make_field(res=8, ch=6, seed=0, modulated=True):
    planes = tp.triplane_init(np.random.default_rng(seed), res, ch, modulated=modulated)
    head = dfm.deformation_head_init(np.random.default_rng(seed + 1), ch)
    return planes, head


class TestDeform:
    def test_zero_planes_zero_bias_is_identity(self):
        planes, head = make_field()
        for pg in planes.planes:
            pg.values.assign_(np.zeros_like(pg.values.data))
        x = RNG.uniform(-1, 1, size=(12, 3))
        res = dfm.deform(planes, head, x, 0.4)
        np.testing.assert_array_equal(res.delta_x.data, 0.0)
        np.testing.assert_array_equal(res.x_c.data, x)

    def test_bias_only_gives_constant_offset(self):
        planes, head = make_field()
        for pg in planes.planes:
            pg.values.assign_(np.zeros_like(pg.values.data))
        head.b.assign_(np.array([0.1, 0.0, 0.0]))
        x = RNG.uniform(-0.5, 0.5, size=(7, 3))
        for t in (0.0, 0.6, 1.0):
            res = dfm.deform(planes, head, x, t)
            np.testing.assert_allclose(
                res.delta_x.data, np.tile([0.1, 0.0, 0.0], (7, 1)), atol=1e-15
            )

    def test_matches_direct_matrix_multiply(self):
        planes, head = make_field(seed=4)
        x = RNG.uniform(-0.9, 0.9, size=(5, 3))
        t = 0.3
        res = dfm.deform(planes, head, x, t)
        feats = tp.triplane_features(planes, x, t)
        summed = feats[0].data + feats[1].data + feats[2].data
        expect = summed @ head.w.data + head.b.data
        np.testing.assert_allclose(res.delta_x.data, expect, atol=1e-12)

    def test_xc_is_x_plus_delta_when_inside(self):
        planes, head = make_field(seed=2)
        x = RNG.uniform(-0.5, 0.5, size=(20, 3))
        res = dfm.deform(planes, head, x, 0.7)
        np.testing.assert_allclose(
            res.x_c.data, x + res.delta_x.data, atol=1e-15
        )

    def test_xc_clamped_to_bounds(self):
        planes, head = make_field()
        for pg in planes.planes:
            pg.values.assign_(np.zeros_like(pg.values.data))
        head.b.assign_(np.array([0.5, 0.0, 0.0]))
        x = np.array([[0.9, 0.0, 0.0]])
        res = dfm.deform(planes, head, x, 0.0)
        assert res.x_c.data[0, 0] == 1.0  # clamped
        assert res.delta_x.data[0, 0] == pytest.approx(0.5)  # raw kept

    def test_linearity_in_plane_values(self):
        planes, head = make_field(seed=6, modulated=False)
        x = RNG.uniform(-0.8, 0.8, size=(9, 3))
        d1 = dfm.deform(planes, head, x, 0.5).delta_x.data
        for pg in planes.planes:
            pg.values.assign_(pg.values.data * 2.5)
        d2 = dfm.deform(planes, head, x, 0.5).delta_x.data
        np.testing.assert_allclose(d2, 2.5 * d1, atol=1e-12)

    def test_gradient_reaches_plane_cells(self):
        planes, head = make_field(seed=7)
        x = RNG.uniform(-0.8, 0.8, size=(6, 3))
        params = [pg.values for pg in planes.planes]
        with Tape() as tape:
            res = dfm.deform(planes, head, x, 0.25)
            loss = (res.x_c ** 2.0).sum()
        grads = tape.gradient(loss, params)
        assert all(np.any(g != 0) for g in grads)

    def test_gradcheck_through_warp(self):
        planes, head = make_field(res=6, ch=4, seed=8)
        x = RNG.uniform(-0.7, 0.7, size=(4, 3))
        v0 = planes.planes[0].values

        def f(vals):
            planes.planes[0].values = vals
            res = dfm.deform(planes, head, x, 0.6)
            return (res.x_c ** 2.0).sum()

        rep = finite_diff_check(f, Tensor(RNG.normal(size=v0.shape) * 0.1), tol=1e-5)
        planes.planes[0].values = v0
        assert rep.passed, str(rep)

    def test_head_tensors_are_buffers(self):
        _, head = make_field()
        kinds = {name: t.requires_grad for name, t in named_tensors(head, "head")}
        assert kinds == {"head.w": False, "head.b": False}

    def test_checksum_stable_until_mutated(self):
        _, head = make_field(seed=3)
        c1 = head.checksum()
        c2 = head.checksum()
        assert c1 == c2
        head.b.assign_(np.array([1e-9, 0.0, 0.0]))
        assert head.checksum() != c1


class TestDeformIdentity:
    def test_identity_values(self):
        x = np.array([[0.3, -0.2, 0.5]])
        res = dfm.deform_identity(x)
        np.testing.assert_array_equal(res.x_c.data, x)
        np.testing.assert_array_equal(res.delta_x.data, 0.0)

    def test_identity_matches_zeroed_deform(self):
        planes, head = make_field(seed=5)
        for pg in planes.planes:
            pg.values.assign_(np.zeros_like(pg.values.data))
        x = RNG.uniform(-1, 1, size=(10, 3))
        a = dfm.deform(planes, head, x, 0.9)
        b = dfm.deform_identity(x)
        np.testing.assert_array_equal(a.x_c.data, b.x_c.data)
        np.testing.assert_array_equal(a.delta_x.data, b.delta_x.data)

    def test_identity_preserves_tensor_graph(self):
        pts = Tensor(RNG.uniform(-1, 1, size=(4, 3)), requires_grad=True)
        with Tape() as tape:
            res = dfm.deform_identity(pts)
            loss = (res.x_c ** 2.0).sum()
        (g,) = tape.gradient(loss, [pts])
        np.testing.assert_allclose(g, 2.0 * pts.data)


class TestFrameBatching:
    def test_multi_frame_matches_per_frame_calls(self):
        planes, head = make_field(seed=9)
        # give the modulation real content so times matter
        planes.modulation.shift_maps[0].w.assign_(RNG.normal(size=(64, 6)) * 0.02)
        x = RNG.uniform(-0.9, 0.9, size=(8, 3))
        ts = [0.1, 0.9]
        fid = np.array([0] * 4 + [1] * 4)
        batched = dfm.deform_frames(planes, head, x, ts, frame_ids=fid)
        a = dfm.deform(planes, head, x[:4], 0.1)
        b = dfm.deform(planes, head, x[4:], 0.9)
        np.testing.assert_allclose(batched.x_c.data[:4], a.x_c.data, atol=1e-12)
        np.testing.assert_allclose(batched.x_c.data[4:], b.x_c.data, atol=1e-12)
        assert not np.allclose(a.delta_x.data.mean(0), b.delta_x.data.mean(0))
