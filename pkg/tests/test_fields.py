"""Oracle tests for hash encodings, field heads, and the optimizer."""

import numpy as np
import pytest
import torch

from levelsfm.errors import NonFiniteGradient, ParseError
from levelsfm.fields import (
    AdamOptimizer,
    HashEncoding,
    HashGridConfig,
    PoseVariable,
    RadianceField,
    SdfField,
    level_resolution,
    load_checkpoint,
    save_checkpoint,
    so3_exp,
    spatial_hash,
)
from levelsfm.geometry.rotations import exp_so3

SMALL = HashGridConfig(L=4, n_min=4, n_max=64, F=2, T=2**10, bound=1.0)


def _gen(seed):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def _off_grid(x, resolutions, bound, min_u=0.05):
    """Mask of probes at least min_u voxel-fractions away from every grid
    face; interpolation gradients are only defined away from the faces."""
    ok = np.ones(len(x), dtype=bool)
    for n in resolutions:
        u = (x + bound) / (2 * bound) * n
        ok &= (np.abs(u - np.round(u)) > min_u).all(axis=1)
    return ok


class TestLevelResolution:
    def test_sdf_config_ladder(self):
        """Default config doubles each level: 2048/16 = 2^7 over 7 steps."""
        cfg = HashGridConfig()
        assert [level_resolution(cfg, l) for l in range(8)] == [
            16, 32, 64, 128, 256, 512, 1024, 2048]

    def test_radiance_config_ladder(self):
        cfg = HashGridConfig(L=16, F=2)
        assert [level_resolution(cfg, l) for l in range(16)] == [
            16, 22, 30, 42, 58, 80, 111, 153, 212, 294, 406, 561, 776, 1072, 1482, 2048]

    def test_single_level(self):
        cfg = HashGridConfig(L=1, n_min=32, n_max=32)
        assert level_resolution(cfg, 0) == 32

    def test_bad_config(self):
        with pytest.raises(ValueError):
            HashGridConfig(T=1000)  # not a power of two
        with pytest.raises(ValueError):
            HashGridConfig(n_min=64, n_max=16)


class TestSpatialHash:
    def test_axis_units(self):
        T = 2**19
        assert spatial_hash([0, 0, 0], T) == 0
        assert spatial_hash([1, 0, 0], T) == 1
        # 2654435761 mod 524288 and 805459861 mod 524288, evaluated directly.
        assert spatial_hash([0, 1, 0], T) == 2654435761 % 524288 == 489905
        assert spatial_hash([0, 0, 1], T) == 805459861 % 524288 == 153493

    def test_against_scripted_bigint(self):
        """Independent big-integer evaluation with explicit 64-bit wrapping."""
        rng = np.random.default_rng(7)
        T = 2**19
        corners = rng.integers(0, 2**40, size=(1000, 3))
        got = spatial_hash(corners, T)
        for (x, y, z), h in zip(corners.tolist(), got.tolist()):
            expect = ((x * 1) % 2**64 ^ (y * 2654435761) % 2**64 ^ (z * 805459861) % 2**64) % T
            assert h == expect

    def test_deterministic(self):
        c = np.array([[12, 34, 56]])
        assert spatial_hash(c, 2**10) == spatial_hash(c.copy(), 2**10)


class TestHashEncoding:
    def test_corner_feature_exact(self):
        """A query on a grid corner returns that corner's feature row per level."""
        enc = HashEncoding(SMALL, generator=_gen(0))
        x = torch.tensor([[1.0, 1.0, 1.0]])
        out = enc(x)[0]
        vals = []
        for n, table in zip(enc.resolutions, enc.tables):
            if table.shape[0] == (n + 1) ** 3:
                idx = n + (n + 1) * (n + (n + 1) * n)
            else:
                idx = (n * 1 ^ n * 2654435761 ^ n * 805459861) & (SMALL.T - 1)
            vals.append(table[idx])
        assert torch.equal(out, torch.cat(vals))

    def test_zero_tables(self):
        enc = HashEncoding(SMALL, generator=_gen(1))
        with torch.no_grad():
            for t in enc.tables:
                t.zero_()
        out = enc(torch.tensor([[0.123, -0.456, 0.789]]))
        assert torch.equal(out, torch.zeros_like(out))

    def test_edge_midpoint_average(self):
        """Midpoint of a voxel edge mixes exactly the two adjacent corners."""
        cfg = HashGridConfig(L=1, n_min=4, n_max=4, F=2, T=2**10, bound=1.0)
        enc = HashEncoding(cfg, generator=_gen(2))
        with torch.no_grad():
            enc.tables[0].zero_()
            # Corners (0,0,0) and (1,0,0) on the edge x in [-1,-0.5], y=z=-1.
            enc.tables[0][0] = torch.tensor([1.0, 3.0])
            enc.tables[0][1 + 5 * (0 + 5 * 0)] = torch.tensor([2.0, 5.0])
        x = torch.tensor([[-0.75, -1.0, -1.0]])  # u=(0.125,0,0) -> s=(0.5,0,0)
        out = enc(x)[0]
        assert torch.allclose(out, torch.tensor([1.5, 4.0]))

    def test_continuity(self):
        """1e-7 query perturbations move features by <= 1e-5."""
        enc = HashEncoding(SMALL, generator=_gen(3)).double()
        rng = np.random.default_rng(8)
        for _ in range(100):
            x = rng.uniform(-0.95, 0.95, size=3)
            # Stay off voxel faces of the finest level.
            u = (x + 1.0) / 2.0 * 64
            if np.any(np.abs(u - np.round(u)) < 1e-3):
                continue
            a = enc(torch.tensor(x[None]))
            b = enc(torch.tensor(x[None] + 1e-7))
            assert (a - b).abs().max().item() <= 1e-5

    def test_grad_wrt_query(self):
        enc = HashEncoding(SMALL, generator=_gen(4)).double()
        x = torch.tensor([[0.3123, -0.4567, 0.111]], dtype=torch.float64, requires_grad=True)
        enc(x).sum().backward()
        g = x.grad.clone()
        # Central finite difference on the summed features.
        h = 1e-6
        for k in range(3):
            dx = torch.zeros(1, 3, dtype=torch.float64)
            dx[0, k] = h
            fd = (enc(x.detach() + dx).sum() - enc(x.detach() - dx).sum()) / (2 * h)
            assert abs(g[0, k].item() - fd.item()) < 1e-6 * max(1.0, abs(fd.item()))


class TestSdfField:
    def test_zero_parameters(self):
        sdf = SdfField(SMALL, z_dim=8, generator=_gen(5))
        with torch.no_grad():
            for p in sdf.parameters():
                p.zero_()
        assert sdf.sdf(torch.tensor([[0.1, 0.2, 0.3]])).item() == 0.0

    def test_constant_field_zero_gradient(self):
        sdf = SdfField(SMALL, z_dim=8, generator=_gen(6))
        with torch.no_grad():
            for p in sdf.parameters():
                p.zero_()
        g = sdf.gradient(torch.tensor([[0.2, -0.3, 0.4]]))
        assert torch.equal(g, torch.zeros(1, 3))

    def test_gradient_finite_difference(self):
        """Reverse-mode against central differences at 100 interior probes."""
        sdf = SdfField(SMALL, z_dim=8, generator=_gen(7)).double()
        rng = np.random.default_rng(9)
        probes = rng.uniform(-0.9, 0.9, size=(400, 3))
        probes = probes[_off_grid(probes, sdf.encoding.resolutions, 1.0)][:100]
        assert len(probes) == 100
        x = torch.tensor(probes, dtype=torch.float64)
        g = sdf.gradient(x)
        h = 1e-4
        for k in range(3):
            dx = torch.zeros(3, dtype=torch.float64)
            dx[k] = h
            with torch.no_grad():
                fd = (sdf.sdf(x + dx) - sdf.sdf(x - dx)) / (2 * h)
            denom = torch.maximum(torch.maximum(fd.abs(), g[:, k].abs()),
                                  torch.tensor(1e-6, dtype=torch.float64))
            rel = ((g[:, k] - fd).abs() / denom).max().item()
            assert rel <= 1e-3

    def test_fit_sphere(self):
        """Field learns d = |x| - 1; value probes match the analytic SDF."""
        torch.manual_seed(0)
        cfg = HashGridConfig(L=4, n_min=4, n_max=32, F=2, T=2**12, bound=2.0)
        sdf = SdfField(cfg, z_dim=8, generator=_gen(10))
        opt = AdamOptimizer({"f": list(sdf.parameters())}, {"f": 1e-2})
        rng = np.random.default_rng(10)
        for _ in range(600):
            pts = torch.tensor(rng.uniform(-2, 2, size=(256, 3)), dtype=torch.float32)
            target = torch.linalg.norm(pts, dim=1) - 1.0
            opt.zero_grad()
            loss = ((sdf.sdf(pts) - target) ** 2).mean()
            loss.backward()
            opt.step()
        with torch.no_grad():
            d0 = sdf.sdf(torch.tensor([[0.0, 0.0, 0.0]])).item()
            d2 = sdf.sdf(torch.tensor([[2.0, 0.0, 0.0]])).item()
        assert abs(d0 - (-1.0)) < 0.05
        assert abs(d2 - 1.0) < 0.05

    def test_fit_plane_gradient(self):
        """On an SDF fit of the plane d = x3 (value + unit-gradient terms,
        the standard distance-field objective) the spatial gradient points
        along +z away from voxel faces."""
        torch.manual_seed(0)
        cfg = HashGridConfig(L=4, n_min=4, n_max=32, F=2, T=2**12, bound=1.0)
        sdf = SdfField(cfg, z_dim=8, generator=_gen(11))
        opt = AdamOptimizer({"f": list(sdf.parameters())}, {"f": 1e-2})
        rng = np.random.default_rng(11)
        for i in range(1500):
            if i == 1000:
                opt.lrs["f"] = 1e-3
            pts = torch.tensor(rng.uniform(-1, 1, size=(512, 3)), dtype=torch.float32)
            opt.zero_grad()
            d = sdf.sdf(pts)
            grad = sdf.gradient(pts, create_graph=True)
            loss = ((d - pts[:, 2]) ** 2).mean()
            loss = loss + 0.1 * ((torch.linalg.norm(grad, dim=1) - 1.0) ** 2).mean()
            loss.backward()
            opt.step()
        probes = rng.uniform(-0.8, 0.8, size=(500, 3))
        probes = probes[_off_grid(probes, sdf.encoding.resolutions, 1.0)][:50]
        g = sdf.gradient(torch.tensor(probes, dtype=torch.float32))
        err = (g - torch.tensor([0.0, 0.0, 1.0])).abs()
        assert err.mean().item() < 1e-2
        assert err.max().item() < 0.03


class TestRadianceField:
    def test_zero_parameters_give_half(self):
        rad = RadianceField(SMALL, z_dim=8, generator=_gen(12))
        with torch.no_grad():
            for p in rad.parameters():
                p.zero_()
        n = torch.tensor([[0.0, 0.0, 1.0]])
        v = torch.tensor([[1.0, 0.0, 0.0]])
        out = rad(torch.tensor([[0.1, 0.2, 0.3]]), n, v, torch.zeros(1, 8))
        assert torch.allclose(out, torch.full((1, 3), 0.5))

    def test_range(self):
        rad = RadianceField(SMALL, z_dim=8, generator=_gen(13))
        rng = np.random.default_rng(12)
        x = torch.tensor(rng.uniform(-1, 1, (64, 3)), dtype=torch.float32)
        n = torch.nn.functional.normalize(torch.randn(64, 3, generator=_gen(14)), dim=1)
        v = torch.nn.functional.normalize(torch.randn(64, 3, generator=_gen(15)), dim=1)
        z = torch.randn(64, 8, generator=_gen(16))
        out = rad(x, n, v, z)
        assert (out >= 0).all() and (out <= 1).all()

    def test_overfit_constant_red(self):
        """Supervised to pure red, outputs reach (1,0,0) within 0.02."""
        rad = RadianceField(SMALL, z_dim=8, generator=_gen(17))
        opt = AdamOptimizer({"r": list(rad.parameters())}, {"r": 1e-2})
        rng = np.random.default_rng(13)
        target = torch.tensor([1.0, 0.0, 0.0])
        for _ in range(400):
            x = torch.tensor(rng.uniform(-1, 1, (128, 3)), dtype=torch.float32)
            n = torch.nn.functional.normalize(
                torch.tensor(rng.normal(size=(128, 3)), dtype=torch.float32), dim=1)
            v = torch.nn.functional.normalize(
                torch.tensor(rng.normal(size=(128, 3)), dtype=torch.float32), dim=1)
            z = torch.zeros(128, 8)
            opt.zero_grad()
            out = rad(x, n, v, z)
            ((out - target).abs()).mean().backward()
            opt.step()
        with torch.no_grad():
            x = torch.tensor(rng.uniform(-1, 1, (256, 3)), dtype=torch.float32)
            n = torch.nn.functional.normalize(
                torch.tensor(rng.normal(size=(256, 3)), dtype=torch.float32), dim=1)
            v = torch.nn.functional.normalize(
                torch.tensor(rng.normal(size=(256, 3)), dtype=torch.float32), dim=1)
            out = rad(x, n, v, torch.zeros(256, 8)).mean(dim=0)
        assert (out - target).abs().max().item() < 0.02


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = torch.tensor([1.5], requires_grad=True)
        opt = AdamOptimizer({"x": [p]}, {"x": 0.1})
        p.grad = torch.zeros(1)
        opt.step()
        assert p.item() == 1.5

    def test_quadratic_convergence(self):
        p = torch.tensor([0.0], requires_grad=True)
        opt = AdamOptimizer({"x": [p]}, {"x": 0.1})
        for _ in range(500):
            opt.zero_grad()
            ((p - 3.0) ** 2).backward()
            opt.step()
        assert abs(p.item() - 3.0) < 1e-2

    def test_nan_gradient_rejected(self):
        p = torch.tensor([1.0], requires_grad=True)
        opt = AdamOptimizer({"x": [p]}, {"x": 0.1})
        p.grad = torch.tensor([float("nan")])
        with pytest.raises(NonFiniteGradient):
            opt.step()
        assert p.item() == 1.0

    def test_frozen_group(self):
        a = torch.tensor([0.0], requires_grad=True)
        b = torch.tensor([0.0], requires_grad=True)
        opt = AdamOptimizer({"a": [a], "b": [b]}, {"a": 0.1, "b": 0.1})
        opt.freeze("b")
        for _ in range(50):
            opt.zero_grad()
            ((a - 1.0) ** 2 + (b - 1.0) ** 2).backward()
            opt.step()
        assert a.item() != 0.0
        assert b.item() == 0.0
        opt.unfreeze("b")
        opt.zero_grad()
        ((b - 1.0) ** 2).backward()
        opt.step()
        assert b.item() != 0.0


class TestPoseVariable:
    def test_orthonormal_under_updates(self):
        R0 = exp_so3(np.array([0.4, -0.2, 0.9]))
        pv = PoseVariable(R0, np.array([1.0, 2.0, 3.0]))
        opt = AdamOptimizer({"pose": [pv.delta]}, {"pose": 1e-2})
        target = torch.tensor([0.5, 0.5, 2.0])
        for _ in range(100):
            opt.zero_grad()
            R, t = pv.matrices()
            loss = ((R @ target + t) ** 2).sum()
            loss.backward()
            opt.step()
            with torch.no_grad():
                R = pv.rotation()
                err = (R.T @ R - torch.eye(3)).abs().max().item()
            assert err < 1e-6

    def test_retract_preserves_pose(self):
        pv = PoseVariable(exp_so3(np.array([0.1, 0.2, 0.3])), np.zeros(3))
        with torch.no_grad():
            pv.delta.copy_(torch.tensor([0.05, -0.02, 0.01, 0.3, -0.1, 0.2]))
        R_before, t_before = (m.detach().clone() for m in pv.matrices())
        pv.retract()
        assert torch.allclose(pv.rotation(), R_before, atol=1e-6)
        assert torch.allclose(pv.translation(), t_before, atol=1e-6)
        assert torch.equal(pv.delta.detach(), torch.zeros(6))

    def test_exp_matches_numpy(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            w = rng.normal(size=3)
            Rt = so3_exp(torch.tensor(w, dtype=torch.float64))
            assert np.allclose(Rt.numpy(), exp_so3(w), atol=1e-12)

    def test_exp_gradient_at_zero(self):
        w = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        so3_exp(w).sum().backward()
        assert torch.isfinite(w.grad).all()


class TestCheckpoint:
    def test_roundtrip_and_determinism(self, tmp_path):
        sdf = SdfField(SMALL, z_dim=8, generator=_gen(20))
        rad = RadianceField(SMALL, z_dim=8, generator=_gen(21))
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, sdf, rad)
        save_checkpoint(p2, sdf, rad)
        assert p1.read_bytes() == p2.read_bytes()
        sdf2, rad2, adam = load_checkpoint(p1)
        assert adam is None
        x = torch.tensor([[0.2, -0.1, 0.05]])
        assert torch.allclose(sdf2.sdf(x), sdf.sdf(x))
        n = torch.tensor([[0.0, 0.0, 1.0]])
        v = torch.tensor([[1.0, 0.0, 0.0]])
        z = torch.zeros(1, 8)
        assert torch.allclose(rad2(x, n, v, z), rad(x, n, v, z))

    def test_adam_block(self, tmp_path):
        sdf = SdfField(SMALL, z_dim=8, generator=_gen(22))
        rad = RadianceField(SMALL, z_dim=8, generator=_gen(23))
        opt = AdamOptimizer({"f": list(sdf.parameters()) + list(rad.parameters())}, {"f": 1e-2})
        opt.zero_grad()
        sdf.sdf(torch.tensor([[0.1, 0.1, 0.1]])).sum().backward()
        opt.step()
        p = tmp_path / "c.ckpt"
        save_checkpoint(p, sdf, rad, adam=opt)
        _, _, blocks = load_checkpoint(p)
        assert blocks["step"] == 1
        assert len(blocks["m"]) == len(list(sdf.parameters())) + len(list(rad.parameters()))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOTACKPTxxxx")
        with pytest.raises(ParseError):
            load_checkpoint(p)
