"""Renderer tests: finite-difference Jacobian oracles, patch partition
bit-exactness, analytic labels against a pixel-scan oracle, lighting paths,
and the neural-field twin."""

import numpy as np
import pytest

from rendertune import autodiff as ad
from rendertune.autodiff import Tape, grad, vjp
from rendertune.renderer import (
    Label,
    NeuralFieldScene,
    RenderParams,
    SceneSpec,
    make_label,
    occupancy_field,
    patch_expr,
    patch_ranges,
    pixel_grid,
    render,
    render_lit,
    render_patch,
    write_pgm,
)
from rendertune.sampler import LightingMixture


def small_scene(**kw):
    defaults = dict(class_id=0, shape="disc", radius=0.45, aspect=0.8,
                    shade_amp=0.3, resolution=16, patches=4)
    defaults.update(kw)
    return SceneSpec(**defaults)


def fd_pixels(scene, params, attr, h):
    """Central finite difference of the full image w.r.t. one parameter."""
    up = dict(phi=params.phi, rho=params.rho, zoom=params.zoom, lighting=params.lighting)
    dn = dict(up)
    up[attr] += h
    dn[attr] -= h
    pu = render(scene, RenderParams(**up)).pixels
    pd = render(scene, RenderParams(**dn)).pixels
    return (pu - pd) / (2 * h)


class TestRenderBasics:
    def test_pixels_in_unit_interval(self):
        rng = np.random.default_rng(0)
        scene = small_scene()
        for _ in range(50):
            p = RenderParams(rng.uniform(0, 360), rng.uniform(0, 360), rng.uniform(0.3, 1.8))
            x = render(scene, p).pixels
            assert np.all(x >= 0.0) and np.all(x <= 1.0)

    def test_periodicity_bit_identical(self):
        scene = small_scene()
        a = render(scene, RenderParams(37.25, 110.0, 1.1)).pixels
        b = render(scene, RenderParams(37.25 + 360.0, 110.0, 1.1)).pixels
        assert np.array_equal(a, b)

    def test_determinism_across_calls(self):
        scene = small_scene(shape="bar", aspect=0.4)
        p = RenderParams(200.0, 45.0, 0.9)
        assert np.array_equal(render(scene, p).pixels, render(scene, p).pixels)

    def test_vanishing_zoom_gives_uniform_background(self):
        scene = small_scene()
        p = RenderParams(123.0, 5.0, 1e-9)
        ex = render(scene, p)
        assert np.max(np.abs(ex.pixels - scene.bg)) < 1e-12
        # label collapses to the minimum centered box
        c0, r0, c1, r1 = ex.label.box
        assert c0 == c1 and r0 == r1
        assert abs(c0 - scene.resolution // 2) <= 1

    def test_degenerate_scene_rejected(self):
        with pytest.raises(ValueError):
            SceneSpec(radius=0.0)
        with pytest.raises(ValueError):
            RenderParams(0.0, 0.0, zoom=0.0)

    def test_pgm_export(self, tmp_path):
        scene = small_scene()
        ex = render(scene, RenderParams(10.0, 20.0))
        path = tmp_path / "img.pgm"
        write_pgm(path, ex.pixels, scene.resolution, comment="probe")
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n# probe\n16 16\n255\n")
        assert len(raw) == len(b"P5\n# probe\n16 16\n255\n") + 256


class TestGradients:
    @pytest.mark.parametrize("shape", ["disc", "square", "bar"])
    def test_dphi_matches_finite_difference(self, shape):
        """d pixels / d phi at 16x16 against central differences."""
        scene = small_scene(shape=shape, aspect=0.5 if shape == "bar" else 0.8)
        rng = np.random.default_rng(3)
        for _ in range(5):
            params = RenderParams(rng.uniform(0, 360), rng.uniform(0, 360), rng.uniform(0.6, 1.4))
            tape = Tape()
            phi = tape.leaf(params.phi)
            px, py = pixel_grid(scene.resolution)
            out = scene.field(phi, params.rho, params.zoom, None, px, py)
            d = out.size
            # probe a random weighting plus the strongest-gradient pixels
            # against the FD image (a sweep per pixel would be wasteful)
            fd = fd_pixels(scene, params, "phi", 1e-3)
            w = rng.normal(size=d)
            (g,) = vjp([out], w, [phi])
            assert abs(g - float(w @ fd)) / max(abs(float(w @ fd)), 1e-9) < 1e-3
            # per-pixel check on the strongest-gradient pixels
            e = np.zeros(d)
            for j in np.argsort(-np.abs(fd))[:20]:
                e[:] = 0.0
                e[j] = 1.0
                (gj,) = vjp([out], e, [phi])
                assert abs(gj - fd[j]) / max(abs(fd[j]), 1e-6) < 1e-3

    def test_random_params_jacobian_probe(self):
        """100 random parameter points: weighted FD probe within 1e-3."""
        scene = small_scene()
        rng = np.random.default_rng(9)
        for _ in range(100):
            params = RenderParams(rng.uniform(0, 360), rng.uniform(0, 360), rng.uniform(0.5, 1.6))
            attr, h = [("phi", 1e-3), ("rho", 1e-3), ("zoom", 1e-6)][rng.integers(3)]
            fd = fd_pixels(scene, params, attr, h)
            if np.max(np.abs(fd)) < 1e-6:
                continue
            tape = Tape()
            leaf = tape.leaf(getattr(params, attr))
            args = dict(phi=params.phi, rho=params.rho, zoom=params.zoom)
            args[attr] = leaf
            px, py = pixel_grid(scene.resolution)
            out = scene.field(args["phi"], args["rho"], args["zoom"], None, px, py)
            w = rng.normal(size=fd.size)
            (g,) = vjp([out], w, [leaf])
            ref = float(w @ fd)
            assert abs(g - ref) / max(abs(ref), 1e-8) < 1e-3


class TestPatches:
    def test_partition_is_bit_exact(self):
        scene = small_scene(resolution=32, patches=4)
        params = RenderParams(77.0, 31.0, 1.05)
        full = render(scene, params)
        parts = [render_patch(scene, params, pr) for pr in full.patch_layout]
        assert np.array_equal(np.concatenate(parts), full.pixels)

    def test_single_pixel_patch(self):
        scene = small_scene()
        params = RenderParams(5.0, 250.0, 0.8)
        full = render(scene, params).pixels
        for j in [0, 100, 255]:
            val = render_patch(scene, params, (j, j + 1))
            assert val[0] == full[j]

    def test_out_of_range_patch_rejected(self):
        scene = small_scene()
        with pytest.raises(ValueError):
            render_patch(scene, RenderParams(0.0, 0.0), (200, 300))

    def test_patch_gradient_sum_equals_whole_image_gradient(self):
        """Sum over patches of patch contributions == monolithic gradient."""
        scene = small_scene(resolution=16, patches=4)
        params = RenderParams(123.0, 45.0, 1.0)
        rng = np.random.default_rng(1)
        w = rng.normal(size=256)

        tape = Tape()
        phi = tape.leaf(params.phi)
        px, py = pixel_grid(16)
        out = scene.field(phi, params.rho, params.zoom, None, px, py)
        (g_full,) = vjp([out], w, [phi])

        g_sum = 0.0
        for (a, b) in patch_ranges(256, 4):
            tape = Tape()
            phi = tape.leaf(params.phi)
            out = patch_expr(scene, phi, params.rho, params.zoom, None, (a, b))
            (g,) = vjp([out], w[a:b], [phi])
            g_sum += g
        assert abs(g_sum - g_full) / abs(g_full) < 1e-10

    def test_bad_patch_count_rejected(self):
        with pytest.raises(ValueError):
            patch_ranges(256, 5)


class TestLabels:
    def test_centered_disc_box_size(self):
        # radius 0.45 at resolution 32 -> about 14.4 px half-extent
        scene = small_scene(shape="disc", aspect=1.0, radius=0.45, resolution=32)
        label = make_label(scene, RenderParams(0.0, 0.0, 1.0))
        c0, r0, c1, r1 = label.box
        side = c1 - c0 + 1
        expected = 2 * 0.45 * 32 / 2  # boundary at 0.5 occupancy sits near r
        assert abs(side - expected) <= 1.5
        assert abs((c0 + c1) / 2 - 15.5) <= 0.51 and abs((r0 + r1) / 2 - 15.5) <= 0.51

    def test_zoom_doubles_box(self):
        scene = small_scene(shape="disc", aspect=1.0, radius=0.22, resolution=32)
        b1 = make_label(scene, RenderParams(0.0, 0.0, 1.0)).box
        b2 = make_label(scene, RenderParams(0.0, 0.0, 2.0)).box
        s1 = b1[2] - b1[0] + 1
        s2 = b2[2] - b2[0] + 1
        assert abs(s2 - 2 * s1) <= 2

    @pytest.mark.parametrize("shape", ["disc", "square", "bar"])
    def test_box_matches_pixel_scan_oracle(self, shape):
        """Analytic box equals a brute-force scan of the 0.5-occupancy mask."""
        rng = np.random.default_rng(5)
        scene = small_scene(shape=shape, aspect=0.5 if shape != "disc" else 0.8,
                            resolution=32)
        for _ in range(25):
            params = RenderParams(rng.uniform(0, 360), rng.uniform(0, 360), rng.uniform(0.7, 1.5))
            occ = occupancy_field(scene, params).reshape(32, 32)
            mask = occ >= 0.5
            label = make_label(scene, params)
            assert mask.any(), "oracle needs a visible object"
            rows = np.nonzero(mask.any(axis=1))[0]
            cols = np.nonzero(mask.any(axis=0))[0]
            c0, r0, c1, r1 = label.box
            assert abs(c0 - cols[0]) <= 1 and abs(c1 - cols[-1]) <= 1
            assert abs(r0 - rows[0]) <= 1 and abs(r1 - rows[-1]) <= 1

    def test_out_of_frame_gives_empty_label(self):
        scene = small_scene(center=(5.0, 0.0))
        label = make_label(scene, RenderParams(0.0, 0.0, 1.0))
        assert label.box is None

    def test_label_box_inside_image(self):
        rng = np.random.default_rng(11)
        scene = small_scene(resolution=16)
        for _ in range(50):
            params = RenderParams(rng.uniform(0, 360), rng.uniform(0, 360), rng.uniform(0.1, 3.0))
            label = make_label(scene, params)
            c0, r0, c1, r1 = label.box
            assert 0 <= c0 <= c1 <= 15 and 0 <= r0 <= r1 <= 15


class TestLighting:
    def lit_scene(self):
        return small_scene(light_fg=np.array([0.8, -0.5]), light_bg=np.array([0.3, 0.2]))

    def test_one_hot_mix_equals_direct_embedding(self):
        scene = self.lit_scene()
        emb = np.array([[0.5, -0.2], [-0.4, 0.6]])
        params = RenderParams(40.0, 10.0, 1.0)
        mixed = render_lit(scene, params, LightingMixture(np.array([0.0, 1.0]), emb))
        direct = render(scene, RenderParams(40.0, 10.0, 1.0, lighting=emb[1]))
        assert np.array_equal(mixed.pixels, direct.pixels)

    def test_geometry_fixed_across_mixes(self):
        """The label box never moves with lighting; only intensities do."""
        scene = self.lit_scene()
        emb = np.array([[0.9, 0.0], [-0.9, 0.4], [0.1, -0.8]])
        params = RenderParams(75.0, 33.0, 1.1)
        boxes = set()
        for coeffs in [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0.2, 0.5, 0.3)]:
            ex = render_lit(scene, params, LightingMixture(np.array(coeffs, dtype=float), emb))
            boxes.add(ex.label.box)
        assert len(boxes) == 1

    def test_interpolation_is_monotone_per_pixel(self):
        scene = self.lit_scene()
        emb = np.array([[1.0, 0.0], [-1.0, 0.5]])
        params = RenderParams(10.0, 0.0, 1.0)
        stack = []
        for t in np.linspace(0, 1, 9):
            mix = LightingMixture(np.array([1 - t, t]), emb)
            stack.append(render_lit(scene, params, mix).pixels)
        stack = np.asarray(stack)
        diffs = np.diff(stack, axis=0)
        sign_changes = (diffs[:-1] * diffs[1:] < -1e-15).any(axis=0)
        assert not sign_changes.any()

    def test_dcoeffs_matches_finite_difference(self):
        scene = self.lit_scene()
        emb = np.array([[0.7, -0.1], [-0.3, 0.5]])
        params = RenderParams(60.0, 90.0, 1.0)
        coeffs = np.array([0.6, 0.4])
        px, py = pixel_grid(scene.resolution)
        rng = np.random.default_rng(2)
        w = rng.normal(size=256)

        tape = Tape()
        cv = tape.leaf(coeffs)
        from rendertune.sampler import _mix

        ell = _mix(cv, emb)
        out = scene.field(params.phi, params.rho, params.zoom, ell, px, py)
        (g,) = vjp([out], w, [cv])

        h = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            up = scene.field(params.phi, params.rho, params.zoom, (coeffs + e) @ emb, px, py)
            dn = scene.field(params.phi, params.rho, params.zoom, (coeffs - e) @ emb, px, py)
            fd = float(w @ (up - dn)) / (2 * h)
            assert abs(g[i] - fd) / max(abs(fd), 1e-8) < 1e-4

    def test_dimension_mismatch_rejected(self):
        scene = self.lit_scene()
        emb3 = np.eye(3)
        with pytest.raises(ValueError):
            render_lit(scene, RenderParams(0.0, 0.0), LightingMixture(np.array([1.0, 0.0, 0.0]), emb3))

    def test_unlit_scene_rejects_mix(self):
        with pytest.raises(ValueError):
            render_lit(small_scene(), RenderParams(0.0, 0.0),
                       LightingMixture(np.array([1.0]), np.array([[0.1, 0.2]])))


class TestDistinguishability:
    def test_linear_probe_separates_pose_bins(self):
        """Images from pose bin 1 vs bin 5 are linearly separable (>95%):
        the bilevel signal the learner needs exists."""
        scene = small_scene(resolution=16)
        rng = np.random.default_rng(21)
        X, y = [], []
        for _ in range(100):
            X.append(render(scene, RenderParams(rng.uniform(0, 45), rng.uniform(0, 360))).pixels)
            y.append(0)
            X.append(render(scene, RenderParams(rng.uniform(180, 225), rng.uniform(0, 360))).pixels)
            y.append(1)
        X = np.asarray(X)
        y = np.asarray(y)
        A = np.column_stack([X, np.ones(len(y))])
        w, *_ = np.linalg.lstsq(A, 2.0 * y - 1.0, rcond=None)
        acc = np.mean((A @ w > 0) == (y == 1))
        assert acc > 0.95


class TestNeuralTwin:
    def make(self):
        target = small_scene(resolution=16, patches=4)
        return NeuralFieldScene(target, seed=3)

    def test_same_interface_and_fit_quality(self):
        scene = self.make()
        params = RenderParams(120.0, 40.0, 1.0)
        ex = render(scene, params)
        ref = render(scene.target, params)
        assert ex.pixels.shape == ref.pixels.shape
        assert ex.label == ref.label  # labels delegate to the analytic geometry
        assert np.sqrt(np.mean((ex.pixels - ref.pixels) ** 2)) < 0.08

    def test_patch_partition_bit_exact(self):
        scene = self.make()
        params = RenderParams(33.0, 200.0, 0.95)
        full = render(scene, params)
        parts = [render_patch(scene, params, pr) for pr in full.patch_layout]
        assert np.array_equal(np.concatenate(parts), full.pixels)

    def test_gradient_matches_finite_difference(self):
        scene = self.make()
        rng = np.random.default_rng(4)
        params = RenderParams(80.0, 10.0, 1.0)
        w = rng.normal(size=256)
        tape = Tape()
        phi = tape.leaf(params.phi)
        px, py = pixel_grid(16)
        out = scene.field(phi, params.rho, params.zoom, None, px, py)
        (g,) = vjp([out], w, [phi])
        h = 1e-3
        up = scene.field(params.phi + h, params.rho, params.zoom, None, px, py)
        dn = scene.field(params.phi - h, params.rho, params.zoom, None, px, py)
        fd = float(w @ (up - dn)) / (2 * h)
        assert abs(g - fd) / max(abs(fd), 1e-9) < 1e-3
