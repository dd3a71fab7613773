import math

import numpy as np
import pytest

from progvol.metrics import RDPoint, bd_metrics, psnr, ssim, write_rd_csv


class TestPSNR:
    def test_identical_capped(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        assert psnr(img, img) == 99.0

    def test_uniform_difference(self):
        a = np.full((8, 8, 3), 0.5)
        b = a + 0.1
        assert abs(psnr(a, b) - 20.0) < 1e-9

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(1)
        a = rng.random((12, 12, 3))
        b = rng.random((12, 12, 3))
        se = 0.0
        for i in range(12):
            for j in range(12):
                for c in range(3):
                    se += (a[i, j, c] - b[i, j, c]) ** 2
        ref = 10 * math.log10(1.0 / (se / a.size))
        assert abs(psnr(a, b) - ref) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.random((10, 10, 3))
        b = rng.random((10, 10, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


class TestSSIM:
    def test_identical(self):
        img = np.random.default_rng(3).random((32, 32, 3))
        assert ssim(img, img) == 1.0

    def test_negative_image(self):
        rng = np.random.default_rng(4)
        a = np.clip(0.5 + rng.normal(0, 0.2, (48, 48)), 0, 1)
        assert ssim(a, 1.0 - a) < 0

    def test_matches_reference_implementation(self):
        skimage = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(5)
        for _ in range(5):
            a = rng.random((40, 40, 3))
            b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
            ref = skimage.structural_similarity(
                a, b, channel_axis=2, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False, data_range=1.0)
            assert abs(ssim(a, b) - ref) < 1e-4


class TestRDPoint:
    def test_validation(self):
        with pytest.raises(ValueError):
            RDPoint(0.0, 30.0)
        with pytest.raises(ValueError):
            RDPoint(100.0, float("inf"))


def curve(rates, psnrs, tag=""):
    return [RDPoint(r, p, tag) for r, p in zip(rates, psnrs)]


class TestBD:
    RATES = [100.0, 200.0, 400.0, 800.0]
    PSNRS = [30.0, 32.0, 33.5, 34.5]

    def test_identical_curves(self):
        a = curve(self.RATES, self.PSNRS)
        d_psnr, bdbr = bd_metrics(a, a)
        assert abs(d_psnr) < 1e-9
        assert abs(bdbr) < 1e-9

    def test_uniform_shift(self):
        a = curve(self.RATES, self.PSNRS)
        b = curve(self.RATES, [p + 1.0 for p in self.PSNRS])
        d_psnr, bdbr = bd_metrics(a, b)
        assert abs(d_psnr - 1.0) <= 0.01
        assert bdbr < 0

    def test_antisymmetry(self):
        a = curve(self.RATES, self.PSNRS)
        b = curve([120.0, 250.0, 500.0, 900.0], [30.5, 32.2, 33.9, 35.0])
        assert abs(bd_metrics(a, b)[0] + bd_metrics(b, a)[0]) < 1e-6

    def test_matches_dense_numeric_integration(self):
        a = curve(self.RATES, self.PSNRS)
        b = curve([110.0, 220.0, 440.0, 880.0], [30.8, 32.6, 34.0, 35.1])
        d_psnr, _ = bd_metrics(a, b)

        def poly_avg(rates, psnrs, lo, hi):
            x = np.log10(rates)
            p = np.polyfit(x, psnrs, 3)
            xs = np.linspace(lo, hi, 20001)
            return np.trapezoid(np.polyval(p, xs), xs) / (hi - lo)

        lo = max(math.log10(self.RATES[0]), math.log10(110.0))
        hi = min(math.log10(self.RATES[-1]), math.log10(880.0))
        ref = poly_avg([p.bits for p in b], [p.psnr for p in b], lo, hi) - \
            poly_avg(self.RATES, self.PSNRS, lo, hi)
        assert abs(d_psnr - ref) <= 1e-3 * max(1.0, abs(ref))

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            bd_metrics(curve([1, 2, 4], [1, 2, 3]), curve(self.RATES, self.PSNRS))

    def test_non_overlapping_ranges(self):
        a = curve(self.RATES, self.PSNRS)
        b = curve([1e5, 2e5, 4e5, 8e5], self.PSNRS)
        with pytest.raises(ValueError):
            bd_metrics(a, b)


def test_write_rd_csv(tmp_path):
    rows = [{"level": 1, "bytes": 100, "psnr": 30.0, "ssim": 0.9},
            {"level": 2, "bytes": 250, "psnr": 32.0, "ssim": 0.95}]
    out = tmp_path / "rd.csv"
    write_rd_csv(out, rows)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "level,bytes,psnr,ssim"
    assert len(lines) == 3
