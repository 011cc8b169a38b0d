import pytest
import torch

from vjdd.core.base import ShapeError
from vjdd.core.degrade import (
    NOISE_LEVELS,
    NOISELESS,
    BayerPattern,
    NoiseParams,
    ParamError,
    RawFrame,
    add_noise,
    degrade_frame,
    isp,
    mosaic,
    noise_map,
    noise_std,
    pack_cfa,
    srgb_gamma,
    unpack_cfa,
)


class TestNoiseParams:
    def test_levels(self):
        assert NoiseParams.from_level("low").as_tuple() == (2.5e-3, 1e-2)
        assert NoiseParams.from_level("HIGH").as_tuple() == (6.4e-3, 2e-2)
        assert NOISE_LEVELS["low"] == NoiseParams(2.5e-3, 1e-2)
        with pytest.raises(ParamError, match=r'Unknown noise level "medium"'):
            NoiseParams.from_level("medium")

    def test_invalid(self):
        with pytest.raises(ParamError, match=r"sigma_s must be finite and >= 0"):
            NoiseParams(-1e-3, 0.0)
        with pytest.raises(ParamError, match=r"sigma_r must be finite and >= 0"):
            NoiseParams(0.0, float("inf"))


class TestMosaic:
    def test_patterns(self):
        x = torch.zeros(3, 2, 2)
        x[0], x[1], x[2] = 1.0, 2.0, 3.0
        assert mosaic(x, "RGGB").tolist() == [[1.0, 2.0], [2.0, 3.0]]
        assert mosaic(x, "BGGR").tolist() == [[3.0, 2.0], [2.0, 1.0]]
        assert mosaic(x, "GRBG").tolist() == [[2.0, 1.0], [3.0, 2.0]]
        assert mosaic(x, BayerPattern.GBRG).tolist() == [[2.0, 3.0], [1.0, 2.0]]

    def test_tiling(self):
        x = torch.rand(2, 5, 3, 8, 6)
        cfa = mosaic(x)
        assert cfa.shape == (2, 5, 8, 6)
        assert torch.equal(cfa[..., 0::2, 0::2], x[..., 0, 0::2, 0::2])
        assert torch.equal(cfa[..., 0::2, 1::2], x[..., 1, 0::2, 1::2])
        assert torch.equal(cfa[..., 1::2, 0::2], x[..., 1, 1::2, 0::2])
        assert torch.equal(cfa[..., 1::2, 1::2], x[..., 2, 1::2, 1::2])

    def test_shapes(self):
        with pytest.raises(ShapeError, match=r"must be even for Bayer tiling"):
            mosaic(torch.rand(3, 5, 4))
        with pytest.raises(ShapeError, match=r"\(\.\.\., 3, H, W\)"):
            mosaic(torch.rand(4, 4, 4))

    def test_pack(self):
        cfa = torch.arange(16.0).view(4, 4)
        packed = pack_cfa(cfa)
        assert packed.shape == (4, 2, 2)
        assert packed[0].tolist() == [[0.0, 2.0], [8.0, 10.0]]
        assert packed[3].tolist() == [[5.0, 7.0], [13.0, 15.0]]
        assert torch.equal(unpack_cfa(packed), cfa)
        with pytest.raises(ShapeError, match=r"packed CFA"):
            unpack_cfa(torch.rand(3, 2, 2))


class TestNoise:
    def test_noiseless_is_identity(self):
        signal = torch.rand(4, 4)
        out = add_noise(signal, NOISELESS)
        assert torch.equal(out, signal)
        assert out is not signal

    def test_std(self):
        signal = torch.tensor([-1.0, 0.0, 0.25])
        std = noise_std(signal, 0.04, 0.1)
        assert torch.allclose(std, torch.tensor([0.1, 0.1, (0.01 + 0.01) ** 0.5]))

    def test_statistics(self):
        signal = torch.full((1000, 1000), 0.5, dtype=torch.float64)
        gen = torch.Generator().manual_seed(0)
        residual = add_noise(signal, NOISE_LEVELS["high"], gen) - signal
        assert abs(float(residual.mean())) < 3 * 3.6e-3**0.5 / 1000
        assert float(residual.var()) == pytest.approx(3.6e-3, rel=0.02)

    def test_reproducible(self):
        signal = torch.rand(8, 8)
        params = NOISE_LEVELS["high"]
        a = add_noise(signal, params, torch.Generator().manual_seed(3))
        b = add_noise(signal, params, torch.Generator().manual_seed(3))
        assert torch.equal(a, b)

    def test_non_finite_signal(self):
        with pytest.raises(ParamError, match=r"must be finite"):
            add_noise(torch.tensor([float("nan"), 0.0]), NOISE_LEVELS["low"])

    def test_degrade_frame(self):
        x = torch.rand(3, 3, 8, 8)
        raw = degrade_frame(x, NOISELESS, pattern="BGGR")
        assert isinstance(raw, RawFrame)
        assert raw.pattern is BayerPattern.BGGR
        assert torch.equal(raw.cfa, mosaic(x, "BGGR"))
        std = noise_map(degrade_frame(x, NOISE_LEVELS["low"])).std
        assert std.shape == (3, 8, 8)
        assert float(std.min()) >= 1e-2 - 1e-7


class TestISP:
    def test_range_and_monotone_curve(self):
        x = torch.linspace(-0.5, 1.5, 3 * 2 * 10).view(3, 2, 10)
        out = isp(x)
        assert out.shape == x.shape
        assert float(out.min()) >= 0
        assert float(out.max()) <= 1
        ramp = torch.linspace(0, 1, 101)
        curve = srgb_gamma(ramp)
        assert torch.all(curve[1:] >= curve[:-1])
        assert float(curve[0]) == 0.0
        assert float(curve[-1]) == pytest.approx(1.0)

    def test_identity_settings(self):
        x = torch.rand(2, 3, 4, 4)
        identity = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
        assert torch.allclose(isp(x, (1, 1, 1), identity), srgb_gamma(x))

    def test_gradients_flow(self):
        x = torch.full((3, 2, 2), 0.2, requires_grad=True)
        isp(x).sum().backward()
        assert torch.isfinite(x.grad).all()
        assert float(x.grad.abs().sum()) > 0

    def test_gradcheck(self):
        # inputs in [0.3, 0.4] keep every clip of the pipeline inactive
        gen = torch.Generator().manual_seed(6)
        x = 0.3 + 0.1 * torch.rand(3, 4, 4, dtype=torch.float64, generator=gen)
        assert torch.autograd.gradcheck(isp, (x.requires_grad_(True),))

    def test_shape(self):
        with pytest.raises(ShapeError, match=r"\(\.\.\., 3, H, W\)"):
            isp(torch.rand(2, 4, 4))
