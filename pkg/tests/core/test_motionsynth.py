import pytest
import torch
from monty.tempfile import ScratchDir

from vjdd.core.base import ShapeError
from vjdd.core.degrade import NOISE_LEVELS, NOISELESS, mosaic, noise_std
from vjdd.core.motionsynth import (
    MotionParams,
    affine_flow,
    bilinear_sample,
    compose_flows,
    gap_flows,
    load_synthetic_clip,
    random_texture,
    sample_step_flow,
    save_synthetic_clip,
    synth_clip,
    warp,
)


def constant_flow(u, v, height=8, width=8, dtype=torch.float64):
    flow = torch.zeros(2, height, width, dtype=dtype)
    flow[0], flow[1] = u, v
    return flow


class TestWarp:
    def test_zero_flow_is_identity(self):
        img = torch.rand(2, 3, 6, 8)
        out, mask = warp(img, torch.zeros(2, 2, 6, 8))
        assert torch.equal(out, img)
        assert torch.equal(mask, torch.ones(2, 1, 6, 8))

    def test_integer_shift(self):
        img = torch.arange(64.0, dtype=torch.float64).view(1, 8, 8)
        out, mask = warp(img, constant_flow(2, 1))
        assert torch.equal(out[0, :7, :6], img[0, 1:, 2:])
        assert mask[0, :7, :6].eq(1).all()
        assert mask[0, 7].eq(0).all()
        assert mask[0, :, 6:].eq(0).all()

    def test_fractional_shift_interpolates(self):
        img = torch.arange(8.0, dtype=torch.float64).view(1, 1, 8).expand(1, 8, 8)
        out, _ = warp(img, constant_flow(0.25, 0))
        assert torch.allclose(out[0, :, :7], img[0, :, :7] + 0.25)

    def test_broadcast_flow(self):
        img = torch.rand(3, 1, 8, 8, dtype=torch.float64)
        out, _ = warp(img, constant_flow(1, 0).unsqueeze(0))
        assert torch.equal(out[:, :, :, :7], img[:, :, :, 1:])

    def test_shape_errors(self):
        with pytest.raises(ShapeError, match=r"does not match a 8x8 frame"):
            warp(torch.rand(1, 8, 8), torch.zeros(2, 4, 4))
        with pytest.raises(ShapeError, match=r"Flow batch 2 does not match"):
            warp(torch.rand(3, 1, 8, 8), torch.zeros(2, 2, 8, 8))

    def test_gradients(self):
        img = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
        flow = constant_flow(0.3, -0.4).unsqueeze(0).requires_grad_(True)
        warp(img, flow)[0].sum().backward()
        assert float(img.grad.abs().sum()) > 0
        assert torch.isfinite(flow.grad).all()

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(3)
        img = torch.rand(1, 2, 6, 6, dtype=torch.float64, generator=gen)
        flow = 0.1 + 0.3 * torch.rand(1, 2, 6, 6, dtype=torch.float64, generator=gen)
        img.requires_grad_(True)
        flow.requires_grad_(True)
        assert torch.autograd.gradcheck(lambda x, f: warp(x, f)[0], (img, flow))

    def test_bilinear_sample_exact_on_grid(self):
        img = torch.rand(1, 2, 4, 4)
        ys, xs = torch.meshgrid(torch.arange(4.0), torch.arange(4.0), indexing="ij")
        out = bilinear_sample(img, xs.unsqueeze(0), ys.unsqueeze(0))
        assert torch.equal(out, img)


class TestFlows:
    def test_affine_identity_and_translation(self):
        assert torch.equal(affine_flow(6, 8), torch.zeros(2, 6, 8))
        flow = affine_flow(6, 8, translation=(1.5, -2.0))
        assert torch.all(flow[0] == 1.5)
        assert torch.all(flow[1] == -2.0)

    def test_affine_rotation_about_center(self):
        flow = affine_flow(9, 9, rotation=90.0, dtype=torch.float64)
        assert torch.allclose(flow[:, 4, 4], torch.zeros(2, dtype=torch.float64))
        # (x, y) = (1, 0) from the center rotates to (0, 1)
        assert torch.allclose(flow[:, 4, 5], torch.tensor([-1.0, 1.0]).double())

    def test_compose_constant_flows_add(self):
        out = compose_flows(constant_flow(1.0, 2.0), constant_flow(-0.5, 0.25))
        assert torch.equal(out, constant_flow(0.5, 2.25))

    def test_compose_matches_two_warps(self):
        gen = torch.Generator().manual_seed(1)
        img = random_texture(48, 48, gen, dtype=torch.float64)
        a = affine_flow(48, 48, translation=(1.0, 0.5), rotation=1.0, dtype=img.dtype)
        b = affine_flow(48, 48, translation=(-0.5, 1.0), scale=1.01, dtype=img.dtype)
        once = warp(img, compose_flows(a, b))[0]
        twice = warp(warp(img, a)[0], b)[0]
        inner = (slice(None), slice(8, 40), slice(8, 40))
        assert torch.allclose(once[inner], twice[inner], atol=2e-2)

    def test_compose_shape_mismatch(self):
        with pytest.raises(ShapeError, match=r"Cannot compose flows"):
            compose_flows(torch.zeros(2, 4, 4), torch.zeros(2, 4, 6))

    def test_gap_flows(self):
        steps = torch.stack([constant_flow(k, 0.0) for k in range(1, 5)])
        assert torch.equal(gap_flows(steps, 1), steps)
        two = gap_flows(steps, 2)
        assert two.shape == (3, 2, 8, 8)
        assert [float(f[0, 0, 0]) for f in two] == [3.0, 5.0, 7.0]
        assert gap_flows(steps.unsqueeze(0), 4).shape == (1, 1, 2, 8, 8)
        with pytest.raises(ShapeError, match=r"Gap 5 is not available"):
            gap_flows(steps, 5)

    def test_step_flow_bounds(self):
        params = MotionParams(max_translation=2.0, max_rotation=0.0)
        gen = torch.Generator().manual_seed(0)
        flow = sample_step_flow(8, 8, gen, MotionParams(2.0, 0.0, 1.0, 1.0))
        assert float(flow.abs().max()) <= 2.0
        assert sample_step_flow(8, 8, gen, params).shape == (2, 8, 8)
        still = sample_step_flow(8, 8, gen, MotionParams.still())
        assert torch.equal(still, torch.zeros(2, 8, 8))


class TestSynthClip:
    def test_texture(self):
        gen = torch.Generator().manual_seed(0)
        img = random_texture(40, 24, gen)
        assert img.shape == (3, 40, 24)
        assert float(img.min()) >= 0.05
        assert float(img.max()) <= 0.95
        assert float(img.std()) > 0.01
        again = random_texture(40, 24, torch.Generator().manual_seed(0))
        assert torch.equal(img, again)

    def test_shapes_and_invariants(self, texture):
        clip = synth_clip(texture, 4, NOISE_LEVELS["low"], out_size=32, seed=5)
        assert len(clip) == 4
        assert clip.clean.shape == (4, 3, 32, 32)
        assert clip.raw.shape == (4, 32, 32)
        assert clip.step_flows.shape == (3, 2, 32, 32)
        assert clip.composed.shape == (4, 2, 32, 32)
        assert clip.masks.shape == (4, 1, 32, 32)
        assert len(clip.motion) == 3
        assert torch.equal(clip.composed[0], torch.zeros(2, 32, 32))
        assert torch.equal(clip.masks[0], torch.ones(1, 32, 32))
        assert torch.equal(clip.noise_maps, noise_std(clip.raw, 2.5e-3, 1e-2))

    def test_clean_frames_follow_composed_flow(self, texture):
        motion = MotionParams(max_translation=1.0, max_rotation=0.5)
        clip = synth_clip(texture, 3, NOISELESS, motion=motion, seed=1)
        for t in range(3):
            expected = warp(texture, clip.composed[t])[0]
            assert torch.allclose(clip.clean[t], expected, atol=1e-5)
        assert torch.equal(clip.raw, mosaic(clip.clean))

    def test_step_warp_consistency(self, texture):
        motion = MotionParams(max_translation=1.0, max_rotation=0.5)
        clip = synth_clip(texture, 3, NOISELESS, motion=motion, seed=2)
        warped, valid = warp(clip.clean[:-1], clip.step_flows)
        mask = valid * clip.masks[1:]
        err = mask * (warped - clip.clean[1:]).abs()
        assert float(err[..., 8:-8, 8:-8].max()) < 5e-2

    def test_seeded_reproducibility(self, texture):
        a = synth_clip(texture, 3, NOISE_LEVELS["high"], out_size=32, seed=11)
        b = synth_clip(texture, 3, NOISE_LEVELS["high"], out_size=32, seed=11)
        c = synth_clip(texture, 3, NOISE_LEVELS["high"], out_size=32, seed=12)
        assert torch.equal(a.raw, b.raw)
        assert torch.equal(a.step_flows, b.step_flows)
        assert not torch.equal(a.raw, c.raw)

    def test_errors(self, texture):
        with pytest.raises(ShapeError, match=r"at least 2 frames"):
            synth_clip(texture, 1, NOISELESS)
        with pytest.raises(ShapeError, match=r"is larger than"):
            synth_clip(texture, 2, NOISELESS, out_size=64)
        with pytest.raises(ShapeError, match=r"\(3, H, W\) frame"):
            synth_clip(texture.unsqueeze(0), 2, NOISELESS)

    def test_save_load(self, texture):
        clip = synth_clip(texture, 3, NOISE_LEVELS["low"], out_size=32, seed=4)
        with ScratchDir("."):
            save_synthetic_clip(clip, "clip")
            back = load_synthetic_clip("clip")
        assert back.noise_params == clip.noise_params
        assert back.pattern == clip.pattern
        assert back.seed == 4
        assert torch.equal(back.raw, clip.raw)
        assert torch.equal(back.step_flows, clip.step_flows)
        assert back.motion[0]["translation"] == list(clip.motion[0]["translation"])
