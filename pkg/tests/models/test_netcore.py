import pytest
import torch

from vjdd.core.base import ShapeError
from vjdd.core.config import ModelConfig
from vjdd.models.netcore import (
    RCM,
    ChannelAttention,
    FeatureExtractor,
    FrameBuffer,
    RestorationNet,
    SpatialAttention,
    ToRGB,
    update_buffer,
)


def tiny_net(**kwargs):
    torch.manual_seed(0)
    options = dict(
        buffer_size=3, feat_channels=4, hidden_channels=8, max_channels=16, f_max=1
    )
    options.update(kwargs)
    return RestorationNet(**options)


def raw_clip(n_frames=3, batch=None, size=32):
    gen = torch.Generator().manual_seed(1)
    shape = (n_frames, size, size) if batch is None else (batch, n_frames, size, size)
    cfa = torch.rand(shape, generator=gen)
    return cfa, torch.full(shape, 0.05)


class TestFrameBuffer:
    def test_initial_replicates_edges(self):
        feats = [torch.full((1,), float(i)) for i in range(3)]
        buf = FrameBuffer.initial(5, feats)
        assert [float(s) for s in buf.slots] == [0, 0, 0, 1, 2]
        assert float(buf.center) == 0
        short = FrameBuffer.initial(5, feats[:2])
        assert [float(s) for s in short.slots] == [0, 0, 0, 1, 1]

    def test_push_reuses_tensors(self):
        feats = [torch.full((1,), float(i)) for i in range(4)]
        buf = FrameBuffer.initial(3, feats[:2])
        new = update_buffer(buf, feats[2])
        assert len(new) == 3
        assert new.slots[0] is buf.slots[1]
        assert new.slots[1] is buf.slots[2]
        assert new.slots[2] is feats[2]
        assert new.center is feats[1]

    def test_invalid(self):
        with pytest.raises(ShapeError, match=r"odd size"):
            FrameBuffer((torch.zeros(1), torch.zeros(1)))
        with pytest.raises(ShapeError, match=r"at least one feature"):
            FrameBuffer.initial(3, [])


class TestLayers:
    def test_feature_extractor(self):
        extractor = FeatureExtractor(4)
        cfa, std = raw_clip()
        out = extractor(cfa, std)
        assert out.shape == (3, 4, 16, 16)
        assert extractor(cfa[0], std[0]).shape == (4, 16, 16)
        assert extractor.calls == 2
        with pytest.raises(ShapeError, match=r"noise map"):
            extractor(cfa, std[:2])
        with pytest.raises(ShapeError, match=r"must be even"):
            extractor(cfa[:, :15], std[:, :15])

    def test_attention(self):
        x = torch.rand(2, 8, 4, 4)
        cam = ChannelAttention(8)
        out = cam(x)
        assert out.shape == x.shape
        assert cam.last_gate.shape == (2, 8, 1, 1)
        assert bool(((cam.last_gate > 0) & (cam.last_gate < 1)).all())
        assert SpatialAttention()(x).shape == x.shape

    def test_rcm(self):
        rcm = RCM(in_channels=20, channels=8, max_channels=16)
        assert rcm.factor == 16
        out = rcm(torch.rand(1, 12, 16, 32), torch.rand(1, 8, 16, 32))
        assert out.shape == (1, 8, 16, 32)
        with pytest.raises(ShapeError, match=r"divisible by 16"):
            rcm(torch.rand(1, 12, 8, 8), torch.rand(1, 8, 8, 8))
        with pytest.raises(ShapeError, match=r"does not match"):
            rcm(torch.rand(1, 12, 16, 16), torch.rand(1, 8, 32, 32))

    def test_to_rgb(self):
        rgb = ToRGB(8)(torch.rand(2, 8, 4, 6))
        assert rgb.shape == (2, 3, 8, 12)


class TestGradcheck:
    def test_feature_extractor(self):
        torch.manual_seed(0)
        extractor = FeatureExtractor(2).double()
        gen = torch.Generator().manual_seed(2)
        cfa = torch.rand(1, 8, 8, dtype=torch.float64, generator=gen)
        std = 0.01 + 0.1 * torch.rand(1, 8, 8, dtype=torch.float64, generator=gen)
        inputs = (cfa.requires_grad_(True), std.requires_grad_(True))
        assert torch.autograd.gradcheck(extractor, inputs)

    def test_rcm(self):
        torch.manual_seed(0)
        rcm = RCM(in_channels=3, channels=2, max_channels=4).double()
        gen = torch.Generator().manual_seed(3)
        aligned = torch.rand(1, 2, 16, 16, dtype=torch.float64, generator=gen)
        hidden = torch.rand(1, 1, 16, 16, dtype=torch.float64, generator=gen)
        inputs = (aligned.requires_grad_(True), hidden.requires_grad_(True))
        assert torch.autograd.gradcheck(rcm, inputs)

    def test_to_rgb(self):
        torch.manual_seed(0)
        to_rgb = ToRGB(4).double()
        hidden = torch.rand(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(to_rgb, (hidden,))


class TestRestorationNet:
    def test_output_shapes(self):
        net = tiny_net()
        cfa, std = raw_clip()
        assert net(cfa, std).shape == (3, 3, 32, 32)
        cfa, std = raw_clip(batch=2)
        assert net(cfa, std).shape == (2, 3, 3, 32, 32)

    @pytest.mark.parametrize("n_frames", [1, 2, 5])
    def test_extracts_every_frame_once(self, n_frames):
        net = tiny_net(buffer_size=5)
        cfa, std = raw_clip(n_frames)
        net.restore(cfa, std)
        assert net.extractor.calls == n_frames

    def test_causal(self):
        net = tiny_net()
        cfa, std = raw_clip(4)
        base = net.restore(cfa, std)
        changed = cfa.clone()
        changed[3] = 1 - changed[3]
        out = net.restore(changed, std)
        # frame 3 only enters the buffer of frames 2 and 3
        assert torch.equal(out[:2], base[:2])
        assert not torch.equal(out[3], base[3])

    def test_restore_keeps_training_flag(self):
        net = tiny_net()
        net.train()
        cfa, std = raw_clip(2)
        out = net.restore(cfa, std)
        assert net.training
        assert not out.requires_grad

    def test_gradients(self):
        net = tiny_net()
        for estimator in net.glam.offset_estimators:
            torch.nn.init.normal_(estimator.g1.weight, std=0.01)
        cfa, std = raw_clip(3)
        net(cfa, std).mean().backward()
        missing = [name for name, p in net.named_parameters() if p.grad is None]
        assert missing == []
        for module in (net.extractor, net.glam.offset_estimators, net.to_rgb):
            grads = [p.grad.abs().sum() for p in module.parameters()]
            assert float(sum(grads)) > 0

    @pytest.mark.parametrize(
        "hidden_mode, hidden_alignment",
        [("none", "none"), ("shallow", "none"), ("latent", "global")],
    )
    def test_hidden_variants(self, hidden_mode, hidden_alignment):
        net = tiny_net(hidden_mode=hidden_mode, hidden_alignment=hidden_alignment)
        cfa, std = raw_clip(3)
        assert net.restore(cfa, std).shape == (3, 3, 32, 32)

    def test_no_hidden_frames_are_independent_of_history(self):
        net = tiny_net(hidden_mode="none", buffer_size=1)
        cfa, std = raw_clip(3)
        clip = net.restore(cfa, std)
        single = net.restore(cfa[2:], std[2:])
        assert torch.allclose(clip[2], single[0], atol=1e-6)

    def test_from_config(self):
        config = ModelConfig(
            buffer_size=3, feat_channels=4, hidden_channels=8, max_channels=16
        )
        net = RestorationNet.from_config(config)
        assert net.buffer_size == 3
        assert net.glam.f_max == 16

    def test_invalid(self):
        with pytest.raises(ShapeError, match=r"must be odd"):
            tiny_net(buffer_size=4)
        with pytest.raises(ValueError, match=r'Unknown hidden_mode "deep"'):
            tiny_net(hidden_mode="deep")
        with pytest.raises(ValueError, match=r'Unknown hidden_alignment "local"'):
            tiny_net(hidden_alignment="local")
        net = tiny_net()
        cfa, std = raw_clip(2)
        with pytest.raises(ShapeError, match=r"noise maps"):
            net(cfa, std[:1])
        cfa, std = raw_clip(2, size=24)
        with pytest.raises(ShapeError, match=r"divisible by 16"):
            net(cfa, std)
