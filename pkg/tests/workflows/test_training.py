import pytest
import torch

from vjdd.core.base import ShapeError
from vjdd.core.config import ConfigError, NoiseConfig
from vjdd.core.dataio import Clip, load_checkpoint
from vjdd.core.losses import (
    ContractError,
    LossBreakdown,
    LossWeights,
    NumericError,
    loss_dtc,
)
from vjdd.workflows import training
from vjdd.workflows.training import (
    StageError,
    TrainingClipDataset,
    TrainingHaltedError,
    batch_hash,
    build_model,
    checkpoint_path,
    compute_losses,
    cosine_lr,
    ema,
    item_seed,
    model_from_checkpoint,
    read_log,
    sample_noise_params,
    summarize_log,
    train,
)


def test_item_seed():
    assert item_seed(0, 5) == 5
    assert item_seed(1, 0) != item_seed(0, 1)
    assert len({item_seed(b, i) for b in range(3) for i in range(100)}) == 300


class TestNoiseSampling:
    def test_within_ranges(self):
        config = NoiseConfig()
        gen = torch.Generator().manual_seed(0)
        for _ in range(50):
            params = sample_noise_params(gen, config)
            assert config.sigma_s_min <= params.sigma_s <= config.sigma_s_max
            assert config.sigma_r_min <= params.sigma_r <= config.sigma_r_max

    def test_log_sampling_covers_decades(self):
        gen = torch.Generator().manual_seed(1)
        values = [sample_noise_params(gen).sigma_s for _ in range(200)]
        # half of log-uniform draws in [1e-4, 1e-2] fall below 1e-3
        below = sum(v < 1e-3 for v in values)
        assert 60 < below < 140

    def test_fixed_range(self):
        config = NoiseConfig(
            sigma_s_min=2e-3, sigma_s_max=2e-3, sigma_r_min=5e-3, sigma_r_max=5e-3
        )
        params = sample_noise_params(torch.Generator().manual_seed(0), config)
        assert params.sigma_s == pytest.approx(2e-3)
        assert params.sigma_r == pytest.approx(5e-3)

    def test_linear_sampling(self):
        config = NoiseConfig(sampling="linear")
        gen = torch.Generator().manual_seed(2)
        values = [sample_noise_params(gen, config).sigma_s for _ in range(200)]
        assert sum(v < 1e-3 for v in values) < 40


def test_cosine_lr():
    assert cosine_lr(0, 100, 1e-4, 1e-6) == pytest.approx(1e-4)
    assert cosine_lr(100, 100, 1e-4, 1e-6) == pytest.approx(1e-6)
    assert cosine_lr(50, 100, 1e-4, 0.0) == pytest.approx(5e-5)
    assert cosine_lr(500, 100, 1e-4, 1e-6) == pytest.approx(1e-6)
    assert cosine_lr(3, 0, 1e-4, 1e-6) == 1e-4


def test_ema():
    assert ema([]) == []
    assert ema([1.0, 0.0], decay=0.5) == [1.0, 0.5]


class TestDataset:
    def test_items_are_deterministic(self, tiny_config):
        a = TrainingClipDataset(tiny_config, 4)
        b = TrainingClipDataset(tiny_config, 4)
        first, again = a[2], b[2]
        assert torch.equal(first["raw"], again["raw"])
        assert torch.equal(first["step_flows"], again["step_flows"])
        assert first["sigma_s"] == again["sigma_s"]
        assert not torch.equal(a[1]["raw"], first["raw"])

    def test_item_shapes(self, tiny_config):
        item = TrainingClipDataset(tiny_config, 1)[0]
        assert item["clean"].shape == (3, 3, 32, 32)
        assert item["raw"].shape == (3, 32, 32)
        assert item["std"].shape == (3, 32, 32)
        assert item["step_flows"].shape == (2, 2, 32, 32)
        assert item["masks"].shape == (3, 1, 32, 32)
        assert item["index"] == 0

    def test_seeds_change_the_stream(self, tiny_config):
        other = tiny_config.updated({"seeds.data": 10})
        a = TrainingClipDataset(tiny_config, 1)[0]
        b = TrainingClipDataset(other, 1)[0]
        assert not torch.equal(a["clean"], b["clean"])

    def test_source_clips(self, tiny_config):
        source = Clip(frames=torch.rand(4, 3, 48, 48), id="src")
        dataset = TrainingClipDataset(tiny_config, 2, [source])
        assert dataset.real
        item = dataset[0]
        assert item["clean"].shape == (3, 3, 32, 32)
        assert item["raw"].shape == (3, 32, 32)
        assert item["std"].shape == (3, 32, 32)
        assert item["motion_clean"].shape == (3, 3, 32, 32)
        assert item["motion_raw"].shape == (3, 32, 32)
        assert item["step_flows"].shape == (2, 2, 32, 32)
        again = TrainingClipDataset(tiny_config, 2, [source])[1]
        assert torch.equal(dataset[1]["clean"], again["clean"])
        assert torch.equal(dataset[1]["motion_raw"], again["motion_raw"])

    def test_real_clips_are_contiguous_crops(self, tiny_config):
        source = Clip(frames=torch.rand(4, 3, 48, 48), id="src")
        clean = TrainingClipDataset(tiny_config, 1, [source])[0]["clean"]
        matches = [
            (start, top, left)
            for start in range(2)
            for top in range(0, 17, 2)
            for left in range(0, 17, 2)
            if torch.equal(
                clean,
                source.frames[start : start + 3, :, top : top + 32, left : left + 32],
            )
        ]
        assert len(matches) == 1

    def test_source_clip_errors(self, tiny_config):
        small = Clip(frames=torch.rand(4, 3, 32, 32), id="small")
        with pytest.raises(ShapeError, match=r"smaller than the 40px base frame"):
            TrainingClipDataset(tiny_config, 1, [small])
        short = Clip(frames=torch.rand(2, 3, 48, 48), id="short")
        with pytest.raises(ShapeError, match=r"has 2 frames; training clips need 3"):
            TrainingClipDataset(tiny_config, 1, [short])

    def test_batch_hash(self, tiny_config):
        item = TrainingClipDataset(tiny_config, 1)[0]
        assert batch_hash(item) == batch_hash(dict(item))
        changed = dict(item, raw=item["raw"] + 1)
        assert batch_hash(changed) != batch_hash(item)


def _batch(item):
    return {k: v.unsqueeze(0) for k, v in item.items() if torch.is_tensor(v)}


class TestComputeLosses:
    def test_temporal_terms_use_motion_clip(self, tiny_config):
        source = Clip(frames=torch.rand(4, 3, 48, 48), id="src")
        batch = _batch(TrainingClipDataset(tiny_config, 1, [source])[0])
        weights = LossWeights(lam=0.0, alpha=1.0, beta=0.0, gamma=0.0)
        out = compute_losses(
            batch["clean"],
            batch,
            weights,
            tiny_config,
            motion_restored=batch["motion_clean"],
        )
        eps = tiny_config.loss.eps
        flows, masks = batch["step_flows"], batch["masks"]
        expected = loss_dtc(batch["motion_clean"], flows, masks, eps)
        assert torch.equal(out.l_dtc, expected)
        assert float(out.l_r) == pytest.approx(6 * eps)

    def test_long_term_term_is_never_dropped(self, tiny_config):
        item = TrainingClipDataset(tiny_config, 1)[0]
        batch = _batch(item)
        short = {
            "clean": batch["clean"][:, :2],
            "step_flows": batch["step_flows"][:, :1],
            "masks": batch["masks"][:, :2],
        }
        weights = LossWeights(lam=0.0, alpha=0.0, beta=0.2, gamma=0.0)
        with pytest.raises(ContractError, match=r"A gap of 2 needs more than 2"):
            compute_losses(short["clean"], short, weights, tiny_config)
        with pytest.raises(ConfigError, match=r"must exceed loss.long_term_gap"):
            tiny_config.updated({"loss.long_term_gap": 3})


class TestTrain:
    def test_pretrain(self, tiny_config):
        result = train(tiny_config, "pretrain", sources=[])
        assert result.steps == 2
        assert result.checkpoint_dir == checkpoint_path(tiny_config, "pretrain", 2)
        assert checkpoint_path(tiny_config, "pretrain", 1).is_dir()
        ckpt = load_checkpoint(result.checkpoint_dir)
        assert ckpt.stage == "pretrain"
        assert ckpt.step == 2
        assert ckpt.extra["items_consumed"] == 2
        assert ckpt.extra["first_batch_sha256"] == result.first_batch_sha256
        records = read_log(result.log_file)
        assert [r["step"] for r in records] == [1, 2]
        assert all(r["l_p"] is None and r["l_rpc"] is None for r in records)
        assert records[0]["lr"] == pytest.approx(tiny_config.schedule.lr)

    def test_full_stage_needs_pretrain(self, tiny_config):
        with pytest.raises(StageError, match=r"needs a pretrain checkpoint"):
            train(tiny_config, "full", sources=[])
        with pytest.raises(StageError, match=r'Unknown stage "both"'):
            train(tiny_config, "both", sources=[])

    def test_full_stage(self, tiny_config):
        pre = train(tiny_config, "pretrain", sources=[])
        full = train(
            tiny_config, "full", init_checkpoint=pre.checkpoint_dir, sources=[]
        )
        assert full.steps == 2
        assert load_checkpoint(full.checkpoint_dir).stage == "full"
        records = [r for r in read_log(full.log_file) if r["stage"] == "full"]
        assert all(r["l_dtc"] is not None for r in records)
        assert all(r["l_dtc_long"] is not None for r in records)
        assert all(r["l_rpc"] is not None for r in records)
        summary = summarize_log(read_log(full.log_file))
        assert set(summary) == {"pretrain", "full"}
        assert summary["full"]["steps"] == 2
        assert summary["pretrain"]["totals_consistent"]
        assert summary["full"]["totals_consistent"]
        with pytest.raises(StageError, match=r"cannot start pretraining"):
            train(tiny_config, "pretrain", init_checkpoint=full.checkpoint_dir)

    def test_full_from_scratch(self, tiny_config):
        config = tiny_config.updated({"loss.lam": 0.0, "loss.gamma": 0.0})
        result = train(config, "full", allow_scratch=True, sources=[])
        records = read_log(result.log_file)
        assert all(r["l_p"] is None and r["l_rpc"] is None for r in records)

    def test_full_stage_on_real_clips(self, tiny_config):
        source = Clip(frames=torch.rand(4, 3, 48, 48), id="src")
        result = train(tiny_config, "full", allow_scratch=True, sources=[source])
        records = read_log(result.log_file)
        assert [r["step"] for r in records] == [1, 2]
        assert all(r["l_dtc"] is not None and r["l_rpc"] is not None for r in records)
        assert summarize_log(records)["full"]["totals_consistent"]

    def test_rerun_rewrites_its_log(self, tiny_config):
        first = train(tiny_config, "pretrain", sources=[])
        before = first.log_file.read_bytes()
        again = train(tiny_config, "pretrain", sources=[])
        assert again.log_file.read_bytes() == before
        train(tiny_config, "full", init_checkpoint=first.checkpoint_dir, sources=[])
        train(tiny_config, "full", init_checkpoint=first.checkpoint_dir, sources=[])
        stages = [r["stage"] for r in read_log(first.log_file)]
        assert stages == ["pretrain", "pretrain", "full", "full"]

    def test_resume_matches_uninterrupted(self, tiny_config, tmp_path):
        whole = train(tiny_config, "pretrain", sources=[])
        first = checkpoint_path(tiny_config, "pretrain", 1)
        resumed_config = tiny_config.updated({"paths.work_dir": str(tmp_path / "r")})
        resumed = train(resumed_config, "pretrain", init_checkpoint=first, sources=[])
        assert resumed.steps == 2
        assert resumed.first_batch_sha256 == whole.first_batch_sha256
        for name, value in whole.checkpoint.params.items():
            assert torch.allclose(resumed.checkpoint.params[name], value), name
        assert [r["step"] for r in read_log(resumed.log_file)] == [2]

    def test_initialization_is_seeded(self, tiny_config):
        a, b = build_model(tiny_config), build_model(tiny_config)
        for (name, p), q in zip(a.named_parameters(), b.parameters()):
            assert torch.equal(p, q), name
        c = build_model(tiny_config.updated({"seeds.init": 9}))
        conv_a, conv_c = a.extractor.body[0][0], c.extractor.body[0][0]
        assert not torch.equal(conv_a.weight, conv_c.weight)

    def test_model_from_checkpoint(self, tiny_config):
        result = train(tiny_config, "pretrain", sources=[])
        model = model_from_checkpoint(result.checkpoint_dir)
        assert not model.training
        assert model.buffer_size == 3
        for name, value in model.state_dict().items():
            assert torch.equal(value, result.checkpoint.params[name])

    def test_halts_on_non_finite_loss(self, tiny_config, monkeypatch):
        calls = {"n": 0}
        real = training.compute_losses

        def failing(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 2:
                raise NumericError("Loss component l_r is not finite.")
            return real(*args, **kwargs)

        monkeypatch.setattr(training, "compute_losses", failing)
        with pytest.raises(TrainingHaltedError, match=r"step 1") as excinfo:
            train(tiny_config, "pretrain", sources=[])
        assert excinfo.value.step == 1
        assert excinfo.value.checkpoint_dir == checkpoint_path(
            tiny_config, "pretrain", 1
        )


def test_summarize_log_detects_inconsistent_totals():
    weights = {"lam": 0.0, "alpha": 0.5, "beta": 0.0, "gamma": 0.0}
    good = {"stage": "full", "step": 1, "lr": 1e-4, "l_r": 1.0, "l_dtc": 2.0}
    good.update(total=2.0, weights=weights)
    bad = dict(good, step=2, total=2.5)
    assert summarize_log([good])["full"]["totals_consistent"]
    summary = summarize_log([good, bad])
    assert not summary["full"]["totals_consistent"]
    assert summary["full"]["l_r_ema"] == pytest.approx(1.0)
    assert summary["full"]["lr"] == 1e-4


def test_logged_total_is_the_optimized_total():
    weights = LossWeights(lam=0.0, alpha=0.5, beta=0.0, gamma=0.0)
    breakdown = LossBreakdown(
        total=torch.tensor(9.0), weights=weights, l_r=torch.tensor(1.0)
    )
    record = breakdown.as_record()
    assert record["total"] == 9.0
    record.update(stage="pretrain", step=1, lr=1e-4, weights=vars(weights))
    assert not summarize_log([record])["pretrain"]["totals_consistent"]
