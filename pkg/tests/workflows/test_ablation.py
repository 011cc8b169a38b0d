import json
from pathlib import Path

import pytest
from monty.tempfile import ScratchDir

from vjdd.workflows.ablation import AblationReport, VariantResult, run_ablation
from vjdd.workflows.evaluation import EvaluationReport, held_out_clips
from vjdd.workflows.sets import AblationGenerator, ExperimentSpec


@pytest.fixture
def eval_clips():
    return held_out_clips(count=1, size=32, n_frames=3, margin=4)


def test_run_ablation(tiny_config, eval_clips):
    generator = AblationGenerator(
        base_config=tiny_config, variants=("w/o L_t", "full model")
    )
    with ScratchDir("."):
        report = run_ablation(generator.get_specs(), "runs", eval_clips=eval_clips)
        pretrain_dirs = list(Path("runs").glob("pretrain_*"))
        report.to_file("report.json")
        with open("report.json") as f:
            data = json.load(f)

    assert len(pretrain_dirs) == 1
    labels = [v.label for v in report.variants]
    assert labels == ["w/o L_t", "full model"]
    first, second = report.variants
    assert first.pretrain_checkpoint_dir == second.pretrain_checkpoint_dir
    assert first.checkpoint_dir != second.checkpoint_dir
    assert report.data_consistent
    assert [b.restorer for b in report.baselines] == [
        "bilinear",
        "bilinear+bilateral",
    ]
    assert all(len(v.report.lp) == 1 for v in report.variants)

    means = report.means()
    assert set(means) == {"w/o L_t", "full model", "bilinear", "bilinear+bilateral"}
    table = report.table().splitlines()
    assert len(table) == 6

    assert data["level"] == "low"
    assert data["data_consistent"] is True
    restored = EvaluationReport.from_dict(data["variants"][1]["report"])
    assert restored.restorer == "full model"


def _variant(label, sha):
    return VariantResult(
        label=label,
        checkpoint_dir=label,
        pretrain_checkpoint_dir="pre",
        first_batch_sha256=sha,
        report=EvaluationReport(label, "low", 0),
    )


def test_data_consistency_flag():
    report = AblationReport(level="low")
    assert report.data_consistent
    report.variants = [
        _variant("a", "0" * 64),
        _variant("b", "0" * 64),
    ]
    assert report.data_consistent
    report.variants.append(_variant("c", "1" * 64))
    assert not report.data_consistent


def test_invalid_specs(tiny_config):
    with pytest.raises(ValueError, match=r"at least one variant"):
        run_ablation([])
    specs = [
        ExperimentSpec(config=tiny_config, eval_level="low"),
        ExperimentSpec(config=tiny_config, eval_level="high"),
    ]
    with pytest.raises(ValueError, match=r"share one evaluation level"):
        run_ablation(specs)
