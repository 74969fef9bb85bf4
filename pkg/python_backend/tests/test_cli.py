import json
import zipfile

import pytest

from cdasr.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, SUMMARY_ROW, build_parser, main, resolve_config
from cdasr.models import AdaptConfig, EncoderSpec, NetworkConfig, RunConfig, TrainConfig
from cdasr.services.checkpoint import load_checkpoint
from cdasr.services.data_pipeline import build_dataset
from cdasr.services.metrics_analysis import evaluate_bicubic
from cdasr.utils.csv_log import read_csv

pytestmark = pytest.mark.integration


@pytest.fixture
def toy_config(tmp_path, tiny_net):
    cfg = RunConfig(
        network=tiny_net(2),
        encoder=EncoderSpec.stub(),
        train=TrainConfig(batch_size=2, patch_size=8, max_steps=3, checkpoint_every=2),
        adapt=AdaptConfig(episodes=2, shots=2, query_size=1, patch_size=8),
    )
    return cfg.write(tmp_path / "toy.json")


@pytest.fixture
def hr_dir(image_dir):
    return image_dir(count=4, size=32, name="hr")


def archive_members(path):
    """Every archive member except the run metadata, name to bytes."""
    with zipfile.ZipFile(path) as zf:
        return {name: zf.read(name) for name in zf.namelist() if name != "meta.json"}


@pytest.fixture
def trained(toy_config, hr_dir, tmp_path):
    out = tmp_path / "train_run"
    assert main(["train", "--config", str(toy_config), "--hr-dir", str(hr_dir), "--out", str(out)]) == EXIT_OK
    return out


def test_defaults_resolve_without_a_config_file():
    cfg = resolve_config(build_parser().parse_args(["train", "--hr-dir", "data"]))
    assert cfg.train.learning_rate == 1e-4
    assert cfg.train.batch_size == 16
    assert cfg.encoder.backend == "pretrained"
    assert cfg.network.clip_dim == 512


def test_flags_override_the_config_file(toy_config):
    args = build_parser().parse_args(
        ["eval", "--config", str(toy_config), "--scale", "4", "--seed", "9", "--protocol", "rgb"]
    )
    cfg = resolve_config(args)
    assert cfg.network.scale == 4
    assert cfg.train.seed == cfg.adapt.seed == 9
    assert cfg.protocol == "rgb_full"
    assert cfg.network.backbone_channels == 8


def test_switching_to_the_stub_encoder_follows_its_dimension():
    cfg = resolve_config(build_parser().parse_args(["train", "--encoder", "stub"]))
    assert cfg.encoder.backend == "stub"
    assert cfg.network.clip_dim == cfg.encoder.embed_dim == 64


def test_degrade_writes_lr_images_and_manifest(hr_dir, tmp_path):
    out = tmp_path / "lr"
    assert main(["degrade", "--hr-dir", str(hr_dir), "--scale", "2", "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in (out / "X2").glob("*.png")) == [f"img_{i:03d}.png" for i in range(4)]
    manifest = json.loads((out / "X2" / "manifest.json").read_text())
    assert manifest["scale"] == 2 and len(manifest["pairs"]) == 4


def test_train_writes_log_and_checkpoints(trained):
    assert len(read_csv(trained / "train_log.csv")) == 3
    assert (trained / "checkpoints" / "step_2").exists()
    assert load_checkpoint(trained / "checkpoints" / "final").meta.step == 3
    resolved = RunConfig.from_file(trained / "config.resolved.json")
    assert resolved.train.max_steps == 3


def test_train_resumes_from_a_checkpoint(trained, toy_config, hr_dir, tmp_path):
    out = tmp_path / "resumed"
    code = main([
        "train", "--config", str(toy_config), "--hr-dir", str(hr_dir), "--out", str(out),
        "--max-steps", "4", "--resume", str(trained / "checkpoints" / "step_2"),
    ])
    assert code == EXIT_OK
    assert [int(r["step"]) for r in read_csv(out / "train_log.csv")] == [2, 3]


def test_train_on_a_paired_lr_directory(toy_config, hr_dir, tmp_path):
    lr_out = tmp_path / "lr"
    assert main(["degrade", "--hr-dir", str(hr_dir), "--scale", "2", "--out", str(lr_out)]) == EXIT_OK
    out = tmp_path / "paired_run"
    code = main([
        "train", "--config", str(toy_config), "--hr-dir", str(hr_dir),
        "--lr-dir", str(lr_out / "X2"), "--out", str(out),
    ])
    assert code == EXIT_OK
    assert len(read_csv(out / "train_log.csv")) == 3


def test_eval_writes_one_row_per_image(trained, toy_config, hr_dir, tmp_path):
    out = tmp_path / "eval"
    code = main([
        "eval", "--config", str(toy_config), "--checkpoint", str(trained / "checkpoints" / "final"),
        "--hr-dir", str(hr_dir), "--out", str(out),
    ])
    assert code == EXIT_OK
    *images, mean = read_csv(out / "metrics.csv")
    assert [r["image"] for r in images] == [f"img_{i:03d}.png" for i in range(4)]
    assert mean["image"] == SUMMARY_ROW
    for key in ("psnr", "ssim"):
        assert float(mean[key]) == pytest.approx(sum(float(r[key]) for r in images) / 4, rel=1e-12)
    assert not (out / "summary.csv").exists()


def test_eval_without_checkpoint_scores_bicubic(toy_config, hr_dir, tmp_path):
    out = tmp_path / "bicubic"
    assert main(["eval", "--config", str(toy_config), "--hr-dir", str(hr_dir), "--out", str(out)]) == EXIT_OK
    *images, mean = read_csv(out / "metrics.csv")
    baseline = evaluate_bicubic(build_dataset(hr_dir, 2))
    assert len(images) == 4
    assert mean["image"] == SUMMARY_ROW
    assert float(mean["psnr"]) == pytest.approx(baseline.psnr_db, rel=1e-12)
    assert float(mean["ssim"]) == pytest.approx(baseline.ssim, rel=1e-12)


def test_scale_mismatch_is_a_usage_error(trained, toy_config, hr_dir, tmp_path):
    code = main([
        "eval", "--config", str(toy_config), "--checkpoint", str(trained / "checkpoints" / "final"),
        "--hr-dir", str(hr_dir), "--scale", "4", "--out", str(tmp_path / "bad"),
    ])
    assert code == EXIT_USAGE


def test_adapt_with_zero_episodes_keeps_the_source(trained, toy_config, hr_dir, tmp_path):
    out = tmp_path / "adapt0"
    source = trained / "checkpoints" / "final"
    code = main([
        "adapt", "--config", str(toy_config), "--checkpoint", str(source),
        "--target-dir", str(hr_dir), "--episodes", "0", "--out", str(out),
    ])
    assert code == EXIT_OK
    adapted = load_checkpoint(out / "adapted")
    assert adapted.meta.kind == "adapt"
    assert adapted.params.equal(load_checkpoint(source).params)
    assert adapted.alphas is None
    assert read_csv(out / "episodes.csv") == []
    assert archive_members(out / "adapted") == archive_members(source)


def test_adapt_to_the_inverted_domain(trained, toy_config, hr_dir, tmp_path):
    out = tmp_path / "adapt"
    code = main([
        "adapt", "--config", str(toy_config), "--checkpoint", str(trained / "checkpoints" / "final"),
        "--hr-dir", str(hr_dir), "--invert", "--out", str(out),
    ])
    assert code == EXIT_OK
    episodes = read_csv(out / "episodes.csv")
    assert [int(r["episode"]) for r in episodes] == [0, 1]
    assert load_checkpoint(out / "adapted").alphas is not None


def test_analyze_domains_writes_every_artifact(toy_config, image_dir, tmp_path):
    a = image_dir(count=3, size=16, name="a", seed=0)
    b = image_dir(count=3, size=16, name="b", seed=10)
    out = tmp_path / "analysis"
    code = main([
        "analyze-domains", "--config", str(toy_config), "--dataset", f"a={a}", "--dataset", f"b={b}",
        "--with-inverted", "--kernel", "rbf", "--out", str(out),
    ])
    assert code == EXIT_OK
    coords = read_csv(out / "coords.csv")
    assert len(coords) == 9
    assert {r["tag"] for r in coords} == {"a", "b", "a_inverted"}
    matrix = read_csv(out / "mmd_matrix.csv")
    assert [r["tag"] for r in matrix] == ["a", "b", "a_inverted"]
    gap = json.loads((out / "domain_gap.json").read_text())
    assert gap["kernel"].startswith("rbf(")
    assert gap["n_a"] == 3 and gap["n_b"] == 6


def test_sweep_trains_one_model_per_cell(toy_config, hr_dir, tmp_path):
    out = tmp_path / "sweep"
    code = main([
        "sweep-weights", "--config", str(toy_config), "--hr-dir", str(hr_dir), "--out", str(out),
        "--max-steps", "1", "--perceptual", "0.1", "--semantic", "0.01", "0.02",
    ])
    assert code == EXIT_OK
    rows = read_csv(out / "sweep.csv")
    assert [(float(r["lambda_perc"]), float(r["lambda_sem"])) for r in rows] == [(0.1, 0.01), (0.1, 0.02)]


@pytest.mark.parametrize(
    "argv",
    [
        ["unknown-command"],
        ["degrade", "--hr-dir", "x", "--out", "y"],
        ["degrade", "--hr-dir", "x", "--scale", "3", "--out", "y"],
        ["analyze-domains", "--dataset", "no-separator"],
    ],
)
def test_bad_arguments_exit_with_usage(argv):
    assert main(argv) == EXIT_USAGE


def test_invalid_config_file_is_a_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rat": 0.1}}))
    assert main(["train", "--config", str(bad), "--hr-dir", "x", "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_missing_hr_directory_is_reported(toy_config, tmp_path):
    code = main(["train", "--config", str(toy_config), "--hr-dir", str(tmp_path / "absent"), "--out", str(tmp_path / "o")])
    assert code == EXIT_USAGE


def test_corrupt_checkpoint_is_a_runtime_failure(toy_config, hr_dir, tmp_path):
    junk = tmp_path / "junk"
    junk.write_bytes(b"nope")
    code = main([
        "eval", "--config", str(toy_config), "--checkpoint", str(junk), "--hr-dir", str(hr_dir),
        "--out", str(tmp_path / "o"),
    ])
    assert code == EXIT_FAILURE
