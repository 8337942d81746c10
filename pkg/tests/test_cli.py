from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from splatcycle.cli import ConfigError, child_seed, load_checkpoint, main, resolve_config
from splatcycle.io import read_ftc, read_kv

RES = "16"
TINY = ["--denoiser_width", "8", "--reconstructor_width", "8"]


def tree_bytes(root: Path, skip=("manifest.txt",)) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--n_scenes", "3", "--seed", "7", "--resolution", RES]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--steps", "4",
                 "--pretrain_steps", "2", "--learning_rate", "1e-3", "--checkpoint_every", "2", *TINY]) == 0
    return root


def scene_dir(ws):
    return sorted((ws / "data").glob("scene_*"))[0]


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--n_scenes", "2", "--seed", "7",
                     "--resolution", RES]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and len(a) == 4
    man = read_kv(tmp_path / "a" / "manifest.txt")
    assert man["command"] == "gen-data" and man["n_scenes"] == "2" and "wall_clock_s" in man


def test_gen_data_zero_scenes(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--n_scenes", "0", "--seed", "1"]) == 0
    assert [p.name for p in (tmp_path / "d").iterdir()] == ["manifest.txt"]


def test_missing_key_names_it(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--seed", "1"]) == 2
    assert "'n_scenes'" in capsys.readouterr().err


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(f"# dataset\nout={tmp_path / 'd'}\nn_scenes=5\nseed=3\nresolution={RES}\n")
    assert main(["gen-data", "--config", str(cfg), "--n_scenes", "1"]) == 0
    assert len(list((tmp_path / "d").glob("scene_*"))) == 1


def test_unknown_key_and_bad_value(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("out=x\nn_scenes=1\nseed=1\ncolour=red\n")
    assert main(["gen-data", "--config", str(cfg)]) == 2
    assert "'colour'" in capsys.readouterr().err
    assert main(["gen-data", "--out", "x", "--n_scenes", "many", "--seed", "1"]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "missing.txt")]) == 2
    assert main(["no-such-command"]) == 2


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.text(alphabet="abc=#\n 1", max_size=30))
def test_malformed_configs_never_crash(tmp_path, text):
    cfg = tmp_path / "fuzz.txt"
    cfg.write_text(text)
    code = main(["turntable", "--config", str(cfg)])
    assert code in (1, 2)


def test_unwritable_output_is_runtime_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--out", str(blocker / "sub"), "--n_scenes", "1", "--seed", "1"]) == 1


def test_resolve_config_types():
    cfg = resolve_config("turntable", {"cloud": "c", "out": "o", "n_frames": "3"}, {"elevation": "5"})
    assert cfg["n_frames"] == 3 and cfg["elevation"] == 5.0 and cfg["resolution"] == 64
    with pytest.raises(ConfigError):
        resolve_config("turntable", {"out": "o"}, {})


def test_child_seeds_are_named_streams():
    assert child_seed(1, "a") == child_seed(1, "a")
    assert child_seed(1, "a") != child_seed(1, "b") != child_seed(2, "a")


def test_train_outputs(workspace):
    run = workspace / "run"
    rows = (run / "loss_log.csv").read_text().splitlines()
    assert rows[0] == "step,L_total,L_img,L_mask,grad_norm,clipped"
    assert len(rows) == 5
    assert (run / "checkpoints" / "step_000002" / "denoiser.ftc").exists()
    assert (run / "loss_curve.png").exists()
    man = read_kv(run / "manifest.txt")
    assert man["scenes_used"] == "3" and man["scenes_skipped"] == "0"


def test_frozen_denoiser_bytes_unchanged(workspace):
    ck = workspace / "run" / "checkpoints"
    assert (ck / "step_000002" / "denoiser.ftc").read_bytes() == (ck / "step_000004" / "denoiser.ftc").read_bytes()
    assert (ck / "step_000002" / "reconstructor.ftc").read_bytes() != (ck / "step_000004" / "reconstructor.ftc").read_bytes()


def test_resume_matches_uninterrupted(workspace, tmp_path):
    ck = workspace / "run" / "checkpoints"
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r"), "--steps", "4",
                 "--learning_rate", "1e-3", "--resume", str(ck / "step_000002"), *TINY]) == 0
    resumed = read_ftc(tmp_path / "r" / "checkpoints" / "step_000004" / "reconstructor.ftc")
    straight = read_ftc(ck / "step_000004" / "reconstructor.ftc")
    worst = max((resumed[k].float() - straight[k].float()).abs().max().item() for k in straight if k != "__config__")
    assert worst < 1e-5


def test_corrupted_scene_skipped(workspace, tmp_path):
    import shutil

    data = tmp_path / "data"
    shutil.copytree(workspace / "data", data)
    victim = sorted(data.glob("scene_*"))[1]
    (victim / "views.ftc").write_bytes(b"garbage")
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--steps", "1", *TINY]) == 0
    man = read_kv(tmp_path / "r" / "manifest.txt")
    assert man["scenes_skipped"] == "1" and man["scenes_used"] == "2"


def test_sample_deterministic_ply(workspace, tmp_path):
    ck = workspace / "run" / "checkpoints" / "step_000004"
    args = ["sample", "--checkpoint", str(ck), "--scene", str(scene_dir(workspace)), "--steps", "3", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "cloud.ply").read_bytes() == (tmp_path / "b" / "cloud.ply").read_bytes()
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_sample_modes(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoints" / "step_000004")
    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "t"), "--mode", "text_to_3d",
                 "--prior", "pure_noise", "--steps", "2", "--tokens", "red,ring"]) == 0
    assert (tmp_path / "t" / "cloud.ply").exists()
    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "i"), "--steps", "2"]) == 2
    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "i"), "--steps", "2", "--mode", "nope"]) == 2


def test_sample_from_png_with_learned_prior(workspace, tmp_path):
    from splatcycle.io import save_png

    png = tmp_path / "ref.png"
    save_png(png, torch.rand(3, 16, 16))
    ck = str(workspace / "run" / "checkpoints" / "step_000004")
    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "o"), "--input", str(png),
                 "--prior", "learned_multiview", "--steps", "2", "--save_steps", "true"]) == 0
    assert (tmp_path / "o" / "step_strip.png").exists()
    assert len(list((tmp_path / "o" / "steps").glob("*.png"))) == 2 * 4 * 2


def test_checkpoint_config_mismatch(workspace, tmp_path, capsys):
    ck = str(workspace / "run" / "checkpoints" / "step_000004")
    code = main(["sample", "--checkpoint", ck, "--scene", str(scene_dir(workspace)), "--out", str(tmp_path / "o"),
                 "--denoiser_width", "16"])
    assert code == 2
    assert "denoiser_width" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path)


def test_eval_ground_truth_cloud(workspace, tmp_path):
    from splatcycle.cli import write_cloud
    from splatcycle.dataset import load_scene

    scene = scene_dir(workspace)
    write_cloud(tmp_path / "gt.ftc", load_scene(scene).cloud)
    assert main(["eval", "--cloud", str(tmp_path / "gt.ftc"), "--scene", str(scene), "--out", str(tmp_path / "e")]) == 0
    rep = read_kv(tmp_path / "e" / "eval.txt")
    assert float(rep["psnr"]) == 99.0
    assert rep["consistency"] == rep["gt_consistency"]
    assert (tmp_path / "e" / "eval_views.csv").exists() and (tmp_path / "e" / "eval_metrics.png").exists()


def test_eval_empty_cloud_and_missing_gt(workspace, tmp_path):
    from splatcycle.cli import write_cloud
    from splatcycle.splat import GaussianCloud

    write_cloud(tmp_path / "empty.ftc", GaussianCloud.empty())
    scene = str(scene_dir(workspace))
    assert main(["eval", "--cloud", str(tmp_path / "empty.ftc"), "--scene", scene, "--out", str(tmp_path / "e")]) == 0
    rep = read_kv(tmp_path / "e" / "eval.txt")
    # a blank render is trivially consistent across views
    assert float(rep["psnr"]) > 0 and float(rep["consistency"]) == 0
    assert main(["eval", "--cloud", str(tmp_path / "empty.ftc"), "--scene", str(tmp_path), "--out",
                 str(tmp_path / "e2")]) == 2


def test_turntable(workspace, tmp_path):
    from splatcycle.cli import write_cloud
    from splatcycle.dataset import load_scene

    write_cloud(tmp_path / "c.ftc", load_scene(scene_dir(workspace)).cloud)
    base = ["turntable", "--cloud", str(tmp_path / "c.ftc"), "--resolution", "16"]
    assert main(base + ["--out", str(tmp_path / "one"), "--n_frames", "1"]) == 0
    assert len(list((tmp_path / "one").glob("frame_*.png"))) == 1
    assert main(base + ["--out", str(tmp_path / "a"), "--n_frames", "4"]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--n_frames", "4"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    # frame n would sit at azimuth 360, the same pose as frame 0
    assert main(base + ["--out", str(tmp_path / "c"), "--n_frames", "2"]) == 0
    assert (tmp_path / "a" / "frame_0000.png").read_bytes() == (tmp_path / "c" / "frame_0000.png").read_bytes()
    assert (tmp_path / "a" / "frame_0002.png").read_bytes() == (tmp_path / "c" / "frame_0001.png").read_bytes()
    assert main(base + ["--out", str(tmp_path / "z"), "--n_frames", "0"]) == 2
