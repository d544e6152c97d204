import json

import numpy as np
import pytest

from spry.cli import main, resolve_config, write_config, UsageError
from spry.data import SphereSceneSpec, load_scene, read_depth
from spry.trainer import TrainReport, load_model

TINY = ["--set", "field.feature_channels=4", "--set", "field.width=8", "--set", "field.depth=2",
        "--set", "field.color_width=8", "--set", "field.pos_bands=2", "--set", "field.dir_bands=1",
        "--set", "render.n_samples=4", "--set", "train.rays_per_batch=16"]


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    for seed in (1, 2):
        assert main(["synth", "--random", "--seed", str(seed), "--image-size", "16",
                     "--out", str(root / f"s{seed}")]) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(scenes, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--scenes", str(scenes / "s1"), str(scenes / "s2"), "--out", str(out),
                 *TINY, "--set", "train.iterations=20", "--set", "train.eval_every=10"]) == 0
    return out / "model.ckpt"


def test_synth_default_loads(tmp_path):
    assert main(["synth", "--seed", "7", "--image-size", "16", "--out", str(tmp_path / "a")]) == 0
    scene = load_scene(tmp_path / "a")
    assert len(scene.frames) == 8
    manifest = json.loads((tmp_path / "a" / "scene.json").read_text())
    assert len(manifest["frames"]) == 8
    assert SphereSceneSpec.from_dict(json.loads((tmp_path / "a" / "spec.json").read_text())).image_size == 16


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--random", "--seed", "7", "--image-size", "16", "--out", str(tmp_path / name)]) == 0
    for i in range(8):
        a = (tmp_path / "a" / "depth" / f"{i:03d}.dpth").read_bytes()
        assert a == (tmp_path / "b" / "depth" / f"{i:03d}.dpth").read_bytes()
    assert (tmp_path / "a" / "points.pnts").read_bytes() == (tmp_path / "b" / "points.pnts").read_bytes()


def test_synth_custom_spec(tmp_path):
    spec = SphereSceneSpec(n_views=5, image_size=16).to_dict()
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "c")]) == 0
    assert len(load_scene(tmp_path / "c").frames) == 5
    (tmp_path / "bad.json").write_text(json.dumps({**spec, "n_views": 0}))
    assert main(["synth", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "d")]) == 2


def test_pretrain_report(checkpoint):
    records = TrainReport.read_jsonl(checkpoint.parent / "report.jsonl")
    assert [r["iteration"] for r in records] == [10, 20]
    assert load_model(checkpoint).iteration == 20
    assert (checkpoint.parent / "config.ini").is_file()
    assert (checkpoint.parent / "images").is_dir()


def test_pretrain_missing_scene_dir(scenes, tmp_path, caplog):
    missing = tmp_path / "nope"
    code = main(["pretrain", "--scenes", str(scenes / "s1"), str(missing), "--out", str(tmp_path / "o"), *TINY])
    assert code == 1
    assert str(missing) in caplog.text
    assert not (tmp_path / "o").exists()


def test_pretrain_resume_matches_uninterrupted(scenes, tmp_path):
    args = ["--scenes", str(scenes / "s1"), str(scenes / "s2"), *TINY, "--set", "train.eval_every=3"]
    assert main(["pretrain", *args, "--set", "train.iterations=6", "--out", str(tmp_path / "full")]) == 0
    assert main(["pretrain", *args, "--set", "train.iterations=3", "--out", str(tmp_path / "half")]) == 0
    assert main(["pretrain", *args, "--set", "train.iterations=6", "--resume", str(tmp_path / "half" / "model.ckpt"),
                 "--out", str(tmp_path / "resumed")]) == 0
    full = (tmp_path / "full" / "model.ckpt").read_bytes()
    assert (tmp_path / "resumed" / "model.ckpt").read_bytes() == full
    assert [r["iteration"] for r in TrainReport.read_jsonl(tmp_path / "resumed" / "report.jsonl")] == [6]


def test_pretrain_deterministic(scenes, tmp_path):
    args = ["pretrain", "--scenes", str(scenes / "s1"), *TINY, "--set", "train.iterations=4",
            "--set", "train.eval_every=2"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


@pytest.mark.parametrize("views", [1, 2, 3])
def test_finetune_views_tagged(checkpoint, scenes, tmp_path, views):
    out = tmp_path / f"ft{views}"
    assert main(["finetune", "--checkpoint", str(checkpoint), "--scene", str(scenes / "s2"), "--views", str(views),
                 "--out", str(out), *TINY, "--set", "train.iterations=2", "--set", "train.eval_every=1"]) == 0
    records = TrainReport.read_jsonl(out / "report.jsonl")
    assert len(records) == 2
    assert all(r["view_count"] == views for r in records)


def test_finetune_freeze_audited(checkpoint, scenes, tmp_path):
    out = tmp_path / "fz"
    assert main(["finetune", "--checkpoint", str(checkpoint), "--scene", str(scenes / "s2"),
                 "--freeze", "freeze_encoder", "--out", str(out), *TINY, "--set", "train.iterations=2",
                 "--set", "train.lr=0.01"]) == 0
    assert TrainReport.read_jsonl(out / "report.jsonl")[-1]["freeze_policy"] == "freeze_encoder"
    before, after = load_model(checkpoint), load_model(out / "model.ckpt")
    assert after.params.identical_to(before.params, "encoder.", with_state=False)
    assert not after.params.identical_to(before.params, "mlp.", with_state=False)


def test_finetune_insufficient_views(checkpoint, tmp_path):
    assert main(["synth", "--n-views", "2", "--image-size", "16", "--out", str(tmp_path / "two")]) == 0
    code = main(["finetune", "--checkpoint", str(checkpoint), "--scene", str(tmp_path / "two"), "--views", "3",
                 "--out", str(tmp_path / "o"), *TINY])
    assert code == 1


def test_render_outputs_and_determinism(checkpoint, scenes, tmp_path):
    for name in ("a", "b"):
        assert main(["render", "--checkpoint", str(checkpoint), "--scene", str(scenes / "s1"), "--frames", "1,4",
                     "--out", str(tmp_path / name), *TINY]) == 0
    for stem in ("001_rgb.png", "001_depth.dpth", "001_compare.png", "004_depth.dpth"):
        assert (tmp_path / "a" / "images" / stem).read_bytes() == (tmp_path / "b" / "images" / stem).read_bytes()
    raw = (tmp_path / "a" / "images" / "001_depth.dpth").read_bytes()
    assert raw[:4] == b"DPTH"
    w, h = np.frombuffer(raw[4:12], dtype="<u4")
    assert (w, h) == (16, 16) and len(raw) == 12 + 4 * 16 * 16
    depth = read_depth(tmp_path / "a" / "images" / "001_depth.dpth")
    assert depth.dtype == np.float32 and np.isfinite(depth).all()


def test_render_bad_frame(checkpoint, scenes, tmp_path):
    assert main(["render", "--checkpoint", str(checkpoint), "--scene", str(scenes / "s1"), "--frames", "9",
                 "--out", str(tmp_path / "r"), *TINY]) == 1


@pytest.mark.filterwarnings("ignore::spry.metrics.EmptyGeometryWarning")
def test_eval_table(checkpoint, scenes, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(checkpoint), "--scene", str(scenes / "s1"), "--views", "1,2,3",
                 "--out", str(tmp_path / "e"), *TINY, "--set", "train.grid_res=8"]) == 0
    table = capsys.readouterr().out
    for col in ("PSNR 1-view", "PSNR 2-view", "PSNR 3-view", "CD 1-view", "CD 3-view"):
        assert col in table
    rows = [json.loads(line) for line in (tmp_path / "e" / "eval.jsonl").read_text().splitlines()]
    assert [r["view_count"] for r in rows] == [1, 2, 3]
    assert (tmp_path / "e" / "eval.txt").read_text().strip() == table.strip()


def test_eval_without_points(checkpoint, scenes, tmp_path, capsys):
    import shutil
    scene_dir = tmp_path / "nopts"
    shutil.copytree(scenes / "s1", scene_dir)
    manifest = json.loads((scene_dir / "scene.json").read_text())
    del manifest["points"]
    (scene_dir / "scene.json").write_text(json.dumps(manifest))
    assert main(["eval", "--checkpoint", str(checkpoint), "--scene", str(scene_dir), "--views", "2",
                 "--out", str(tmp_path / "e"), *TINY]) == 0
    out = capsys.readouterr().out
    assert "absent" in out and "PSNR 2-view" in out


def test_config_echo_round_trip(tmp_path):
    cfg = resolve_config(None, ["train.lr=0.002", "render.background=0,0,0", "field.width=12",
                                "train.depth_supervision=false"])
    write_config(cfg, tmp_path / "c.ini")
    again = resolve_config(tmp_path / "c.ini")
    assert again == cfg
    assert again.train.lr == 0.002 and again.render.background == (0.0, 0.0, 0.0)


def test_echoed_config_reproduces_run(scenes, tmp_path):
    args = ["pretrain", "--scenes", str(scenes / "s1"), *TINY, "--set", "train.iterations=3",
            "--set", "train.eval_every=3"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main(["pretrain", "--scenes", str(scenes / "s1"), "--config", str(tmp_path / "a" / "config.ini"),
                 "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert (tmp_path / "a" / "config.ini").read_text() == (tmp_path / "b" / "config.ini").read_text()


def test_unknown_config_keys(tmp_path):
    with pytest.raises(UsageError):
        resolve_config(None, ["train.bogus=1"])
    with pytest.raises(UsageError):
        resolve_config(None, ["nosuch.key=1"])
    (tmp_path / "c.ini").write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(UsageError):
        resolve_config(tmp_path / "c.ini")
    assert main(["pretrain", "--scenes", "x", "--out", str(tmp_path / "o"), "--set", "train.bogus=1"]) == 1


def test_usage_errors_exit_1():
    with pytest.raises(SystemExit) as info:
        main(["synth"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for key in ("train.lambda_depth", "field.pos_bands", "render.n_samples", "train.freeze_policy"):
        assert key in out


def test_runtime_failure_exit_2(scenes, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(bad), "--scene", str(scenes / "s1"), "--out", str(tmp_path / "e")]) == 2
