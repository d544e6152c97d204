import numpy as np
import pytest
import torch

import spry.trainer as trainer
from spry.data import SphereSceneSpec, make_synthetic_scene, normalize_scene, random_sphere_spec, with_frames
from spry.errors import TrainingDivergence
from spry.field import FieldConfig
from spry.renderer import RenderConfig
from spry.trainer import (Model, TrainConfig, TrainReport, apply_freeze_policy, finetune, heldout_view_indices,
                          input_view_indices, load_model, make_batch, pretrain, save_model, train_step)

SMALL = FieldConfig(feature_channels=8, width=16, depth=2, color_width=8, pos_bands=3, dir_bands=2)
RC = RenderConfig(n_samples=8)


def tiny_scene(seed=0, **kw):
    spec = random_sphere_spec(seed, image_size=16, n_points=200, **kw)
    return make_synthetic_scene(spec, seed, name=f"s{seed}")


def ft_config(**kw):
    base = dict(iterations=4, rays_per_batch=32, eval_every=2, ramp_iters=2, views=2)
    base.update(kw)
    return TrainConfig.finetune_defaults(**base)


def pre_config(**kw):
    base = dict(iterations=6, rays_per_batch=32, eval_every=3, ramp_iters=3, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(freeze_policy="freeze_all")
    with pytest.raises(ValueError):
        TrainConfig(rays_per_batch=0)
    with pytest.raises(ValueError):
        TrainConfig(views=4)
    with pytest.raises(ValueError):
        TrainConfig(stage="warmup")
    assert TrainConfig().learning_rate == 5e-4
    assert TrainConfig.finetune_defaults().learning_rate == 1e-4
    assert TrainConfig(lr=3e-3).learning_rate == 3e-3


def test_view_split():
    assert input_view_indices(8) == [0, 3, 5]
    assert input_view_indices(8)[:1] == [0]
    assert heldout_view_indices(8) == [1, 2, 4, 6, 7]
    assert input_view_indices(2) == [0, 1]
    for n in range(1, 20):
        inputs = input_view_indices(n)
        assert len(set(inputs)) == len(inputs) == min(3, n)
        assert not set(inputs) & set(heldout_view_indices(n))


@pytest.mark.parametrize("policy, frozen, live", [("freeze_encoder", "encoder.", "mlp."),
                                                  ("freeze_rendering", "mlp.", "encoder.")])
def test_freeze_policy_bit_identity(policy, frozen, live):
    model = Model.create(SMALL, seed=2)
    out, _ = finetune(model, tiny_scene(), ft_config(freeze_policy=policy, lr=1e-2), RC)
    assert out.params.identical_to(model.params, frozen)
    assert not out.params.identical_to(model.params, live, with_state=False)
    for name in out.params.names(frozen):
        assert out.params.steps[name] == 0


def test_freeze_policy_flags():
    params = Model.create(SMALL).params
    apply_freeze_policy(params, "freeze_encoder")
    assert all(n.startswith("mlp.") for n in params.trainable_names())
    apply_freeze_policy(params, "none")
    assert len(params.trainable_names()) == len(params)
    with pytest.raises(ValueError):
        apply_freeze_policy(params, "bogus")


def test_loss_trend_on_fixed_batch():
    scene = normalize_scene(make_synthetic_scene(SphereSceneSpec(image_size=16)))[0]
    batch = make_batch(scene, [0, 3], 1, 128, np.random.default_rng(0))
    model = Model.create(SMALL, seed=0)
    cfg = TrainConfig(lr=5e-4, rays_per_batch=128)
    losses = [float(train_step(model, batch, cfg, i, None, RC).total) for i in range(50)]
    slope = np.polyfit(np.arange(50), losses, 1)[0]
    assert slope < 0
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_depth_off_detaches_depth_term():
    scene = normalize_scene(tiny_scene())[0]
    batch = make_batch(scene, [0], 1, 32, np.random.default_rng(0))
    a, b = Model.create(SMALL, seed=0), Model.create(SMALL, seed=0)
    out = train_step(a, batch, TrainConfig(depth_supervision=False, lambda_depth=0.1), 0, None, RC)
    train_step(b, batch, TrainConfig(lambda_depth=0.0), 0, None, RC)
    assert out.lambda_depth == 0.0 and float(out.depth_loss) > 0
    assert a.params.identical_to(b.params)


def test_non_finite_loss_reports_iteration_and_scene():
    scene = normalize_scene(tiny_scene())[0]
    batch = make_batch(scene, [0], 1, 16, np.random.default_rng(0))
    model = Model.create(SMALL)
    model.params["mlp.sigma.bias"].fill_(float("nan"))
    with pytest.raises(TrainingDivergence) as info:
        train_step(model, batch, TrainConfig(), 7, None, RC, scene_id="s0")
    assert info.value.iteration == 7 and info.value.scene == "s0"
    assert info.value.op == "render.rgb"


def test_pretrain_reproducible():
    scenes = [tiny_scene(0), tiny_scene(1)]
    a, ra = pretrain(scenes, pre_config(), field_config=SMALL, render_config=RC)
    b, rb = pretrain(scenes, pre_config(), field_config=SMALL, render_config=RC)
    assert a.identical_to(b)
    assert [r["rgb_loss"] for r in ra.records] == [r["rgb_loss"] for r in rb.records]
    c, _ = pretrain(scenes, pre_config(seed=2), field_config=SMALL, render_config=RC)
    assert not a.identical_to(c)


def test_pretrain_sampling(monkeypatch):
    seen = []
    real = trainer.make_batch

    def spy(scene, sources, target, n_rays, rng):
        seen.append((scene.name, list(sources), target))
        return real(scene, sources, target, n_rays, rng)

    monkeypatch.setattr(trainer, "make_batch", spy)
    pretrain([tiny_scene(0), tiny_scene(1)], pre_config(iterations=60), field_config=SMALL,
             render_config=RenderConfig(n_samples=2))
    assert [s for s, _, _ in seen[:4]] == ["s0", "s1", "s0", "s1"]
    counts = {len(src) for _, src, _ in seen}
    assert counts == {1, 2, 3}
    for _, src, target in seen:
        assert target not in src and len(set(src)) == len(src)


def test_resume_equivalence(tmp_path):
    scenes = [tiny_scene(0), tiny_scene(1)]
    full, _ = pretrain(scenes, pre_config(iterations=6), field_config=SMALL, render_config=RC)
    half, _ = pretrain(scenes, pre_config(iterations=3), field_config=SMALL, render_config=RC,
                       out_dir=tmp_path / "half")
    resumed = load_model(tmp_path / "half" / "model.ckpt")
    assert resumed.identical_to(half)
    resumed, report = pretrain(scenes, pre_config(iterations=6), model=resumed, render_config=RC)
    assert resumed.iteration == 6
    assert [r["iteration"] for r in report.records] == [6]
    assert resumed.identical_to(full)


def test_model_checkpoint_round_trip(tmp_path):
    model = Model.create(SMALL, seed=4)
    model.iteration = 11
    loaded = load_model(save_model(model, tmp_path / "m.ckpt"))
    assert loaded.identical_to(model)
    assert loaded.config == SMALL


def test_finetune_zero_iterations_identity(tmp_path):
    model = Model.create(SMALL, seed=5)
    out, report = finetune(model, tiny_scene(), ft_config(iterations=0), RC, out_dir=tmp_path)
    assert out.identical_to(model)
    assert report.records == []
    assert load_model(tmp_path / "model.ckpt").identical_to(model)


def test_finetune_leaves_input_untouched():
    model = Model.create(SMALL, seed=5)
    before = model.copy()
    finetune(model, tiny_scene(), ft_config(lr=1e-2), RC)
    assert model.identical_to(before)


def test_finetune_view_audit():
    scene = tiny_scene()
    for views in (1, 2, 3):
        _, report = finetune(Model.create(SMALL), scene, ft_config(views=views), RC)
        assert report.view_count == views
        assert report.views_read[scene.name] == input_view_indices(8)[:views]
        assert report.leaked_views() == {}
        assert all(r["view_count"] == views for r in report.records)


def test_leak_detection():
    report = TrainReport("finetune", "none", 2, views_read={"a": [0, 1, 3]}, heldout_views={"a": [1, 2]})
    assert report.leaked_views() == {"a": [1]}


def test_finetune_insufficient_views():
    scene = with_frames(tiny_scene(), [0, 1])
    with pytest.raises(ValueError):
        finetune(Model.create(SMALL), scene, ft_config(views=3), RC)


def test_freeze_policies_distinct_reports(tmp_path):
    paths = []
    for policy in ("none", "freeze_encoder", "freeze_rendering"):
        out = tmp_path / policy
        finetune(Model.create(SMALL, seed=1), tiny_scene(), ft_config(freeze_policy=policy), RC, out_dir=out)
        paths.append((out / "report.jsonl").read_text())
        assert TrainReport.read_jsonl(out / "report.jsonl")[0]["freeze_policy"] == policy
    assert len(set(paths)) == 3


def test_report_records_increase():
    report = TrainReport("pretrain", "none")
    report.add({"iteration": 2})
    with pytest.raises(ValueError):
        report.add({"iteration": 2})


def test_c2f_reset_versus_continue(monkeypatch):
    seen = []
    real = trainer.train_step

    def spy(model, batch, config, iteration, alpha=None, *a, **kw):
        seen.append(alpha)
        return real(model, batch, config, iteration, alpha, *a, **kw)

    monkeypatch.setattr(trainer, "train_step", spy)
    model = Model.create(SMALL)
    model.iteration = 100
    finetune(model, tiny_scene(), ft_config(iterations=2, ramp_iters=4), RC)
    assert seen == [0.0, 0.75]
    seen.clear()
    finetune(model, tiny_scene(), ft_config(iterations=2, ramp_iters=4, c2f_reset=False), RC)
    assert seen == [3.0, 3.0]
    seen.clear()
    finetune(model, tiny_scene(), ft_config(iterations=2, c2f=False), RC)
    assert seen == [None, None]


def test_pretrain_honors_freeze_policy():
    scenes = [tiny_scene(0)]
    start = Model.create(SMALL, seed=1)
    out, _ = pretrain(scenes, pre_config(iterations=3, freeze_policy="freeze_encoder"), model=start.copy(),
                      render_config=RC)
    assert out.params.identical_to(start.params, "encoder.")
    assert not torch.equal(out.params["mlp.sigma.bias"], start.params["mlp.sigma.bias"])
