from dataclasses import replace

import numpy as np
import pytest

import retrofit.trainer as trainer_module
from retrofit.config import IdoConfig
from retrofit.corpus import generate_targets
from retrofit.deformnet import DeformNet, deform
from retrofit.errors import DataError, EmptyDatabase, NumericalAbort, UsageError
from retrofit.geometry import Aabb
from retrofit.partmodel import apply_deformation
from retrofit.retrieval import RetrievalSpace, distance
from retrofit.runs import METRICS, RunManager
from retrofit.trainer import (
    JointTrainer,
    TrainConfig,
    joint_train,
    load_checkpoint,
    pretrain,
    refresh_cache,
    save_checkpoint,
)

from .conftest import make_shape


@pytest.fixture(scope="module")
def targets(tiny_db):
    return [r.cloud for r in generate_targets(tiny_db, 4, offset_scale=0.5, noise_sigma=0.0, seed=1)]


@pytest.fixture
def cfg():
    return TrainConfig(epochs=2, batch_size=2, K=2, sigma0=1.0, fit_distance_scale=10.0,
                       pretrain_steps=2, pretrain_batch=2, seed=0)


def build(db, model, seed=0):
    space = RetrievalSpace(len(db), model, rng=np.random.default_rng([seed, 1]))
    net = DeformNet.for_database(db, model, rng=np.random.default_rng([seed, 0]))
    return space, net


def test_cache_matches_live_distances(tiny_db, tiny_model, targets):
    space, _ = build(tiny_db, tiny_model)
    cache = refresh_cache(None, space, tiny_db, targets, epoch=3)
    assert cache.matrix.shape == (len(tiny_db), len(targets))
    assert cache.stamp == 3
    for s in range(len(tiny_db)):
        for t, target in enumerate(targets):
            assert cache.matrix[s, t] == pytest.approx(distance(space, s, target), rel=1e-12)
    assert cache.is_stale(8, 5)
    assert not cache.is_stale(7, 5)


def test_cache_changes_after_an_encoder_update(tiny_db, tiny_model, targets):
    space, _ = build(tiny_db, tiny_model)
    before = refresh_cache(None, space, tiny_db, targets)
    space.store["encoder.head.bias"].value += 0.5
    space.store["variance_logits"].value[0] += 1.0
    after = refresh_cache(before, space, tiny_db, targets, epoch=1)
    assert not np.array_equal(before.matrix, after.matrix)


def test_pretrain_with_zero_steps_changes_nothing(tiny_db, tiny_model, targets, cfg):
    _, net = build(tiny_db, tiny_model)
    checksum = net.store.checksum()
    result = pretrain(net, tiny_db, targets, replace(cfg, pretrain_steps=0))
    assert result.steps == 0
    assert net.store.checksum() == checksum


def test_pretrain_records_finite_history(tiny_db, tiny_model, targets, cfg):
    _, net = build(tiny_db, tiny_model)
    steps = []
    result = pretrain(net, tiny_db, targets, cfg, on_step=lambda i, loss: steps.append(i))
    assert steps == [0, 1]
    assert len(result.history) == 2
    assert np.isfinite(result.history).all()


def test_pretrain_overfits_a_single_pair(tiny_model):
    shape = make_shape([Aabb([0.0, 0.0, 0.0], [1.0, 0.8, 0.6])], n_per_part=32, seed=4, name="block")
    planted = np.array([0.04, -0.03, 0.02, 0.05, -0.04, 0.03])
    target = apply_deformation(shape, planted, alpha=1.0).points
    net = DeformNet.for_database([shape], tiny_model, alpha=1.0, rng=np.random.default_rng(0))

    _, before = deform(net, shape, target, use_projection=False)
    assert before.post_chamfer == before.pre_chamfer

    cfg = TrainConfig(lr=0.01, weight_decay=0.0, pretrain_steps=2000, pretrain_batch=1, pretrain_tol=0.0,
                      symmetry_weight=0.0, use_projection=False, seed=0)
    result = pretrain(net, [shape], [target], cfg)
    assert result.steps <= 2000
    assert min(result.history) < 1e-4

    _, after = deform(net, shape, target, use_projection=False)
    assert after.post_chamfer <= after.pre_chamfer
    assert after.post_chamfer < 0.1 * after.pre_chamfer


def test_pretrain_needs_data(tiny_model, targets, cfg):
    net = DeformNet([], [], tiny_model)
    with pytest.raises(EmptyDatabase):
        pretrain(net, [], targets, cfg)


def test_k_larger_than_database(tiny_db, tiny_model, targets):
    space, net = build(tiny_db, tiny_model)
    with pytest.raises(UsageError):
        JointTrainer(space, net, tiny_db, targets, TrainConfig(K=len(tiny_db) + 1))


def test_steps_alternate_and_touch_one_module_each(tiny_db, tiny_model, targets, cfg, monkeypatch):
    space, net = build(tiny_db, tiny_model)
    real_step = trainer_module.sgd_step
    calls = []

    def checked(store, sgd):
        other = net.store if store is space.store else space.store
        before = other.checksum()
        real_step(store, sgd)
        assert other.checksum() == before
        calls.append("retrieval" if store is space.store else "deformation")

    monkeypatch.setattr(trainer_module, "sgd_step", checked)
    trainer = JointTrainer(space, net, tiny_db, targets, cfg)
    trainer.run()
    assert trainer.iteration == 4
    assert calls == ["retrieval", "deformation"] * 4


def test_frozen_deformation_trains_only_retrieval(tiny_db, tiny_model, targets, cfg):
    space, net = build(tiny_db, tiny_model)
    net_before, space_before = net.store.checksum(), space.store.checksum()
    metrics = JointTrainer(space, net, tiny_db, targets, replace(cfg, train_deformation=False)).run()
    assert net.store.checksum() == net_before
    assert space.store.checksum() != space_before
    assert all(np.isfinite(m.l_def) for m in metrics)


def test_training_is_deterministic(tiny_db, tiny_model, targets, cfg):
    runs = []
    for _ in range(2):
        space, net = build(tiny_db, tiny_model)
        metrics = JointTrainer(space, net, tiny_db, targets, cfg).run()
        runs.append((space.store.checksum(), net.store.checksum(), [m.l_emb for m in metrics]))
    assert runs[0] == runs[1]


def test_resume_matches_uninterrupted_training(tiny_db, tiny_model, targets, cfg, tmp_path):
    space, net = build(tiny_db, tiny_model)
    JointTrainer(space, net, tiny_db, targets, cfg).run()

    first_space, first_net = build(tiny_db, tiny_model)
    first = JointTrainer(first_space, first_net, tiny_db, targets, replace(cfg, epochs=1))
    first.run()
    first.save(tmp_path / "half.rfnt")

    resumed_space, resumed_net = build(tiny_db, tiny_model, seed=9)
    resumed = JointTrainer(resumed_space, resumed_net, tiny_db, targets, cfg)
    resumed.restore(tmp_path / "half.rfnt")
    assert resumed.epoch == 1
    resumed.run()

    assert resumed_space.store.checksum() == space.store.checksum()
    assert resumed_net.store.checksum() == net.store.checksum()


def test_biased_warmup_samples_uniformly_first(tiny_db, tiny_model, targets, cfg):
    space, net = build(tiny_db, tiny_model)
    trainer = JointTrainer(space, net, tiny_db, targets, replace(cfg, biased_warmup_epochs=1))
    assert trainer.sampling_mode() == "uniform"
    trainer.epoch = 1
    assert trainer.sampling_mode() == "biased"


def test_cancel_stops_after_the_current_epoch(tiny_db, tiny_model, targets, cfg):
    space, net = build(tiny_db, tiny_model)
    trainer = JointTrainer(space, net, tiny_db, targets, replace(cfg, epochs=5),
                           on_epoch=lambda m: trainer.cancel())
    metrics = trainer.run()
    assert len(metrics) == 1
    assert trainer.is_cancelled()


def test_non_finite_loss_aborts_with_diagnostics(tiny_db, tiny_model, targets, cfg, tmp_path):
    space, net = build(tiny_db, tiny_model)
    space.store["sigma_logits"].value[:] = np.nan
    run = RunManager(tmp_path / "run")
    trainer = JointTrainer(space, net, tiny_db, targets, cfg, run=run)
    with pytest.raises(NumericalAbort) as info:
        trainer.run()
    assert info.value.exit_code == 3
    assert info.value.diagnostics["module"] == "retrieval"
    assert run.path("last_good.rfnt").exists()
    assert run.path("diagnostics.json").exists()
    assert any(e["event"] == "abort" for e in run.read_events())


def test_joint_train_writes_metrics_and_final_checkpoint(tiny_db, tiny_model, targets, cfg, tmp_path):
    space, net = build(tiny_db, tiny_model)
    run = RunManager(tmp_path / "run")
    result = joint_train(space, net, tiny_db, targets, replace(cfg, retrieval_pretrain_epochs=1), run=run)
    assert len(result.metrics) == 2
    lines = run.path(METRICS).read_text().splitlines()
    assert lines[0] == "epoch,l_emb,l_def,mean_d_fit"
    assert len(lines) == 3
    assert run.path("final.rfnt").exists()
    assert [e["event"] for e in run.read_events()].count("epoch") == 2


def test_ido_distillation_step_runs(tiny_db, tiny_model, targets, cfg):
    space, net = build(tiny_db, tiny_model)
    before = net.store.checksum()
    metrics = JointTrainer(space, net, tiny_db, targets, replace(cfg, epochs=1, use_ido=True),
                           ido=IdoConfig(training_budget=5)).run()
    assert np.isfinite(metrics[0].l_def)
    assert net.store.checksum() != before


def test_checkpoint_roundtrip(tiny_db, tiny_model, cfg, tmp_path):
    space, net = build(tiny_db, tiny_model)
    space.refresh_source_codes(tiny_db)
    path = tmp_path / "model.rfnt"
    save_checkpoint(path, space, net, cfg, tiny_db)

    loaded_space, loaded_net, manifest = load_checkpoint(path, tiny_db)
    assert loaded_space.store.checksum() == space.store.checksum()
    assert loaded_net.store.checksum() == net.store.checksum()
    np.testing.assert_array_equal(loaded_space.source_codes, space.source_codes)
    assert manifest["sources"] == [s.name for s in tiny_db]

    with pytest.raises(DataError):
        load_checkpoint(path, tiny_db[::-1])

    save_checkpoint(tmp_path / "deform_only.rfnt", None, net, cfg, tiny_db)
    none_space, _, _ = load_checkpoint(tmp_path / "deform_only.rfnt")
    assert none_space is None
