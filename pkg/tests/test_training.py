import json

import numpy as np
import pytest

from poselift import training as T
from poselift.errors import CheckpointError, ConfigError, TrainingDivergence
from poselift.geometry import sample_rotation
from poselift.losses import LossWeights
from poselift.numerics import autodiff as ad
from poselift.numerics.autodiff import Tape, Var
from poselift.numerics.optim import adam_step
from poselift.training import (
    RunRecord,
    TrainConfig,
    build_models,
    generator_objective,
    load_models,
    make_rngs,
    save_models,
    train,
    train_step,
)


def _tiny(rep="full", **kw):
    base = dict(representation=rep, epochs=2, batch_size=16, base_width=8, lr=1e-3, seed=3)
    base.update(kw)
    return TrainConfig.from_profile("desk", **base)


@pytest.fixture
def tiny_data(small_dataset):
    return small_dataset.subset(np.arange(64))


def test_profiles_and_validation():
    desk = TrainConfig.from_profile("desk")
    assert (desk.batch_size, desk.epochs, desk.base_width) == (256, 200, 128)
    large = TrainConfig()
    assert (large.batch_size, large.lr, large.label_flip, large.epochs) == (8192, 2e-4, 0.10, 800)
    for bad in ({"batch_size": 1}, {"epochs": 0}, {"label_flip": 1.5}, {"lr": 0.0}, {"representation": "x"}):
        with pytest.raises(Exception):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_profile("laptop")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


def test_config_dict_round_trip(tmp_path):
    cfg = _tiny("sr-5", weights={"adversarial": 2.0, "reprojection": 1.0, "ninety": 0.5})
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.hash() == cfg.hash()
    path = tmp_path / "c.json"
    path.write_text(json.dumps({**cfg.to_dict(), "data": "x.jsonl"}))
    assert TrainConfig.load(path) == cfg
    assert _tiny(seed=4).hash() != cfg.hash()


@pytest.mark.parametrize("rep", ["full", "sr-lt", "ind-lt", "sr-5", "ind-5"])
def test_smoke_two_epochs(rep, tiny_data):
    rec = train(tiny_data, _tiny(rep), eval_set=tiny_data)
    assert len(rec.epochs) == 2
    for e in rec.epochs:
        assert np.isfinite(e.d_loss) and np.isfinite(e.adversarial)
        assert all(np.isfinite(v) for v in e.g_loss.values())
        assert e.updates == 4 and np.isfinite(e.eval_mpjpe)
    groups = {"full": {"all"}, "sr-lt": {"all"}, "ind-lt": {"legs", "torso"}, "sr-5": {"all"}}
    assert set(rec.epochs[0].g_loss) == groups.get(rep, {"torso", "left_arm", "right_arm", "left_leg", "right_leg"})


def test_training_is_deterministic(tiny_data, tmp_path):
    a = train(tiny_data, _tiny("ind-lt"), eval_set=tiny_data, out_dir=tmp_path / "a")
    b = train(tiny_data, _tiny("ind-lt"), eval_set=tiny_data, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "run.jsonl").read_bytes() == (tmp_path / "b" / "run.jsonl").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert a.eval_curve().tobytes() == b.eval_curve().tobytes()
    c = train(tiny_data, _tiny("ind-lt", seed=4), eval_set=tiny_data)
    assert c.eval_curve().tobytes() != a.eval_curve().tobytes()


def test_run_record_round_trip(tiny_data, tmp_path):
    rec = train(tiny_data, _tiny(), out_dir=tmp_path)
    back = RunRecord.load(tmp_path / "run.jsonl")
    assert back.config == rec.config and back.epochs == rec.epochs
    assert back.checkpoints == ["final.ckpt"]
    assert set(rec.loss_curves()) == {"d_loss", "g_loss[all]"}


def test_zero_adversarial_weight_gives_consistency_only_update(tiny_data):
    # With w1 = 0 the lifter step must equal Adam on the consistency gradient alone.
    cfg = _tiny("ind-lt", dropout=0.0, weights={"adversarial": 0.0})
    batch = tiny_data.poses[:16]
    lifter, disc = build_models(cfg, make_rngs(0)["init"])
    twin, _ = build_models(cfg, make_rngs(0)["init"])
    rngs = make_rngs(5)
    train_step(lifter, disc, batch, cfg, rngs)

    R = sample_rotation(make_rngs(5)["rotation"], size=16)
    tape = Tape()
    _, consistency, _ = generator_objective(twin, tape, Var(batch), R, cfg.weights, None)
    grads = ad.backward(tape, consistency, twin.stores)
    for store in twin.stores:
        adam_step(store, grads[store.name], cfg.lr)
    for a, b in zip(lifter.stores, twin.stores):
        for k in a.params:
            np.testing.assert_allclose(a.params[k], b.params[k], rtol=0, atol=1e-12)


def test_per_network_adversarial_weight_routes(tiny_data):
    # Zeroing the adversarial weight of the legs network leaves its step unchanged
    # by the discriminator, so it matches a run with the discriminator silenced.
    batch = tiny_data.poses[:16]
    legs_off = _tiny("ind-lt", dropout=0.0, weights={"per_network": {"legs": 0.0}})
    all_off = _tiny("ind-lt", dropout=0.0, weights={"adversarial": 0.0})
    out = {}
    for name, cfg in (("legs_off", legs_off), ("all_off", all_off)):
        lifter, disc = build_models(cfg, make_rngs(0)["init"])
        train_step(lifter, disc, batch, cfg, make_rngs(5))
        out[name] = {s.name: s.params for s in lifter.stores}
    legs = "lifter.legs"
    for k, v in out["legs_off"][legs].items():
        np.testing.assert_allclose(v, out["all_off"][legs][k], rtol=0, atol=1e-12)
    torso = "lifter.torso"
    assert any(np.any(v != out["all_off"][torso][k]) for k, v in out["legs_off"][torso].items())


def test_label_flip_counts(tiny_data):
    never = train(tiny_data, _tiny(label_flip=0.0))
    always = train(tiny_data, _tiny(label_flip=1.0))
    assert all(e.flips == 0 for e in never.epochs)
    assert all(e.flips == e.updates for e in always.epochs)


def test_divergence_writes_last_good_checkpoint(tiny_data, tmp_path, monkeypatch):
    cfg = _tiny(epochs=3)
    real_step = T.train_step
    calls = {"n": 0}

    def failing_step(lifter, disc, batch, config, rngs):
        calls["n"] += 1
        if calls["n"] == 6:  # second batch of epoch 2
            raise TrainingDivergence("adversarial loss is not finite", {"what": "adversarial loss"})
        return real_step(lifter, disc, batch, config, rngs)

    monkeypatch.setattr(T, "train_step", failing_step)
    with pytest.raises(TrainingDivergence) as info:
        train(tiny_data, cfg, out_dir=tmp_path)
    diag = info.value.diagnostics
    assert diag["epoch"] == 2 and diag["seed"] == cfg.seed
    ckpt = tmp_path / "last_good.ckpt"
    assert diag["last_good_checkpoint"] == str(ckpt)
    lifter, _, meta, _ = load_models(ckpt)
    assert meta["epoch"] == 1
    rec = RunRecord.load(tmp_path / "run.jsonl")
    assert len(rec.epochs) == 1 and "not finite" in rec.aborted

    # The checkpoint holds the parameters from the end of epoch 1.
    monkeypatch.setattr(T, "train_step", real_step)
    ref = train(tiny_data, _tiny(epochs=1))
    for a, b in zip(lifter.stores, ref.lifter.stores):
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()


def test_nan_input_diverges(tiny_data):
    poses = tiny_data.poses.copy()
    poses[0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergence):
        train(poses, _tiny(epochs=1))


def test_checkpoint_round_trip_and_representation_guard(tiny_data, tmp_path):
    rec = train(tiny_data, _tiny("sr-lt"), out_dir=tmp_path)
    lifter, disc, meta, states = load_models(tmp_path / "final.ckpt", expect="sr-lt")
    assert meta["representation"] == "sr-lt" and meta["config_sha256"] == rec.config_hash
    assert set(states) == set(T.RNG_STREAMS)
    np.testing.assert_array_equal(lifter.predict(tiny_data.poses), rec.lifter.predict(tiny_data.poses))
    assert disc is not None
    with pytest.raises(ConfigError):
        load_models(tmp_path / "final.ckpt", expect="ind-lt")


def test_checkpoint_schema_version_guard(tiny_data, tmp_path, monkeypatch):
    cfg = _tiny()
    lifter, disc = build_models(cfg, make_rngs(0)["init"])
    monkeypatch.setattr(T, "SCHEMA_VERSION", 99)
    path = save_models(tmp_path / "m.ckpt", lifter, disc, cfg, 0)
    monkeypatch.undo()
    with pytest.raises(ConfigError):
        load_models(path)
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(CheckpointError):
        load_models(path)


def test_discriminator_separates_real_from_generated_poses(small_dataset):
    # Scored against the fakes it was trained on. Off-distribution inputs (say, shuffled
    # joints) are unconstrained under a least-squares objective, so they prove nothing.
    from poselift.geometry import assemble3d, project, rotate
    from poselift.models import discriminate

    rec = train(small_dataset, _tiny(epochs=30, base_width=32, batch_size=32, label_flip=0.0))
    real = small_dataset.poses
    R = sample_rotation(np.random.default_rng(1), size=len(real))
    fake = project(rotate(assemble3d(real, rec.lifter.predict(real)), R))
    D = rec.discriminator
    assert discriminate(D, real).mean() > discriminate(D, fake).mean() + 0.1
