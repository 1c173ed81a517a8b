import math
from dataclasses import replace

import numpy as np
import pytest

from basic_seg import losses as L
from basic_seg import segnet
from basic_seg import trainer as T
from basic_seg.autodiff import Tensor
from basic_seg.data import Dataset, SynthSpec, generate
from basic_seg.partition import SubclassTable

NET = segnet.NetConfig(base_channels=4, num_classes=3, num_subclasses=4, height=16, width=16)
TABLE = SubclassTable(np.array([0, 1, 1, 2]))


def _pools(seed=0, labeled=3, unlabeled=6):
    ds = generate(SynthSpec(height=16, width=16, num_classes=2, samples=labeled + unlabeled, seed=seed, largest_area_fraction=0.2))
    lab = ds.subset(range(labeled))
    # split class 1 into two subclasses by column parity; class 2 becomes subclass 3
    sub = np.where(lab.labels == 2, 3, lab.labels)
    cols = np.broadcast_to(np.arange(16) % 2, sub.shape)
    sub = np.where((lab.labels == 1) & (cols == 1), 2, sub)
    lab = Dataset(lab.images, lab.labels, 3, sub, 4)
    return lab, ds.subset(range(labeled, labeled + unlabeled))


@pytest.fixture(scope="module")
def pools():
    return _pools()


def _config(**kw):
    opts = dict(iterations=30, seed=1)
    opts.update(kw)
    return T.TrainConfig(**opts)


# ---------------------------------------------------------------- config


def test_config_contradiction():
    with pytest.raises(ValueError, match="config contradiction"):
        T.TrainConfig(batch_size=4, labeled_per_batch=4)
    with pytest.raises(ValueError, match="config contradiction"):
        T.TrainConfig(labeled_per_batch=0)


def test_supervised_only_ignores_split():
    config = T.TrainConfig(semi_supervised=False, labeled_per_batch=4, batch_size=4)
    assert (config.labeled_count, config.unlabeled_count) == (4, 0)


def test_config_text_round_trip():
    config = _config(lambda2=0.25, rotate=False)
    values = {k: str(v) for k, v in vars(config).items()}
    again = T.coerce(T.TrainConfig, T.parse_text("# comment\n" + T.to_text(values)))
    assert again == config


def test_config_text_errors():
    with pytest.raises(ValueError, match="key=value"):
        T.parse_text("iterations 5")
    with pytest.raises(ValueError, match="unknown"):
        T.coerce(T.TrainConfig, {"nope": "1"})
    with pytest.raises(ValueError, match="boolean"):
        T.coerce(T.TrainConfig, {"rotate": "maybe"})


# ---------------------------------------------------------------- batches and augmentation


def test_batch_composition(pools):
    lab, unl = pools
    batch = T.assemble_batch(lab, unl, _config(), step=0)
    assert batch.x_labeled.shape == (1, 1, 16, 16)
    assert batch.x_unlabeled.shape == (3, 1, 16, 16)
    assert batch.ysub_labeled.shape == (1, 16, 16)


def test_batch_rotation_shared_by_image_and_labels(pools):
    lab, unl = pools
    for step in range(8):
        b = T.assemble_batch(lab, unl, _config(), step)
        i, r = b.labeled_idx[0], b.rotations[0]
        np.testing.assert_array_equal(b.x_labeled[0, 0], np.rot90(lab.images[i], r))
        np.testing.assert_array_equal(b.y_labeled[0], np.rot90(lab.labels[i], r))
        np.testing.assert_array_equal(b.ysub_labeled[0], np.rot90(lab.sub_labels[i], r))


def test_rotation_involution(rng):
    a = rng.normal(size=(2, 5, 5))
    np.testing.assert_array_equal(T.rotate(T.rotate(a, 2), 2), a)
    np.testing.assert_array_equal(T.rotate(T.rotate(a, 1), 3), a)


def test_sampling_is_balanced_over_steps(pools):
    lab, unl = pools
    config = _config(iterations=100)
    steps = 100
    seen_l = np.zeros(len(lab), int)
    seen_u = np.zeros(len(unl), int)
    for step in range(steps):
        b = T.assemble_batch(lab, unl, config, step)
        np.add.at(seen_l, b.labeled_idx, 1)
        np.add.at(seen_u, b.unlabeled_idx, 1)
    for seen, per_step in ((seen_l, 1), (seen_u, 3)):
        expected = steps * per_step / len(seen)
        assert np.all(np.abs(seen - expected) <= 1)


def test_perturb_zero_sigma_is_identity(rng):
    x = rng.normal(size=(2, 1, 4, 4))
    out = T.perturb(x, 0.0, rng)
    np.testing.assert_array_equal(out, x)
    assert out is not x


def test_perturb_noise_statistics():
    x = np.zeros(100_000)
    sigma = 0.05
    noise = T.perturb(x, sigma, np.random.default_rng(0))
    assert abs(noise.mean()) < 3 * sigma / math.sqrt(x.size)
    assert noise.std() == pytest.approx(sigma, rel=0.02)


def test_student_and_teacher_noise_uncorrelated():
    rs, rt = T.noise_streams(seed=3, step=11)
    a = T.perturb(np.zeros(100_000), 1.0, rs)
    b = T.perturb(np.zeros(100_000), 1.0, rt)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_perturb_negative_sigma(rng):
    with pytest.raises(ValueError):
        T.perturb(np.zeros(3), -1.0, rng)


# ---------------------------------------------------------------- one step


def test_zero_weights_reduce_to_mos_seg_loss(pools):
    lab, unl = pools
    config = _config(mu=0.0, lambda1_max=0.0, lambda2=0.0, lambda3=0.0, noise_sigma=0.0)
    state = segnet.build(NET, seed=2)
    probe = state.copy()
    batch = T.assemble_batch(lab, unl, config, 0)
    row, _ = T.train_step(state, batch, config, TABLE)
    x = np.concatenate([batch.x_labeled, batch.x_unlabeled])
    out = segnet.run(probe, "student", Tensor(x), "train", segnet.TASKS)
    expected = L.seg_loss(Tensor(out["mos"].data[:1]), batch.y_labeled).item()
    assert row["total"] == pytest.approx(expected, abs=1e-12)
    assert row["sup"] == row["total"]


def test_teacher_moves_by_ema_of_new_student(pools):
    lab, unl = pools
    config = _config()
    state = segnet.build(NET, seed=2)
    # push the teacher away so the EMA step is visible
    for t in state.teacher.values():
        t.data = t.data + 0.1
    before = {k: v.data.copy() for k, v in state.teacher.items()}
    T.train_step(state, T.assemble_batch(lab, unl, config, 0), config, TABLE)
    for name, old in before.items():
        expected = config.alpha * old + (1 - config.alpha) * state.student[name].data
        np.testing.assert_allclose(state.teacher[name].data, expected, rtol=0, atol=1e-15)


def test_teacher_never_receives_gradients(pools):
    lab, unl = pools
    config = _config(iterations=10)
    state = segnet.build(NET, seed=2)
    teacher_ids = {id(t) for t in state.teacher.values()}
    for step in range(10):
        _, grads = T.train_step(state, T.assemble_batch(lab, unl, config, step), config, TABLE)
        assert not teacher_ids & {id(p) for p in grads}
        assert grads


def test_non_finite_loss_is_reported(pools):
    lab, unl = pools
    config = _config()
    state = segnet.build(NET, seed=2)
    state.student["mos.head.bias"].data = np.array([np.nan, 0.0, 0.0])
    with pytest.raises(T.NonFiniteLoss) as info:
        T.train_step(state, T.assemble_batch(lab, unl, config, 0), config, TABLE)
    assert info.value.term == "sup"


def test_scs_training_needs_a_table(pools):
    lab, unl = pools
    with pytest.raises(ValueError, match="partition"):
        T.train_step(segnet.build(NET), T.assemble_batch(lab, unl, _config(), 0), _config(), None)


def test_adam_first_step_moves_by_lr():
    state = segnet.build(NET, seed=0)
    name = "mos.head.bias"
    param = state.student[name]
    before = param.data.copy()
    T.Adam(0.01).step(state, {param: np.array([1.0, -2.0, 0.0])})
    np.testing.assert_allclose(param.data - before, [-0.01, 0.01, 0.0], atol=1e-9)


# ---------------------------------------------------------------- loop, determinism, resume


def test_fit_logs_are_bit_identical(pools):
    lab, unl = pools
    config = _config(iterations=50)
    a = T.fit(lab, unl, TABLE, config, net_config=NET)
    b = T.fit(lab, unl, TABLE, config, net_config=NET)
    assert a.losses == b.losses
    assert len(a.losses) == 50


def test_resume_from_checkpoint_is_bit_identical(pools, tmp_path):
    lab, unl = pools
    config = _config(iterations=30, checkpoint_every=10)
    full = T.fit(lab, unl, TABLE, config, net_config=NET, out_dir=tmp_path / "full")
    resumed_state = segnet.load_checkpoint(tmp_path / "full" / "ckpt_000010.basc", NET)
    assert resumed_state.step == 10
    resumed = T.fit(lab, unl, TABLE, config, state=resumed_state, out_dir=tmp_path / "resumed")
    assert resumed.losses == full.losses[10:]
    for name in full.state.teacher:
        assert full.state.teacher[name].data.tobytes() == resumed.state.teacher[name].data.tobytes()


def test_zero_iterations_returns_initial_state(pools):
    lab, unl = pools
    result = T.fit(lab, unl, TABLE, _config(iterations=0), net_config=NET)
    fresh = segnet.build(NET, seed=1)
    assert result.losses == []
    for name in fresh.student:
        assert result.state.student[name].data.tobytes() == fresh.student[name].data.tobytes()


def test_loss_csv_columns(pools, tmp_path):
    lab, unl = pools
    T.fit(lab, unl, TABLE, _config(iterations=3), net_config=NET, out_dir=tmp_path)
    lines = (tmp_path / "losses.csv").read_text().splitlines()
    assert lines[0].split(",") == list(T.LOSS_COLUMNS)
    assert len(lines) == 4
    for line in lines[1:]:
        assert all(math.isfinite(float(v)) for v in line.split(","))


def test_validation_log(pools, tmp_path):
    lab, unl = pools
    config = _config(iterations=4, val_every=2)
    result = T.fit(lab, unl, TABLE, config, net_config=NET, out_dir=tmp_path, validation=unl.subset([0, 1]))
    assert [r["step"] for r in result.validation] == [2, 4]
    assert (tmp_path / "validation.csv").read_text().startswith("step,")


def test_variant_without_scs_runs_without_table(pools):
    lab, unl = pools
    config = _config(iterations=3, use_scs=False, mu=0.0, lambda2=0.0, lambda3=0.0)
    result = T.fit(replace(lab, sub_labels=None), unl, None, config, net_config=NET)
    assert all(r["task_con"] == 0.0 and r["cnf"] == 0.0 for r in result.losses)
