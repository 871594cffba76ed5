import hashlib
import json

import numpy as np
import pytest

from knotseg.autodiff import Tensor
from knotseg.harness import (
    ANGLES,
    BEST,
    LAST,
    RUNLOG,
    AugmentSpec,
    TrainConfig,
    augment_volume,
    coverage_counts,
    eval_config_for,
    evaluate_fold,
    evaluate_predictions,
    fit,
    fold_predictor,
    oracle_report,
    predict_fold,
    predict_volume,
    rotate_stack,
    sliding_window_predict,
    train,
)
from knotseg.harness.inference import window_starts
from knotseg.metrics import aggregate
from knotseg.models import ModelConfig, build_model, load_checkpoint
from knotseg.models.architectures import SegmentationNet
from knotseg.synthlog import GeneratorConfig, VolumeSample, generate_dataset, read_manifest, read_volume


def volume(seed=0, shape=(4, 16, 16)):
    rng = np.random.default_rng(seed)
    return VolumeSample(rng.random(shape) > 0.7, rng.random(shape) > 0.9, 4.0, 5.0, seed, 0.0)


def tiny_model_config(variant="convlstm", t=4, res=16):
    return ModelConfig(variant=variant, input_resolution=res, sequence_length=t, encoder_channels=(2, 3, 4),
                       scale_preset="desk")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = GeneratorConfig.preset_config("desk", image_size=24, pixel_pitch_mm=8.0, n_slices=16, volume_slices=4,
                                        split={"fir": (2, 1, 1), "spruce": (1, 1, 1)}, seed=4)
    return generate_dataset(cfg, out)


# -- augmentation ------------------------------------------------------------------------

def test_augment_spec_has_eight_angles():
    spec = AugmentSpec()
    assert spec.rotation_angles == (0, 45, 90, 135, 180, 225, 270, 315)
    assert spec.hflip_prob == 0.5


def test_forced_identity_and_disabled_are_identity():
    v = volume()
    assert augment_volume(v, np.random.default_rng(0), AugmentSpec(forced=(0, False))) == v
    assert augment_volume(v, np.random.default_rng(0), AugmentSpec(enabled=False)) == v


def test_quarter_turn_has_order_four():
    stack = volume(1).contour
    out = stack
    for _ in range(4):
        out = rotate_stack(out, 90)
    assert np.array_equal(out, stack)
    assert not np.array_equal(rotate_stack(stack, 90), stack)


@pytest.mark.parametrize("angle", ANGLES)
@pytest.mark.parametrize("flip", [False, True])
def test_same_transform_for_contour_and_knots(angle, flip):
    contour = np.zeros((2, 16, 16), bool)
    knots = np.zeros((2, 16, 16), bool)
    contour[:, 5, 9] = knots[:, 5, 9] = True
    out = augment_volume(VolumeSample(contour, knots), np.random.default_rng(0), AugmentSpec(forced=(angle, flip)))
    assert out.contour.dtype == bool and out.knots.dtype == bool
    assert np.array_equal(out.contour, out.knots)
    assert out.contour.sum() == 2


def test_45_degree_rotation_moves_points_on_the_circle():
    stack = np.zeros((1, 17, 17), bool)
    stack[0, 8, 16] = True  # +x axis, radius 8 from the centre pixel
    (i, j), = np.argwhere(rotate_stack(stack, 45)[0])
    assert (i, j) == (8 - round(8 / np.sqrt(2)), 8 + round(8 / np.sqrt(2)))


def test_non_square_rejected():
    with pytest.raises(ValueError, match="square"):
        augment_volume(volume(shape=(2, 8, 16)), np.random.default_rng(0))


def test_augment_draws_cover_all_angles_and_flip_rate():
    seen, flips = set(), 0
    v = volume(2, (1, 16, 16))
    for s in range(400):
        rng = np.random.default_rng(s)
        out = augment_volume(v, rng)
        rng = np.random.default_rng(s)
        angle = ANGLES[int(rng.integers(8))]
        flip = bool(rng.random() < 0.5)
        seen.add(angle)
        flips += flip
        assert out == augment_volume(v, None, AugmentSpec(forced=(angle, flip)))
    assert seen == set(ANGLES)
    assert 150 < flips < 250


# -- sliding window ----------------------------------------------------------------------

class ConstantModel(SegmentationNet):
    def __init__(self, value):
        super().__init__()
        self.config = tiny_model_config()
        self.value = value

    def forward(self, volume, rng=None):
        return Tensor(np.full(volume.shape, self.value))


def test_coverage_counts():
    c = coverage_counts(43, 40, 1)
    assert c[:3].tolist() == [1, 2, 3] and set(c[3:40]) == {4} and c[40:].tolist() == [3, 2, 1]


def test_window_starts_cover_tail_and_reject_short():
    assert window_starts(10, 4, 4) == [0, 4, 6]
    with pytest.raises(ValueError, match="pad"):
        window_starts(3, 4)


def test_constant_model_gives_constant_average():
    out = sliding_window_predict(np.zeros((9, 16, 16)), ConstantModel(0.3), window=4)
    np.testing.assert_allclose(out, 1 / (1 + np.exp(-0.3)), rtol=1e-6)
    assert out.dtype == np.float32


def test_single_window_equals_volume_prediction():
    model = build_model(tiny_model_config(), 1)
    model.eval()
    _seed_bn(model)
    v = volume(4)
    out = sliding_window_predict(v.contour[:, None], model, window=4)
    assert out.shape == (4, 1, 16, 16)
    assert out[:, 0].tobytes() == predict_volume(model, v.contour).tobytes()


def _seed_bn(model):
    res = model.config.input_resolution
    model.train()
    model(Tensor(np.random.default_rng(0).random((1, 4, 1, res, res))), np.random.default_rng(0))
    model.eval()


def test_non_overlapping_windows_match_per_volume_prediction():
    model = build_model(tiny_model_config(), 2)
    _seed_bn(model)
    stack = volume(5, (12, 16, 16)).contour
    out = sliding_window_predict(stack, model, window=4, stride=4)
    for k in range(3):
        assert out[4 * k:4 * k + 4].tobytes() == predict_volume(model, stack[4 * k:4 * k + 4]).tobytes()


def test_overlapping_windows_are_coverage_averages():
    model = build_model(tiny_model_config(), 3)
    _seed_bn(model)
    stack = volume(6, (6, 16, 16)).contour
    out = sliding_window_predict(stack, model, window=4, stride=1, batch_size=3)
    p = [predict_volume(model, stack[s:s + 4]).astype(np.float64) for s in range(3)]
    np.testing.assert_allclose(out[0], p[0][0], rtol=1e-6)
    np.testing.assert_allclose(out[2], (p[0][2] + p[1][1] + p[2][0]) / 3, rtol=1e-6)


# -- training ------------------------------------------------------------------------------

def quick_config(tmp_path, variant="convlstm", **kw):
    base = dict(model=tiny_model_config(variant), epochs=2, batch_size=2, lr=1e-3, seed=7,
                ckpt_dir=str(tmp_path))
    base.update(kw)
    return TrainConfig(**base)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_config_defaults():
    assert TrainConfig().epochs == 150 and TrainConfig().lr == 1e-4
    assert TrainConfig(model=ModelConfig(variant="segnet")).effective_batch_size == 4
    assert TrainConfig(model=ModelConfig(variant="unet")).effective_batch_size == 10
    assert TrainConfig().effective_batch_size == 10
    assert TrainConfig().dropout_p == 0.1 and TrainConfig(model=ModelConfig(variant="unet")).dropout_p == 0.0
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_training_is_deterministic(tmp_path):
    vols = [volume(s) for s in range(3)]
    a = fit(quick_config(tmp_path / "a"), vols, vols[:1])
    first = {name: digest(tmp_path / "a" / name) for name in (LAST, BEST, RUNLOG)}
    fit(quick_config(tmp_path / "a"), vols, vols[:1])
    assert {name: digest(tmp_path / "a" / name) for name in (LAST, BEST, RUNLOG)} == first
    assert len(a.runlog.epochs) == 2
    records = [json.loads(l) for l in (tmp_path / "a" / RUNLOG).read_text().splitlines()]
    assert records[0]["type"] == "config" and records[0]["seed"] == 7
    assert records[0]["config"]["lr"] == 1e-3
    assert [r["epoch"] for r in records[1:]] == [0, 1]
    assert set(records[1]) >= {"loss", "val_dice", "val_hd", "val_kappa"}


def test_forced_identity_augmentation_equals_disabled(tmp_path):
    vols = [volume(s) for s in range(3)]
    fit(quick_config(tmp_path / "a", augment=AugmentSpec(enabled=False)), vols, vols[:1])
    fit(quick_config(tmp_path / "b", augment=AugmentSpec(forced=(0, False))), vols, vols[:1])
    assert digest(tmp_path / "a" / LAST) == digest(tmp_path / "b" / LAST)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    vols = [volume(s) for s in range(3)]
    fit(quick_config(tmp_path, epochs=3), vols, vols[:1])
    full = {name: digest(tmp_path / name) for name in (LAST, RUNLOG)}

    def interrupt(epoch, loss, val):
        if epoch == 0:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        fit(quick_config(tmp_path, epochs=3), vols, vols[:1], log=interrupt)
    fit(quick_config(tmp_path, epochs=3), vols, vols[:1], resume=True)
    assert {name: digest(tmp_path / name) for name in (LAST, RUNLOG)} == full


def test_validation_is_invariant_to_dropout_seed(tmp_path):
    vols = [volume(s) for s in range(2)]
    res = fit(quick_config(tmp_path, epochs=1), vols, vols)
    model = res.model
    from knotseg.harness.training import validate
    from knotseg.metrics import EvalConfig
    a = validate(model, vols, EvalConfig())
    model.rng = np.random.default_rng(999)
    assert validate(model, vols, EvalConfig()) == a


def test_nan_loss_names_batch(tmp_path, monkeypatch):
    import knotseg.harness.training as tr
    vols = [volume(s) for s in range(2)]
    monkeypatch.setattr(tr, "bce_with_logits", lambda logits, y: Tensor(np.array(np.nan)))
    with pytest.raises(FloatingPointError, match="epoch 0, batch 0"):
        fit(quick_config(tmp_path), vols)


def test_shape_mismatch_rejected(tmp_path):
    with pytest.raises(ValueError, match="expects 16px"):
        fit(quick_config(tmp_path), [volume(0, (4, 8, 8))])


def test_loss_decreases_on_small_desk_problem():
    cfg = GeneratorConfig.preset_config("desk", split={"fir": (1, 0, 0)}, seed=1)
    from knotseg.synthlog import generate_tree
    vols = [v for v in generate_tree(cfg, 0, "fir") if v.knots.any()][:4]
    tc = TrainConfig(model=ModelConfig.preset("desk", "convlstm"), epochs=50, batch_size=4, lr=1e-3, seed=0,
                     augment=AugmentSpec(enabled=False), validate=False)
    log = fit(tc, vols).runlog.epochs
    assert log[49]["loss"] < log[0]["loss"]


def test_train_from_manifest_and_checkpoints(dataset, tmp_path):
    res = train(TrainConfig(model=tiny_model_config(res=24), epochs=1, batch_size=4, data=str(dataset.root),
                            ckpt_dir=str(tmp_path)))
    assert (tmp_path / LAST).exists() and (tmp_path / BEST).exists()
    loaded = load_checkpoint(tmp_path / LAST)
    stack = dataset.load_fold("val")[0][1].contour
    assert predict_volume(loaded, stack).tobytes() == predict_volume(res.model, stack).tobytes()


# -- fold evaluation -------------------------------------------------------------------------

def test_oracle_prediction_is_perfect(dataset):
    report = oracle_report(dataset, "test")
    assert all((m.dice, m.hd_mm, m.kappa) == (1.0, 0.0, 1.0) for m in report.volumes)
    assert [r[2:] for r in report.species_rows] == [("1.00", "0.00", "1.00")] * 2


def test_all_zero_prediction(dataset, tmp_path):
    model = ConstantModel(-50.0)
    report = evaluate_fold(model, dataset, "test", method="zero")
    gts = [v for _, v in dataset.load_fold("test")]
    knotty = [m for m, gt in zip(report.volumes, gts) if gt.knots.any()]
    assert knotty and all(m.dice == 0.0 and m.kappa <= 0 and m.hd_excluded for m in knotty)


def test_per_tree_rows_are_volume_means(dataset):
    model = build_model(tiny_model_config(res=24), 0)
    _seed_bn(model)
    report = evaluate_fold(model, dataset, "test")
    for row in aggregate(report.volumes, "tree"):
        ds = [m.dice for m in report.volumes if str(m.tree_id) == row.group]
        assert row.dice == pytest.approx(np.mean(ds))
    tree_ids = {m.tree_id for m in report.volumes}
    assert tree_ids == {r.tree_id for r in dataset.trees("test")}


def test_predict_then_eval_matches_direct_eval(dataset, tmp_path):
    model = build_model(tiny_model_config(res=24), 0)
    _seed_bn(model)
    direct = evaluate_fold(model, dataset, "test", report_dir=tmp_path / "direct")
    predict_fold(model, dataset, "test", tmp_path / "pred")
    stored = evaluate_predictions(tmp_path / "pred", dataset, "test", method="ConvLSTM", report_dir=tmp_path / "stored")
    assert stored.volumes == direct.volumes
    for name in ("table_species.csv", "table_trees.csv", "kappa_distribution.csv"):
        assert (tmp_path / "direct" / name).read_bytes() == (tmp_path / "stored" / name).read_bytes()


def test_windowed_fold_with_volume_stride_equals_per_volume(dataset):
    model = build_model(tiny_model_config(res=24), 0)
    _seed_bn(model)
    per_volume = evaluate_fold(model, dataset, "test")
    assert evaluate_fold(model, dataset, "test", window=4, stride=4).volumes == per_volume.volumes


def test_windowed_fold_crosses_volume_boundaries(dataset):
    model = build_model(tiny_model_config(res=24), 0)
    _seed_bn(model)
    rec = dataset.trees("test")[0]
    tree = dataset.load_tree(rec.tree_id)
    full = sliding_window_predict(tree.contour, model, window=4, stride=1)
    windowed = fold_predictor(model, dataset, window=4, stride=1)
    for k, name in enumerate(rec.files):
        gt = read_volume(dataset.root / name)
        assert windowed(rec, k, gt).tobytes() == full[4 * k:4 * k + 4].tobytes()
    assert not np.array_equal(full[:4], predict_volume(model, tree.contour[:4]))


def test_missing_files_enumerated_before_work(dataset, tmp_path):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(dataset.root, root)
    m = read_manifest(root)
    victims = [root / f for f in m.trees("test")[0].files[:2]]
    for v in victims:
        v.unlink()
    with pytest.raises(FileNotFoundError, match="2 volume file"):
        evaluate_fold(ConstantModel(0.0), m, "test")


def test_unknown_fold_rejected(dataset):
    with pytest.raises(ValueError, match="unknown fold"):
        evaluate_fold(ConstantModel(0.0), dataset, "holdout")


def test_eval_config_uses_dataset_pitch(dataset):
    cfg = eval_config_for(dataset)
    assert (cfg.pixel_pitch_mm, cfg.slice_pitch_mm) == (8.0, 5.0)
