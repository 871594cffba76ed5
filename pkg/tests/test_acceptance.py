"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed in the terminal
summary (and immediately, when run with -s).
"""
import hashlib
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from knotseg.autodiff import Tensor, bce_with_logits, check_gradients, check_module_gradients, mul, no_grad, ops
from knotseg.autodiff.ops import RunningStats
from knotseg.binio import FormatError
from knotseg.harness import ANGLES, AugmentSpec, TrainConfig, evaluate_fold, fit, predict_volume, train
from knotseg.metrics import EvalConfig, dice, hausdorff_mm, kappa
from knotseg.metrics.core import ConfusionCounts, kappa_from_counts
from knotseg.models import ModelConfig, build_model
from knotseg.models.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint
from knotseg.runconfig import RunConfig, parse_text, preset_text
from knotseg.synthlog import VolumeSample, decode_volume, encode_volume, generate_dataset
from knotseg.synthlog.dataset import GeneratorConfig, tree_seed
from knotseg.synthlog.geometry import _polar, knot_disc, sample_log_spec

SEEDS = range(10)
TOL = 2e-3


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# -- 1. gradient suite ----------------------------------------------------------------------

def _probe(out: Tensor, seed: int) -> Tensor:
    r = np.random.default_rng(1000 + seed).standard_normal(out.shape)
    return ops.sum(mul(out, Tensor(r, dtype=out.dtype)))


def _bn(training: bool):
    def f(x, g, b):
        running = RunningStats(np.full(3, 0.2, x.dtype), np.full(3, 1.5, x.dtype), 1)
        return ops.batchnorm2d(x, g, b, running, training)
    return f


def _op_cases(rng: np.random.Generator):
    """(name, function of tensors, inputs); nonlinear probes keep clear of kinks by construction."""
    x = rng.standard_normal((2, 3, 4, 4))
    away = rng.uniform(0.05, 2.0, (2, 3, 4, 4)) * rng.choice([-1, 1], (2, 3, 4, 4))
    pool = rng.permutation(96).reshape(2, 3, 4, 4) / 10.0  # distinct values: unique maxima
    y = (rng.random((2, 3, 4, 4)) > 0.5).astype(np.float32)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    return [
        ("conv2d", lambda x, w, c: ops.conv2d(x, w, c), [x, rng.standard_normal((5, 3, 3, 3)), rng.standard_normal(5)]),
        ("conv2d_1x1", lambda x, w: ops.conv2d(x, w), [x, rng.standard_normal((2, 3, 1, 1))]),
        ("batchnorm_train", _bn(True), [x, rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        ("batchnorm_eval", _bn(False), [x, rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        ("maxpool2", ops.maxpool2, [pool]),
        ("upsample2", ops.upsample_nearest2, [x]),
        ("relu", ops.relu, [away]),
        ("sigmoid", ops.sigmoid, [x]),
        ("tanh", ops.tanh, [x]),
        ("dropout", lambda x: ops.dropout(x, 0.3, True, np.random.default_rng(5)), [x]),
        ("lstm_update", ops.lstm_update, [rng.standard_normal((2, 8, 3, 3)), rng.standard_normal((2, 2, 3, 3))]),
        ("lstm_update_zero_state", lambda g: ops.lstm_update(g, None), [rng.standard_normal((2, 8, 3, 3))]),
        ("add", ops.add, [a, b]),
        ("sub", ops.sub, [a, b]),
        ("mul", ops.mul, [a, b]),
        ("mean", ops.mean, [a]),
        ("reshape", lambda t: ops.reshape(t, (4, 3)), [a]),
        ("transpose", lambda t: ops.transpose(t, (2, 0, 3, 1)), [x]),
        ("slice_axis", lambda t: ops.slice_axis(t, 1, 3, axis=1), [x]),
        ("take", lambda t: ops.take(t, 1, axis=1), [x]),
        ("concat", lambda s, t: ops.concat([s, t], axis=0), [a, b]),
        ("stack", lambda s, t: ops.stack([s, t], axis=1), [a, b]),
        ("bce_with_logits", lambda z: bce_with_logits(z, y), [x * 3]),
    ]


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in SEEDS:
        for name, fn, inputs in _op_cases(np.random.default_rng(seed)):
            scalar = (lambda *t, fn=fn: fn(*t)) if name in ("mean", "bce_with_logits") else \
                (lambda *t, fn=fn: _probe(fn(*t), seed))
            worst[name] = max(worst.get(name, 0.0), *check_gradients(scalar, inputs))

    cfg = ModelConfig(variant="convlstm", input_resolution=8, sequence_length=2, encoder_channels=(2, 3, 4),
                      scale_preset="desk")
    for seed in SEEDS:
        model = build_model(cfg, seed)
        rng = np.random.default_rng(seed)
        x = Tensor(rng.random((1, 2, 1, 8, 8)))
        y = (rng.random((1, 2, 1, 8, 8)) > 0.8).astype(np.float32)
        model.train()
        errs = check_module_gradients(model, lambda: bce_with_logits(model(x, np.random.default_rng(9)), y),
                                      max_coords=12, rng=rng)
        worst["tiny_convlstm"] = max(worst.get("tiny_convlstm", 0.0), *errs.values())
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    record(1, "gradient suite", err <= TOL and elapsed < 300,
           f"{len(worst)} checks x {len(SEEDS)} seeds, worst {name} rel err {err:.2e}, {elapsed:.0f} s")


# -- 2. metric oracles ------------------------------------------------------------------------

def test_criterion_2_metric_oracles():
    cfg = EvalConfig()
    rng = np.random.default_rng(2024)
    worst_dice = worst_kappa = 0.0
    hd_exact = True
    for _ in range(100):
        pred = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.5)
        gt = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.5)
        worst_dice = max(worst_dice, abs(dice(pred, gt) - oracles.dice(pred, gt)))
        worst_kappa = max(worst_kappa, abs(kappa(pred, gt) - oracles.kappa(pred, gt)))
        hd_exact &= hausdorff_mm(pred, gt, cfg) == oracles.hausdorff(pred, gt, cfg.spacing)

    pred, gt = np.zeros((1, 4, 4), bool), np.zeros((1, 4, 4), bool)
    pred[0, 0:2, 0:2] = True
    gt[0, 0:2, 1:3] = True
    a, b, c = (np.zeros((2, 5, 6), bool) for _ in range(3))
    a[0, 0, 0] = b[0, 3, 4] = c[1, 0, 0] = True
    examples = (dice(pred, gt) == 0.5
                and abs(kappa_from_counts(ConfusionCounts(tp=40, fp=10, fn=10, tn=40)) - 0.6) <= 1e-12
                and hausdorff_mm(a, b, cfg) == 5.0 and hausdorff_mm(a, c, cfg) == 1.25)
    record(2, "metric-oracle equivalence", worst_dice <= 1e-9 and worst_kappa <= 1e-9 and hd_exact and examples,
           f"dice err {worst_dice:.1e}, kappa err {worst_kappa:.1e}, HD exact {hd_exact}, examples {examples}")


# -- 3. overfit capability ----------------------------------------------------------------------

OVERFIT_EPOCHS = 300
OVERFIT_LR = 3e-3
OVERFIT_EVAL_EVERY = 5


def test_criterion_3_overfit_capability(tmp_path):
    gen = GeneratorConfig.preset_config("desk", split={"fir": (2, 0, 0), "spruce": (0, 0, 0)}, seed=0)
    manifest = generate_dataset(gen, tmp_path / "data")
    volumes = [v for _, v in manifest.load_fold("train") if v.knots.sum() > 20][:4]
    assert len(volumes) == 4
    model_cfg = ModelConfig.preset("desk", "convlstm")
    assert (model_cfg.input_resolution, model_cfg.sequence_length, model_cfg.encoder_channels) == (48, 12, (8, 12, 16))
    config = TrainConfig(model=model_cfg, epochs=OVERFIT_EPOCHS, batch_size=1, lr=OVERFIT_LR,
                         augment=AugmentSpec(enabled=False), validate=False, seed=0)
    state = {"best": 0.0, "epoch": None}
    t0 = time.perf_counter()

    def monitor(epoch, model):
        if (epoch + 1) % OVERFIT_EVAL_EVERY:
            return False
        score = float(np.mean([dice(predict_volume(model, v.contour) >= 0.5, v.knots) for v in volumes]))
        state["best"] = max(state["best"], score)
        if score >= 0.9:
            state["epoch"] = epoch + 1
        return score >= 0.9

    fit(config, volumes, monitor=monitor)
    elapsed = time.perf_counter() - t0
    reached = state["epoch"] is not None
    record(3, "overfit capability", reached and elapsed < 1800,
           f"mean train Dice {'>= 0.90 at epoch ' + str(state['epoch']) if reached else 'peak ' + format(state['best'], '.3f')}"
           f", {elapsed:.0f} s")


# -- 4. recurrence advantage --------------------------------------------------------------------

ORDERING_SEEDS = (0, 1, 2)


def _hidden_scar_branches(gen: GeneratorConfig, manifest) -> tuple[int, int]:
    """(scarless, total) count of test-fold branches with knot voxels on their central cross-section.

    The central cross-section lies halfway along the cone axis between pith and bark.
    """
    hidden = total = 0
    for rec in manifest.trees("test"):
        spec = sample_log_spec(tree_seed(gen.seed, rec.tree_id), gen.profiles.get(rec.species, rec.species),
                               gen.length_mm, rec.tree_id, gen.image_size * gen.pixel_pitch_mm)
        for b in spec.branches:
            z = 0.5 * (b.z_mm + spec.emergence_height(b))
            r, theta, dx, dy = _polar(spec, gen.raster, z)
            inside = r < spec.radius(theta, z) - gen.raster.ring_px * gen.raster.pitch_mm
            if (knot_disc(spec, b, dx, dy, z) & inside).any():
                total += 1
                hidden += not spec.scar(b, theta, z).any()
    return hidden, total


def test_criterion_4_recurrence_advantage(tmp_path):
    base = RunConfig.resolve("desk")
    gen = base.generator()
    manifest = generate_dataset(gen, tmp_path / "data")
    hidden, branches = _hidden_scar_branches(gen, manifest)
    t0 = time.perf_counter()
    kappas: dict[str, list[float]] = {"convlstm": [], "segnet": []}
    for seed in ORDERING_SEEDS:
        run = RunConfig.resolve("desk", overrides=[f"seed={seed}", "validate=false"])
        for variant in kappas:
            config = run.train(variant, data=str(tmp_path / "data"))
            result = train(config)
            window, stride = run.window()
            report = evaluate_fold(result.model, manifest, "test", window=window, stride=stride)
            kappas[variant].append(report.mean("kappa"))
            print(f"seed {seed} {variant}: test kappa {kappas[variant][-1]:.4f}", flush=True)
    budgets = {v: run.train(v) for v in kappas}
    same_budget = len({(t.epochs, t.lr, t.effective_batch_size, t.augment, t.knot_volumes_only)
                       for t in budgets.values()}) == 1
    gap = float(np.mean(kappas["convlstm"]) - np.mean(kappas["segnet"]))
    per_seed = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in zip(kappas["convlstm"], kappas["segnet"]))
    record(4, "recurrence-advantage ordering", gap >= 0.05 and hidden > 0 and same_budget,
           f"ConvLSTM/SegNet test kappa per seed {per_seed}, mean gap {gap:+.3f}; "
           f"{hidden}/{branches} test branches scarless on the central knot cross-section; "
           f"identical budgets {same_budget}; {time.perf_counter() - t0:.0f} s")


# -- 5. causality contrast ----------------------------------------------------------------------

def test_criterion_5_causality_contrast():
    rng = np.random.default_rng(5)
    models = {v: build_model(ModelConfig.preset("desk", v, sequence_length=6, input_resolution=16), 3)
              for v in ("convlstm", "segnet", "unet")}
    warm = Tensor(rng.random((2, 6, 1, 16, 16)).astype(np.float32))
    with no_grad():
        for m in models.values():
            m.train()
            m(warm, np.random.default_rng(0))
            m.eval()
    recurrent_spreads = feedforward_isolated = 0
    for _ in range(10):
        x = (rng.random((6, 1, 16, 16)) > 0.6).astype(np.float32)
        k = int(rng.integers(6))
        y = x.copy()
        y[k] = 1 - y[k]
        others = [t for t in range(6) if t != k]
        with no_grad():
            outs = {v: (m(Tensor(x)).data, m(Tensor(y)).data) for v, m in models.items()}
        a, b = outs["convlstm"]
        recurrent_spreads += all(not np.array_equal(a[t], b[t]) for t in others)
        feedforward_isolated += all(outs[v][0][others].tobytes() == outs[v][1][others].tobytes()
                                    for v in ("segnet", "unet"))
    record(5, "causality contrast", recurrent_spreads == 10 and feedforward_isolated == 10,
           f"ConvLSTM changed every other slice in {recurrent_spreads}/10 cases, "
           f"feedforward unchanged in {feedforward_isolated}/10")


# -- 6. determinism and roundtrips ------------------------------------------------------------

TINY_GEN = dict(image_size=24, pixel_pitch_mm=8.0, n_slices=16, volume_slices=4,
                split={"fir": (2, 1, 1), "spruce": (1, 1, 1)}, seed=4)


def _pipeline(root: Path) -> dict[str, str]:
    manifest = generate_dataset(GeneratorConfig.preset_config("desk", **TINY_GEN), root / "data")
    model = ModelConfig(variant="convlstm", input_resolution=24, sequence_length=4, encoder_channels=(2, 3, 4),
                        scale_preset="desk")
    train = [v for _, v in manifest.load_fold("train")]
    val = [v for _, v in manifest.load_fold("val")]
    fit(TrainConfig(model=model, epochs=2, batch_size=2, lr=1e-3, seed=1, ckpt_dir=str(root / "ckpt")), train, val)
    evaluate_fold(root / "ckpt" / "last.kckp", manifest, "test", report_dir=root / "reports")
    return {str(p.relative_to(root)): sha(p.read_bytes()) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "runlog_timing.jsonl"}


def _every_bit_detected(blob: bytes, decode) -> bool:
    for i in range(len(blob) * 8):
        bad = bytearray(blob)
        bad[i // 8] ^= 1 << (i % 8)
        try:
            decode(bytes(bad))
        except FormatError:
            continue
        return False
    return True


def test_criterion_6_determinism_and_roundtrips(tmp_path):
    # the run log records its own paths, so both runs use the same directory
    first = _pipeline(tmp_path / "run")
    shutil.rmtree(tmp_path / "run")
    second = _pipeline(tmp_path / "run")
    kinds = {"manifest": "data/manifest.txt", "checkpoint": "ckpt/last.kckp",
             "report": "reports/table_species.csv", "runlog": "ckpt/runlog.jsonl"}
    deterministic = first == second and all(k in first for k in kinds.values())

    rng = np.random.default_rng(6)
    vol = VolumeSample(rng.random((3, 8, 8)) > 0.5, rng.random((3, 8, 8)) > 0.9, 4.0, 5.0, 7, 15.0,
                       rng.random((3, 8, 8)).astype(np.float32))
    kvol = encode_volume(vol)
    kvol_ok = decode_volume(kvol) == vol and encode_volume(decode_volume(kvol)) == kvol
    model = build_model(ModelConfig(variant="segnet", input_resolution=8, sequence_length=2,
                                    encoder_channels=(1, 1, 1), scale_preset="desk"), 0)
    kckp = encode_checkpoint(Checkpoint(model.config, dict(model.state_dict()), 3, None, {"epoch": 0}))
    restored = decode_checkpoint(kckp)
    kckp_ok = (encode_checkpoint(restored) == kckp and
               all(np.array_equal(restored.tensors[n], p.data) for n, p in model.parameters().items()))
    kvol_crc = _every_bit_detected(kvol, decode_volume)
    kckp_crc = _every_bit_detected(kckp, decode_checkpoint)
    truncation = all(_raises(decode_volume, kvol[:n]) for n in range(len(kvol)))
    record(6, "determinism and roundtrips",
           deterministic and kvol_ok and kckp_ok and kvol_crc and kckp_crc and truncation,
           f"{len(first)} pipeline files identical {deterministic}; KVOL roundtrip {kvol_ok}, "
           f"KCKP roundtrip {kckp_ok}; all {8 * len(kvol)} + {8 * len(kckp)} bit flips caught "
           f"{kvol_crc and kckp_crc}; truncations caught {truncation}")


def _raises(decode, blob) -> bool:
    try:
        decode(blob)
    except FormatError:
        return True
    return False


# -- 7. protocol fidelity ---------------------------------------------------------------------

FULL_SNAPSHOT = {
    "epochs": 150,
    "lr": 0.0001,
    "batch_size.convlstm": 10,
    "batch_size.unet": 10,
    "batch_size.segnet": 4,
    "dropout": 0.1,
    "threshold": 0.5,
    "volume_slices": 40,
    "window": 40,
    "rotation_angles": (0, 45, 90, 135, 180, 225, 270, 315),
    "hflip_prob": 0.5,
    "augment": True,
    "stride": 1,
    "image_size": 192,
}


def test_criterion_7_protocol_fidelity():
    values = parse_text(preset_text("full"), "full.cfg")
    mismatched = {k: (values.get(k), v) for k, v in FULL_SNAPSHOT.items() if values.get(k) != v}
    run = RunConfig.resolve("full")
    built = {v: run.train(v) for v in ("convlstm", "unet", "segnet")}
    derived = (all(t.epochs == 150 and t.lr == 1e-4 and t.augment.hflip_prob == 0.5 and t.augment.enabled
                   and t.augment.rotation_angles == ANGLES and t.model.sequence_length == 40
                   and t.threshold == 0.5 for t in built.values())
               and [built[v].effective_batch_size for v in ("convlstm", "unet", "segnet")] == [10, 10, 4]
               and built["convlstm"].dropout_p == 0.1 and run.window() == (40, 1)
               and run.evaluation(1.0, 1.25).threshold == 0.5)
    defaults = TrainConfig()
    default_ok = (defaults.epochs, defaults.lr, defaults.effective_batch_size, defaults.model.dropout_p,
                  defaults.threshold, defaults.model.sequence_length) == (150, 1e-4, 10, 0.1, 0.5, 40)
    record(7, "protocol fidelity", not mismatched and derived and default_ok,
           f"{len(FULL_SNAPSHOT)} snapshot keys, mismatches {mismatched or 'none'}, "
           f"resolved configs {derived}, code defaults {default_ok}")
