import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from semdistill.metrics import psnr, ssim
from semdistill.prior import MaskProvider
from semdistill.restorers import checkpoint_bytes
from semdistill.training import (Sample, TrainConfig, best_of_sweep, desk_preset, identity_restorer, lambda_sweep,
                                 make_synthetic_pairs, parse_config_text, pretrain_teacher, student_restorer,
                                 train_student, validate, write_sweep_csv)

TINY = dict(base_channels=4, depth=1, teacher_encoder_channels=2, batch_size=4, epochs_stage1=1,
            epochs_stage2=1, learning_rate=1e-3)


@pytest.fixture(scope="module")
def pairs():
    samples, _ = make_synthetic_pairs(n=8, size=16, seed=3)
    return samples


@pytest.fixture(scope="module")
def teacher(pairs):
    t, _ = pretrain_teacher(pairs, MaskProvider("synthetic", 7), TrainConfig(**TINY))
    return t.freeze()


def test_pretrain_smoke_and_determinism(pairs):
    cfg = TrainConfig(**TINY)
    t1, rep = pretrain_teacher(pairs, MaskProvider("synthetic", 7), cfg, val=pairs[:3])
    t2, _ = pretrain_teacher(pairs, MaskProvider("synthetic", 7), cfg, val=pairs[:3])
    assert len(rep.rows) == 1 and math.isfinite(rep.rows[0].train_loss)
    assert checkpoint_bytes(t1) == checkpoint_bytes(t2)


def test_pretrain_cat_ablation(pairs):
    cfg = TrainConfig(**TINY, ablation="cat_fusion")
    t, rep = pretrain_teacher(pairs, MaskProvider("synthetic", 7), cfg)
    assert t.fusion == "cat" and t.in_channels == 8 and math.isfinite(rep.rows[0].train_loss)
    assert cfg.effective_dropout == 0.0
    assert TrainConfig(ablation="spi_no_dropout").effective_dropout == 0.0


def test_pretrain_rejects_empty():
    with pytest.raises(ValueError):
        pretrain_teacher([], MaskProvider(), TrainConfig(**TINY))


def test_student_refuses_unfrozen_teacher(pairs):
    cfg = TrainConfig(**TINY)
    t, _ = pretrain_teacher(pairs, MaskProvider("synthetic", 7), replace(cfg, epochs_stage1=0))
    with pytest.raises(RuntimeError, match="frozen"):
        train_student(pairs, MaskProvider(), t, cfg)


def test_zero_weights_equal_baseline(pairs, teacher):
    cfg = TrainConfig(**{**TINY, "epochs_stage2": 2})
    s0, r0 = train_student(pairs, MaskProvider("synthetic", 7), teacher, replace(cfg, lambda1=0, lambda2=0))
    sb, rb = train_student(pairs, None, None, cfg)
    assert [abs(a.recon - b.recon) < 1e-9 for a, b in zip(r0.steps, rb.steps)] == [True] * len(rb.steps)
    assert checkpoint_bytes(s0) == checkpoint_bytes(sb)


@pytest.mark.parametrize("pooled", [False, True])
def test_teacher_and_phi_untouched_and_losses_decompose(pairs, teacher, pooled):
    from semdistill.losses import FeatureExtractor
    phi = FeatureExtractor()
    before = {**teacher.snapshot(), **phi.snapshot()}
    cfg = TrainConfig(**{**TINY, "epochs_stage2": 2}, scm_pooled=pooled)
    _, rep = train_student(pairs, MaskProvider("synthetic", 7), teacher, cfg, phi=phi)
    after = {**teacher.snapshot(), **phi.snapshot()}
    assert all(before[n].tobytes() == after[n].tobytes() for n in before)
    for s in rep.steps:
        expect = s.recon + 0.01 * s.skd + 100.0 * s.scm
        assert abs(s.total - expect) <= 1e-6 * abs(expect)
        assert (s.scm > 0) == pooled


def test_no_skd_ablation_drops_the_term(pairs, teacher):
    cfg = TrainConfig(**TINY, ablation="no_skd", scm_pooled=True)
    assert cfg.weights.skd == 0.0
    _, rep = train_student(pairs, MaskProvider("synthetic", 7), teacher, cfg)
    for s in rep.steps:
        assert abs(s.total - (s.recon + 100.0 * s.scm)) <= 1e-6 * abs(s.total)


def test_masks_from_student_option(pairs, teacher):
    cfg = TrainConfig(**TINY, masks_from="student", scm_pooled=True)
    _, rep = train_student(pairs, MaskProvider("synthetic", 7), teacher, cfg)
    assert math.isfinite(rep.rows[-1].train_loss)


def test_teacher_grad_flag_still_leaves_teacher_untouched(pairs, teacher):
    before = teacher.snapshot()
    train_student(pairs, MaskProvider("synthetic", 7), teacher, TrainConfig(**TINY, teacher_grad=True))
    assert all(before[n].tobytes() == a.tobytes() for n, a in teacher.snapshot().items())


def test_validate_identity_on_clean_pairs():
    img = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    split = [Sample("a", img, img), Sample("b", img[::-1].copy(), img[::-1].copy())]
    p, s = validate(identity_restorer, split)
    assert p == 80.0 and abs(s - 1.0) < 1e-9
    assert validate(identity_restorer, split) == (p, s)
    with pytest.raises(ValueError):
        validate(identity_restorer, [])


def test_validate_matches_hand_average(pairs):
    split = pairs[:3]
    p, s = validate(identity_restorer, split)
    ps = [psnr(np.clip(x.degraded, 0, 1), x.reference) for x in split]
    ss = [ssim(np.clip(x.degraded, 0, 1), x.reference) for x in split]
    assert p == pytest.approx(sum(ps) / 3, abs=1e-12) and s == pytest.approx(sum(ss) / 3, abs=1e-12)


def test_lambda_sweep_single_point_and_csv(pairs, teacher, tmp_path):
    cfg = TrainConfig(**TINY, lambda1=0.01, lambda2=100)
    rows = lambda_sweep(pairs, MaskProvider("synthetic", 7), teacher, cfg, pairs[:3], [0.01], [100.0])
    student, _ = train_student(pairs, MaskProvider("synthetic", 7), teacher, cfg)
    assert len(rows) == 1 and rows[0][2:] == validate(student_restorer(student), pairs[:3])
    assert best_of_sweep(rows) == rows[0]
    grid = lambda_sweep(pairs, MaskProvider("synthetic", 7), teacher, cfg, pairs[:3], [1e-3, 1e-2], [10.0])
    write_sweep_csv(grid, tmp_path / "s.csv")
    lines = list(csv.reader(open(tmp_path / "s.csv")))
    assert lines[0] == ["lambda1", "lambda2", "psnr", "ssim"] and len(lines) == 3


def test_report_csv(pairs, tmp_path):
    _, rep = train_student(pairs, None, None, TrainConfig(**{**TINY, "epochs_stage2": 2}), val=pairs[:2])
    rep.write_csv(tmp_path / "a.csv")
    rep.write_csv(tmp_path / "b.csv", timing=False)
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["epoch", "train_loss", "val_psnr", "val_ssim", "seconds"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert all(r[-1] == "" for r in list(csv.reader(open(tmp_path / "b.csv")))[1:])


def test_config_text_round_trip_and_errors():
    cfg = desk_preset(seed=7, lambda2=10.0, scm_pooled=True)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    assert parse_config_text("# c\nlearning-rate = 0.5\n") == {"learning_rate": 0.5}
    for bad in ("nope=1", "batch_size", "scm_pooled=maybe"):
        with pytest.raises(ValueError):
            parse_config_text(bad)
    for kw in (dict(learning_rate=0), dict(batch_size=0), dict(ablation="x"), dict(dropout_p=1.0),
               dict(lambda1=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_documented_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.lambda1, cfg.lambda2) == (1e-4, 8, 0.01, 100.0)
    assert (cfg.epochs_stage1, cfg.epochs_stage2, cfg.dropout_p, cfg.weight_decay) == (60, 60, 0.5, 0.0)
    d = desk_preset()
    assert (d.epochs_stage1, d.epochs_stage2) == (20, 20)
