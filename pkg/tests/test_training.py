import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import DATA
from svan import data
from svan.model import SvanConfig, init_params, load_params
from svan.training import (
    ConfigError,
    StagePlan,
    StepRecord,
    TrainLog,
    TrainingDiverged,
    bicubic_model,
    default_protocol,
    evaluate,
    lr_at,
    parse_config,
    train,
)

TINY = SvanConfig.small(4, 1, scale=4, seed=5)


def _toy_plan(epochs=3, **kw):
    base = dict(loss="l1", lr=1e-3, schedule="halve", period=500, patch_sizes=(8,), batch_size=2)
    base.update(kw)
    return [StagePlan(epochs, **base)]


@pytest.fixture(scope="module")
def mini():
    return data.load_dataset(DATA / "mini", 4)


class TestSchedule:
    def test_halve(self):
        s1 = default_protocol()[0]
        assert [lr_at(s1, e) for e in (0, 499, 500, 1000)] == [1e-3, 1e-3, 5e-4, 2.5e-4]
        s3 = default_protocol()[2]
        assert lr_at(s3, 300) == 2.5e-4

    def test_cosine(self):
        s2 = default_protocol()[1]
        assert lr_at(s2, 0) == 1e-4
        assert lr_at(s2, 10) == pytest.approx(5e-5, rel=1e-12)
        assert lr_at(s2, 20) == 1e-4

    @given(st.integers(0, 5000))
    def test_halve_non_increasing(self, e):
        s1 = default_protocol()[0]
        assert lr_at(s1, e + 1) <= lr_at(s1, e)

    @given(st.integers(0, 5000), st.integers(1, 50))
    def test_cosine_periodic(self, e, period):
        plan = StagePlan(1, "l1", 1e-3, "cosine", period)
        assert lr_at(plan, e + period) == lr_at(plan, e)
        assert 0 <= lr_at(plan, e) <= 1e-3

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at(default_protocol()[0], -1)


class TestProtocol:
    def test_defaults(self):
        s1, s2, s3 = default_protocol()
        assert (s1.epochs, s1.loss, s1.lr, s1.schedule, s1.period, s1.patch_sizes) == (2000, "l1", 1e-3, "halve", 500, (64,))
        assert (s2.epochs, s2.loss, s2.lr, s2.schedule, s2.period, s2.patch_sizes) == (3000, "l1", 1e-4, "cosine", 20, (64, 128))
        assert s2.total_epochs == 6000
        assert (s3.epochs, s3.loss, s3.lr, s3.schedule, s3.period, s3.patch_sizes) == (3000, "l2", 5e-4, "halve", 300, (64,))
        assert all(s.batch_size == 64 for s in (s1, s2, s3))

    def test_override(self):
        stages = default_protocol(epochs=500)
        assert [s.epochs for s in stages] == [500, 500, 500]
        assert [s.lr for s in stages] == [1e-3, 1e-4, 5e-4]

    @pytest.mark.parametrize("kw", [{"lr": 0.0}, {"loss": "huber"}, {"schedule": "step"}, {"epochs": -1},
                                    {"batch_size": 0}, {"patch_sizes": ()}])
    def test_invalid(self, kw):
        base = dict(epochs=1, loss="l1", lr=1e-3, schedule="halve", period=1)
        base.update(kw)
        with pytest.raises(ValueError):
            StagePlan(**base)


class TestTrainLog:
    def test_strictly_increasing(self):
        log = TrainLog()
        log.append(StepRecord(1, 1, 0, 1e-3, 0.5))
        with pytest.raises(ValueError):
            log.append(StepRecord(1, 1, 0, 1e-3, 0.4))

    def test_csv_round_trips_floats(self):
        log = TrainLog()
        log.append(StepRecord(1, 1, 0, 1e-3, 0.1 + 0.2))
        rows = list(csv.reader(io.StringIO(log.to_csv())))
        assert rows[0] == ["step", "stage", "epoch", "lr", "loss"]
        assert float(rows[1][4]) == 0.1 + 0.2


class TestTrain:
    def test_zero_epochs_returns_init(self, mini):
        params, log = train(TINY, mini, _toy_plan(epochs=0))
        assert params.equals(init_params(TINY))
        assert log.steps == []

    def test_deterministic(self, mini):
        a, la = train(TINY, mini, _toy_plan())
        b, lb = train(TINY, mini, _toy_plan())
        assert la.to_csv() == lb.to_csv()
        assert a.equals(b)
        c, lc = train(SvanConfig.small(4, 1, scale=4, seed=6), mini, _toy_plan())
        assert lc.to_csv() != la.to_csv()

    def test_logs_every_step(self, mini):
        plans = _toy_plan(epochs=2, steps_per_epoch=2) + _toy_plan(epochs=1, loss="l2", patch_sizes=(8, 12))
        _, log = train(TINY, mini, plans)
        assert [r.step for r in log.steps] == [1, 2, 3, 4, 5, 6]
        assert [r.stage for r in log.steps] == [1, 1, 1, 1, 2, 2]
        assert all(math.isfinite(v) for v in log.losses)

    def test_checkpoints_and_validation(self, mini, tmp_path):
        params, log = train(TINY, mini, _toy_plan(epochs=4) * 2, val_set=mini[:1], val_every=2, run_dir=tmp_path)
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["best.ckpt", "last.ckpt", "stage1.ckpt", "stage2.ckpt"]
        assert load_params(tmp_path / "checkpoints" / "last.ckpt").equals(params)
        assert [(s, e) for s, e, _ in log.validation] == [(1, 2), (1, 4), (2, 2), (2, 4)]

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            train(TINY, [], _toy_plan())

    def test_patch_too_large(self, mini):
        with pytest.raises(ValueError, match="larger"):
            train(TINY, mini, _toy_plan(patch_sizes=(25,)))

    def test_divergence_detected(self, mini):
        params = init_params(TINY)
        bad = dict(params.tensors)
        bad["recon.bias"] = np.full_like(bad["recon.bias"], np.inf)
        with pytest.raises(TrainingDiverged):
            train(TINY, mini, _toy_plan(), params=params.with_tensors(bad))


class TestEvaluate:
    def test_perfect_model(self, mini):
        truth = {s.lr.tobytes(): s.hr for s in mini}
        report = evaluate(lambda lr: truth[lr.tobytes()], mini, 4)
        assert all(r.psnr_y == math.inf and r.ssim_y == 1.0 for r in report.records)
        assert "inf" in report.to_csv()

    def test_bicubic_columns_agree(self, mini):
        report = evaluate(bicubic_model(4), mini, 4)
        for r in report.records:
            assert r.psnr_y == r.bicubic_psnr_y and r.ssim_y == r.bicubic_ssim_y
            assert 15 < r.psnr_y < 40
        rows = list(csv.reader(io.StringIO(report.to_csv())))
        assert rows[0][:3] == ["image", "psnr_y", "ssim_y"]
        assert [r[0] for r in rows[1:]] == ["astronaut", "chelsea", "coffee", "mean"]

    def test_params_model(self, mini):
        report = evaluate(init_params(TINY), mini, 4)
        assert len(report.records) == 3 and math.isfinite(report.mean_psnr)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(bicubic_model(2), [], 2)


class TestConfig:
    def test_parse(self, tmp_path):
        text = """
        # toy run
        scale = 2
        channels = 8
        blocks = 2
        arrangement = 1-17-1-17
        seed = 3
        train_dir = imgs
        augment = false
        stages = 1
        epochs = 5
        patch = 16
        batch_size = 1
        stage1.lr = 2e-3
        stage1.schedule = cosine:10
        """
        tc = parse_config(text, tmp_path)
        assert tc.model == SvanConfig(scale=2, base_channels=8, inner_channels=16, num_blocks=2,
                                      arrangement="1-17-1-17", seed=3)
        assert tc.train_dir == (tmp_path / "imgs").resolve()
        assert tc.augment is False
        (s,) = tc.stages
        assert (s.epochs, s.lr, s.schedule, s.period, s.patch_sizes, s.batch_size) == (5, 2e-3, "cosine", 10, (16,), 1)

    def test_stage_key_beats_global(self):
        tc = parse_config("stage1.epochs = 7\nepochs = 2\n")
        assert [s.epochs for s in tc.stages] == [7, 2, 2]

    @pytest.mark.parametrize("text,line", [
        ("scale = 2\nbogus = 1\n", 2),
        ("scale = 2\n\nscale = 3\n", 3),
        ("seed = 1\nchannels\n", 2),
        ("# c\nstage4.lr = 1\n", 2),
        ("stage1.schedule = halve\n", 1),
        ("stage2.lr = -1\n", 1),
        ("blocks = two\n", 1),
    ])
    def test_errors_name_line(self, text, line):
        with pytest.raises(ConfigError, match=f"line {line}:"):
            parse_config(text)

    def test_invalid_model(self):
        with pytest.raises(ConfigError):
            parse_config("scale = 5\n")
