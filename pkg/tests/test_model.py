import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _golden import GOLDEN_CONFIG, golden_params
from conftest import FIXTURES, rel_error
from svan.model import (
    ARRANGEMENTS,
    CheckpointError,
    SvanConfig,
    init_params,
    load_params,
    param_shapes,
    save_params,
    slkab_forward,
    svan_forward,
)
from svan.tensor import ShapeError, Tape, Tensor, backward, l1_loss, load_tensor


def _zero_params(cfg):
    p = init_params(cfg)
    return p.with_tensors({k: (np.ones_like(v) if k.endswith(".gain") else np.zeros_like(v))
                           for k, v in p.tensors.items()})


class TestConfig:
    def test_defaults(self):
        cfg = SvanConfig()
        assert (cfg.scale, cfg.base_channels, cfg.inner_channels, cfg.num_blocks) == (4, 32, 64, 7)
        assert cfg.arrangement == "17-1-1-17"

    @pytest.mark.parametrize("kw", [
        {"scale": 5}, {"inner_channels": 48}, {"num_blocks": 0}, {"arrangement": "17-17-1-1"}, {"seed": -1},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SvanConfig(**kw)


class TestInit:
    def test_deterministic(self):
        a, b = init_params(SvanConfig(seed=3)), init_params(SvanConfig(seed=3))
        assert a.equals(b)
        for k in a.tensors:
            assert a[k].tobytes() == b[k].tobytes()

    def test_seed_changes_weights(self):
        a, b = init_params(SvanConfig(seed=3)), init_params(SvanConfig(seed=4))
        assert any(not np.array_equal(a[k], b[k]) for k in a.tensors if k.endswith(".weight"))

    def test_bounds_and_constants(self):
        p = init_params(SvanConfig(seed=11))
        w = p["shallow.weight"]
        assert w.shape == (32, 3, 3, 3)
        assert np.all(np.abs(w) <= np.sqrt(1 / 27))
        # depth-wise fan-in is one channel times the taps
        assert np.all(np.abs(p["blocks.0.upper.dwd.weight"]) <= np.sqrt(1 / 25))
        assert np.abs(p["blocks.0.upper.dwd.weight"]).max() > np.sqrt(1 / 64)
        for k, v in p.tensors.items():
            if k.endswith(".bias") or k.endswith(".shift"):
                assert not v.any()
            elif k.endswith(".gain"):
                assert np.all(v == 1.0)

    def test_layer_shapes(self):
        shapes = param_shapes(SvanConfig())
        assert shapes["blocks.0.expand.weight"] == (64, 32, 1, 1)
        assert shapes["blocks.0.upper.dw.weight"] == (64, 1, 5, 5)
        assert shapes["blocks.6.lower.dwd.weight"] == (64, 1, 5, 5)
        assert shapes["blocks.6.reduce.weight"] == (32, 64, 1, 1)
        assert shapes["refine.weight"] == (32, 1, 3, 3)
        assert shapes["recon.weight"] == (48, 32, 3, 3)
        assert param_shapes(SvanConfig(scale=2))["recon.weight"] == (12, 32, 3, 3)

    def test_arrangements_share_param_count(self):
        counts = {init_params(SvanConfig(arrangement=a)).num_params() for a in ARRANGEMENTS}
        assert len(counts) == 1


class TestSlkab:
    def test_shape(self, rng):
        cfg = SvanConfig()
        p = init_params(cfg).bind()
        assert slkab_forward(rng.standard_normal((2, 32, 17, 23)), p, cfg).shape == (2, 32, 17, 23)

    def test_wrong_channels(self, rng):
        cfg = SvanConfig()
        with pytest.raises(ShapeError):
            slkab_forward(rng.standard_normal((1, 16, 8, 8)), init_params(cfg).bind(), cfg)

    def test_zero_weights_give_pixel_norm(self, rng):
        cfg = SvanConfig()
        x = rng.standard_normal((1, 32, 6, 7))
        for arrangement in ARRANGEMENTS:
            out = slkab_forward(x, _zero_params(cfg).bind(), cfg, arrangement=arrangement).data
            mu = x.mean(axis=1, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
            assert np.max(np.abs(out - (x - mu) / np.sqrt(var + 1e-6))) < 1e-12

    def test_golden(self):
        x = load_tensor(FIXTURES / "slkab_input.bin")
        want = load_tensor(FIXTURES / "slkab_output.bin")
        got = slkab_forward(x, golden_params().bind(), GOLDEN_CONFIG, 0).data
        assert np.max(np.abs(got - want)) <= 1e-10

    def test_arrangements_differ(self, rng):
        cfg = SvanConfig()
        p = golden_params().bind()
        x = rng.standard_normal((1, 32, 9, 9))
        outs = [slkab_forward(x, p, cfg, arrangement=a).data for a in ARRANGEMENTS]
        for i in range(len(outs)):
            for j in range(i + 1, len(outs)):
                assert not np.allclose(outs[i], outs[j])


class TestSvan:
    @pytest.mark.parametrize("scale,shape,want", [
        (4, (1, 3, 16, 16), (1, 3, 64, 64)),
        (2, (1, 3, 10, 13), (1, 3, 20, 26)),
    ])
    def test_shapes(self, rng, scale, shape, want):
        params = init_params(SvanConfig.small(8, 1, scale=scale))
        assert svan_forward(rng.random(shape), params).shape == want

    @settings(max_examples=12, deadline=None)
    @given(st.sampled_from([2, 3, 4]), st.integers(8, 14), st.integers(8, 14), st.integers(1, 2))
    def test_shape_property(self, scale, h, w, n):
        params = init_params(SvanConfig.small(4, 1, scale=scale))
        out = svan_forward(np.full((n, 3, h, w), 0.5), params)
        assert out.shape == (n, 3, scale * h, scale * w)

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            svan_forward(np.zeros((1, 4, 8, 8)), init_params(SvanConfig.small(4, 1)))

    def test_not_clamped(self, rng):
        params = golden_params()
        out = svan_forward(rng.random((1, 3, 8, 8)) * 4 - 2, params).data
        assert out.min() < 0 or out.max() > 1

    def test_golden(self):
        lr = load_tensor(FIXTURES / "svan_input.bin")
        want = load_tensor(FIXTURES / "svan_output.bin")
        got = svan_forward(lr, golden_params()).data
        assert got.shape == (1, 3, 32, 32)
        assert np.max(np.abs(got - want)) <= 1e-10

    def test_deterministic(self, rng):
        params = golden_params()
        lr = rng.random((1, 3, 8, 8))
        assert svan_forward(lr, params).data.tobytes() == svan_forward(lr, params).data.tobytes()

    def test_float32_runs(self, rng):
        params = golden_params()
        lr = rng.random((1, 3, 8, 8))
        out32 = svan_forward(lr.astype(np.float32), params.astype(np.float32)).data
        assert out32.dtype == np.float32
        assert np.max(np.abs(out32 - svan_forward(lr, params).data)) < 1e-3

    def test_every_parameter_is_live(self, rng):
        params = golden_params()
        lr = rng.random((1, 3, 8, 8))
        base = svan_forward(lr, params).data
        for name, arr in params.tensors.items():
            idx = tuple(int(rng.integers(0, d)) for d in arr.shape)
            bumped = dict(params.tensors)
            bumped[name] = arr.copy()
            bumped[name][idx] += 1e-3
            out = svan_forward(lr, params.with_tensors(bumped)).data
            assert not np.array_equal(out, base), name

    def test_gradients_every_parameter(self, rng):
        params = golden_params()
        lr = rng.random((1, 3, 8, 8))
        target = rng.random((1, 3, 32, 32))
        tape = Tape()
        grads = backward(tape, l1_loss(svan_forward(lr, params, tape), target))

        def loss(tensors):
            return l1_loss(svan_forward(lr, params.with_tensors(tensors)), target).item()

        step = 1e-5
        worst = 0.0
        for name, arr in params.tensors.items():
            for f in rng.choice(arr.size, size=min(2, arr.size), replace=False):
                idx = np.unravel_index(f, arr.shape)
                plus, minus = dict(params.tensors), dict(params.tensors)
                plus[name], minus[name] = arr.copy(), arr.copy()
                plus[name][idx] += step
                minus[name][idx] -= step
                numeric = (loss(plus) - loss(minus)) / (2 * step)
                worst = max(worst, float(rel_error(grads[name][idx], numeric)))
        assert worst <= 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = golden_params()
        path = tmp_path / "m.ckpt"
        save_params(params, path)
        back = load_params(path)
        assert back.config == params.config
        assert back.equals(params)
        assert list(back.tensors) == list(params.tensors)
        save_params(back, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_params(init_params(SvanConfig.small(4, 1)), path)
        raw = path.read_bytes()
        for cut in (4, 20, len(raw) // 2, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError, match="truncated"):
                load_params(path)

    def test_bad_magic_and_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_params(init_params(SvanConfig.small(4, 1)), path)
        raw = bytearray(path.read_bytes())
        path.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
        with pytest.raises(CheckpointError, match="magic"):
            load_params(path)
        raw[8] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_params(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_params(init_params(SvanConfig.small(4, 1)), path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_params(path)

    def test_missing_tensor(self):
        params = init_params(SvanConfig.small(4, 1))
        tensors = dict(params.tensors)
        del tensors["refine.bias"]
        with pytest.raises(CheckpointError, match="refine.bias"):
            params.with_tensors(tensors)

    def test_scale_mismatch_names_recon(self, tmp_path):
        path = tmp_path / "x2.ckpt"
        save_params(init_params(SvanConfig(scale=2)), path)
        with pytest.raises(CheckpointError, match="recon"):
            load_params(path, SvanConfig(scale=4))
        assert load_params(path, SvanConfig(scale=2)).config.scale == 2
