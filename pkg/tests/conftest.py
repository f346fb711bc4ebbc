from pathlib import Path

import numpy as np
import pytest

from svan.tensor import Tape, backward

DATA = Path(__file__).parent / "data"
FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, weight, bias, dilation, groups, padding):
    """Direct definition: loops over batch, output channel, row, column."""
    n, c, h, w = x.shape
    cout, cin_g, k, _ = weight.shape
    k_eff = (k - 1) * dilation + 1
    pad = (k_eff - 1) // 2 if padding == "same" else 0
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    oh, ow = xp.shape[2] - k_eff + 1, xp.shape[3] - k_eff + 1
    cout_g = cout // groups
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            g = o // cout_g
            chans = xp[b, g * cin_g : (g + 1) * cin_g]
            for y in range(oh):
                for xx in range(ow):
                    patch = chans[:, y : y + k_eff : dilation, xx : xx + k_eff : dilation]
                    out[b, o, y, xx] = np.sum(patch * weight[o]) + (0.0 if bias is None else bias[o])
    return out


def rel_error(a, b, floor=1e-3):
    """Relative error; magnitudes below ``floor`` are compared absolutely."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(build, inputs, rng, samples=4, step=1e-5):
    """Compare tape gradients of ``build(tensors) -> scalar`` with central differences.

    ``inputs`` maps names to arrays.  Returns the worst relative error seen.
    """
    tape = Tape()
    grads = backward(tape, build(tape.watch(inputs)))

    def loss_at(name, idx, delta):
        arrs = {k: v.copy() for k, v in inputs.items()}
        arrs[name][idx] += delta
        return build(Tape().watch(arrs)).item()

    worst = 0.0
    for name, arr in inputs.items():
        flat = rng.choice(arr.size, size=min(samples, arr.size), replace=False)
        for f in flat:
            idx = np.unravel_index(f, arr.shape)
            numeric = (loss_at(name, idx, step) - loss_at(name, idx, -step)) / (2 * step)
            worst = max(worst, float(rel_error(grads[name][idx], numeric)))
    return worst


# one (criterion, description, passed, detail) entry per acceptance check
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, desc, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {desc}: {detail}")
