import numpy as np
import pytest

from melisa.backbone import DenoiserNet, NetConfig


def small_config(**kw) -> NetConfig:
    base = dict(depth=2, width=8, window=2, channels=1, height=16, width_s=16,
                embed_dim=16, groups=4)
    base.update(kw)
    return NetConfig(**base)


def randomize_output(net: DenoiserNet, rng: np.random.Generator, scale: float = 0.1) -> None:
    """The output conv starts at zero; give it weights so every branch is live."""
    for name in ("out.w", "out.b"):
        p = net.params[name]
        p.data[...] = scale * rng.standard_normal(p.shape)


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param_directional_fd(net, loss_fn, direction, h=1e-5):
    """Richardson-extrapolated central difference of loss_fn() along a parameter direction."""
    base = {k: p.data.copy() for k, p in net.params.items()}

    def at(s):
        for k, p in net.params.items():
            p.data[...] = base[k] + s * direction[k]
        return float(loss_fn().data)

    try:
        d1 = (at(h) - at(-h)) / (2 * h)
        d2 = (at(h / 2) - at(-h / 2)) / h
    finally:
        for k, p in net.params.items():
            p.data[...] = base[k]
    return (4 * d2 - d1) / 3


def random_direction(net, rng):
    return {k: rng.standard_normal(p.shape) for k, p in net.params.items()}


def dot_grads(net, grads, direction):
    return float(sum(np.sum(g * direction[k]) for k, g in zip(net.params, grads)))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
