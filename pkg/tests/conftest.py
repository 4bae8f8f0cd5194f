import numpy as np
import pytest

from hdteacher.kernels import load_backend


def naive_conv(x, w, stride=1, padding=0):
    """Direct loop cross-correlation over any number of spatial axes."""
    spatial = x.ndim - 2
    pad = [(0, 0), (0, 0)] + [(padding, padding)] * spatial
    xp = np.pad(x, pad)
    ksz = w.shape[2:]
    out_sp = tuple((n - k) // stride + 1 for n, k in zip(xp.shape[2:], ksz))
    out = np.zeros((x.shape[0], w.shape[0]) + out_sp)
    for b in range(x.shape[0]):
        for o in range(w.shape[0]):
            for pos in np.ndindex(*out_sp):
                acc = 0.0
                for c in range(w.shape[1]):
                    for kpos in np.ndindex(*ksz):
                        src = tuple(p * stride + k for p, k in zip(pos, kpos))
                        acc += xp[(b, c) + src] * w[(o, c) + kpos]
                out[(b, o) + pos] = acc
    return out


def _available_backends():
    names = ["python"]
    try:
        load_backend("compiled")
        names.append("compiled")
    except ImportError:
        pass
    return names


@pytest.fixture(params=_available_backends())
def backend(request, monkeypatch):
    """Run the test once per kernel backend."""
    import hdteacher.kernels as k
    impl = load_backend(request.param)
    for name in ("conv_forward", "conv_backward_input", "conv_backward_weight", "edt_lines"):
        monkeypatch.setattr(k, name, getattr(impl, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(seed=0):
    """A seconds-scale run: 8x16x16 volumes, depth-1 base-4 nets, 2x2 steps per stage."""
    from hdteacher.config import RunConfig, SplitSizes
    from hdteacher.data import SyntheticSpec
    from hdteacher.networks import UNetConfig
    from hdteacher.trainer import StageConfig

    common = dict(epochs=2, steps_per_epoch=2, lr_decay_every=1, k=2, batch_2d=4, batch_3d=2,
                  patch_2d=(16, 16), patch_3d=(4, 16, 16))
    return RunConfig(
        seed=seed, preset="tiny",
        data=SyntheticSpec(dims=(8, 16, 16), seed=seed),
        split=SplitSizes(2, 8, 1, 2),
        net2d=UNetConfig(2, 1, 2, base_features=4, depth=1),
        net3d=UNetConfig(3, 3, 2, base_features=4, depth=1),
        stages={s: StageConfig(s, lr=0.1 if s != "hybrid" else 0.01, **common) for s in ("2d", "3d", "hybrid")},
        baseline=StageConfig("3d", lr=0.1, **common),
        inference_k=2,
    )


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_split(tiny):
    from hdteacher.data import build_split
    s = tiny.split
    return build_split(tiny.data, s.n_labeled, s.n_unlabeled, s.n_val, s.n_test)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, list[tuple[str, str]]] = {}


def pytest_runtest_logreport(report):
    marks = [m for m in getattr(report, "_criterion", [])]
    for n in marks:
        if report.when == "call" or report.outcome != "passed":
            _CRITERIA.setdefault(n, []).append((report.nodeid, report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    rep._criterion = [m.args[0] for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    from test_acceptance import CRITERIA, DETAILS
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        results = _CRITERIA.get(n)
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(o == "passed" for _, o in results) else "FAIL"
        detail = DETAILS.get(n, "").rstrip(";")
        terminalreporter.write_line(f"criterion {n}: {status} - {CRITERIA[n]}" + (f" |{detail}" if detail else ""))
