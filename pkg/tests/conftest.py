import time

import numpy as np
import pytest

from pvagg.cli import make_controller, make_lut
from pvagg.config import load_config
from pvagg.sim import run_frequency_event, run_validation


@pytest.fixture(scope="session")
def cfg():
    return load_config()


@pytest.fixture(scope="session")
def lut(cfg):
    return make_lut(cfg)


@pytest.fixture(scope="session")
def panel(cfg):
    from pvagg.panel import calibrate_panel
    return calibrate_panel(**cfg.panel.calibration_kwargs())


@pytest.fixture(scope="session")
def shared(cfg):
    return cfg.shared


@pytest.fixture(scope="session")
def controller(cfg, lut):
    return make_controller(cfg, lut)


@pytest.fixture(scope="session")
def validation_runs(cfg, lut):
    """Both validation cases; ``runtime_s`` holds the wall time of each."""
    vc = cfg.validation_commands
    zero = np.zeros(len(cfg.validation_fleet))
    cases = {
        "dV_PV": (np.array(vc.dV_PV, float), zero),
        "dV_dc_ref": (zero, np.array(vc.dV_dc_ref, float)),
    }
    out, runtime = {}, {}
    for name, (dv, dr) in cases.items():
        t0 = time.perf_counter()
        out[name] = run_validation(cfg.validation_fleet, cfg.shared, lut, dv, dr, vc.t_step, vc.t_end,
                                   cfg.run.dt_benchmark, cfg.run.dt)
        runtime[name] = time.perf_counter() - t0
    out["runtime_s"] = runtime
    return out


@pytest.fixture(scope="session")
def event_trace(cfg, lut, controller):
    ev = cfg.event
    return run_frequency_event(cfg.grid, cfg.event_fleet, cfg.shared, lut, controller,
                               ev.d_pu, ev.t_event, ev.t_end, dt=cfg.run.dt, stride=ev.stride)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
