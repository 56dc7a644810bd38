import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def office():
    from apsim.cases import Case2Config, load_case_data, office_models
    from apsim.simrel import LtiInterface, LtiPair
    cfg = Case2Config()
    concrete, reduced = office_models(cfg)
    data = load_case_data("office")
    g = data["interface"]
    iface = LtiInterface(g["R"], g["Q"], g["K"], g["P"])
    abstract = reduced.with_(input_bound=cfg.c1)
    return {"cfg": cfg, "concrete": concrete, "abstract": abstract, "interface": iface,
            "M": np.asarray(data["M"], float), "data": data, "pair": LtiPair(concrete, abstract)}


@pytest.fixture(scope="session")
def case2_run():
    """Full case-2 pipeline at the default configuration (about 10 s)."""
    from apsim import cases
    cfg = cases.Case2Config()
    red = cases.stage_reduce(cfg)
    iface = cases.stage_interface(cfg, red)
    trade = cases.stage_tradeoff(cfg, iface)
    dp = cases.stage_grid_dp(cfg, iface, trade)
    sim = cases.stage_refine_simulate(cfg, iface, trade, dp)
    ver = cases.stage_verify(cfg, iface, trade, dp, sim)
    return {"cfg": cfg, "reduce": red, "interface": iface, "tradeoff": trade, "grid-dp": dp,
            "refine-simulate": sim, "verify": ver}


@pytest.fixture(scope="session")
def case1_run():
    from apsim.cases import Case1Config, run_case1
    return run_case1(Case1Config())


_ACCEPTANCE_LINES: list = []


@pytest.fixture
def report():
    """Record one acceptance line; all lines are repeated in the terminal summary."""
    def _report(criterion, ok: bool, detail: str, seconds: float):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail} [{seconds:.2f} s]"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
