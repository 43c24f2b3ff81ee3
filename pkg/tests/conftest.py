import math

import pytest

from transient_ruin.model import LossDistribution, PortfolioModel

LAM, R, MU = 0.9, 1.0, 1.0


def p1_closed(u, t, lam=LAM, r=R, mu=MU):
    k = lam + mu * r
    return lam * math.exp(-mu * u) / k * (1.0 - math.exp(-k * t))


@pytest.fixture(scope="session")
def exp_loss():
    return LossDistribution.exponential(MU)


@pytest.fixture(scope="session")
def base_model(exp_loss):
    """lambda_i = 0.9 i, r_i = i, exponential(1) losses, ten obligors."""
    return PortfolioModel.proportional(10, LAM, R, exp_loss)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT

    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(REPORT):
        ok, detail = REPORT[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
