import sys

import numpy as np
import pytest

from drmpc.decision import THETA_TRUE
from drmpc.dynamics import KMH, AgentState
from drmpc.learn import LearnedModel
from drmpc.ocp import PlannerMode, assemble, plan
from drmpc.tree import build_tree

EGO0 = AgentState(-15.0, 20 * KMH)
HUMAN0 = AgentState(-15.0, 20 * KMH)


@pytest.fixture(scope="session")
def tree6():
    return build_tree(6, 2)


@pytest.fixture(scope="session")
def dr_problem(tree6):
    return assemble(PlannerMode.distributionally_robust(LearnedModel(np.array([2.9, 2.95]), 10**6)),
                    EGO0, HUMAN0, tree6)


@pytest.fixture(scope="session")
def solved(tree6):
    """Converged plans at the reference initial condition, solved once per session."""
    modes = {
        "robust": PlannerMode.robust(),
        "gt": PlannerMode.ground_truth(THETA_TRUE),
        "dr6": PlannerMode.distributionally_robust(LearnedModel(THETA_TRUE, 10**6)),
        "dr9": PlannerMode.distributionally_robust(LearnedModel(THETA_TRUE, 10**9)),
    }
    return {k: plan(assemble(m, EGO0, HUMAN0, tree6)) for k, m in modes.items()}


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
