import pytest

from phlab.models import default_instance
from phlab.nji import break_joint_integrability, plan_schedule


@pytest.fixture(scope="session")
def default_plan():
    return plan_schedule(default_instance())


@pytest.fixture(scope="session")
def default_construction(default_plan):
    return break_joint_integrability(default_instance(), plan=default_plan, verify_slices=False)
