import os

import pytest

from config import get_settings
from services.case_service import CaseService
from services.opf_service import OpfService
from services.pf_service import PowerFlowService
from services.robust_service import RobustService
from services.study_service import StudyService
from services.validation_service import ValidationService

DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data")

TWO_BUS = """function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;

mpc.bus = [
1 3 0 0 0 0 1 1.00 0 110 1 1.1 0.9;
2 1 {load} 0 0 0 1 1.00 0 110 1 1.1 0.9;
];

mpc.gen = [
1 0 0 100 -100 1.00 100 1 200 0;
];

mpc.branch = [
1 2 {r} 0.1 0 0 0 0 0 0 1 -360 360;
];

mpc.gencost = [
2 0 0 2 0.1 2;
];
"""


def data_path(name: str) -> str:
    return os.path.join(DATA_DIR, name)


@pytest.fixture
def settings():
    return get_settings()


@pytest.fixture
def case_service(settings):
    return CaseService(settings)


@pytest.fixture
def opf_service(settings, case_service):
    return OpfService(settings, case_service=case_service)


@pytest.fixture
def robust_service(settings, opf_service):
    return RobustService(settings, opf_service=opf_service)


@pytest.fixture
def pf_service(settings, case_service):
    return PowerFlowService(settings, case_service=case_service)


@pytest.fixture
def validation_service(settings, pf_service):
    return ValidationService(settings, pf_service=pf_service)


@pytest.fixture
def study_service(settings, case_service, robust_service, validation_service):
    return StudyService(settings, case_service=case_service, robust_service=robust_service,
                        validation_service=validation_service)


@pytest.fixture
def case2(case_service):
    return case_service.load_case(data_path("case2.m"))


@pytest.fixture
def case3(case_service):
    return case_service.load_case(data_path("case3.m"))


@pytest.fixture
def case14(case_service):
    return case_service.load_case(data_path("case14.m"))


@pytest.fixture
def two_bus_text():
    """MATPOWER text of a two-bus feeder; format with load (MW) and r (pu)"""
    return TWO_BUS


@pytest.fixture
def write_case(tmp_path):
    def write(text: str, name: str = "case.m") -> str:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)
    return write
