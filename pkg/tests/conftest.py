import pytest
from helpers import california_schools, company

from reflectsql.proxy import build_proxy


@pytest.fixture
def company_db(tmp_path):
    return company(tmp_path / "company.sqlite")


@pytest.fixture
def empty_company_db(tmp_path):
    return company(tmp_path / "empty.sqlite", empty=True)


@pytest.fixture
def company_proxy(company_db):
    return build_proxy(company_db)


@pytest.fixture
def schools_db(tmp_path):
    return california_schools(tmp_path / "california_schools.sqlite")


@pytest.fixture
def schools_proxy(schools_db):
    return build_proxy(schools_db)
