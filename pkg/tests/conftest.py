import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from clasp.encoders import OracleEncoder
from clasp.pseudo_labels import AttributeSchema, PartVocabulary
from clasp.synthetic import default_oracle_spec

settings.register_profile("clasp", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("clasp")


@pytest.fixture(scope="session")
def vocab():
    return PartVocabulary.default()


@pytest.fixture(scope="session")
def schema():
    return AttributeSchema.default()


@pytest.fixture(scope="session")
def oracle(vocab, schema):
    return default_oracle_spec(0, vocab, schema)


@pytest.fixture(scope="session")
def encoder(oracle):
    return OracleEncoder(oracle)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# acceptance criteria report: number -> (name, passed, detail)
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion(capsys):
    def record(num: int, name: str, passed: bool, detail: str):
        ACCEPTANCE[num] = (name, bool(passed), detail)
        with capsys.disabled():
            print(f"\n[criterion {num:2d}] {'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"{num:2d}. {'PASS' if ok else 'FAIL'}  {name}: {detail}")
