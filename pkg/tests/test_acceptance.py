"""Primary acceptance criteria, one test each, at the stated tolerances and budgets."""
import pytest

import conftest
from mfg_decode import acceptance as acc
from mfg_decode.config import reference_config


@pytest.fixture(scope="module")
def reference():
    return acc.ReferenceRun(reference_config(), jobs=4)


def _report(res):
    line = res.line()
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert res.passed, line
    assert res.in_budget, line


def test_criterion_01_persistence():
    _report(acc.check_persistence())


def test_criterion_02_frechet_orders():
    _report(acc.check_frechet())


def test_criterion_03_drift_identity():
    _report(acc.check_drift_identity())


def test_criterion_04_cgo_decay():
    _report(acc.check_cgo_decay())


def test_criterion_05_fourier_pairing():
    _report(acc.check_fourier_pairing())


def test_criterion_06_end_to_end(reference):
    _report(acc.check_end_to_end(reference))


def test_criterion_07_uniqueness_gate(reference):
    _report(acc.check_uniqueness(reference))


def test_criterion_08_exactness():
    _report(acc.check_exactness())


def test_criterion_09_manufactured_orders():
    _report(acc.check_mms())


def test_criterion_10_noise(reference):
    _report(acc.check_noise(reference, level=0.01, seed=0))
