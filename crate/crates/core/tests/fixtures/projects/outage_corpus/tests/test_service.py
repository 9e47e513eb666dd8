"""Every test fails while FIXTURE_OUTAGE=1 is set."""
import os

import pytest


@pytest.fixture
def service():
    if os.environ.get("FIXTURE_OUTAGE") == "1":
        raise AssertionError("service unavailable")
    return {"status": "up"}


def test_status(service):
    assert service["status"] == "up"


def test_lookup():
    assert os.environ.get("FIXTURE_OUTAGE") != "1"


def test_round_trip():
    assert os.environ.get("FIXTURE_OUTAGE") != "1"
