"""Seeded test order shuffling: ``-p flakemine_shuffle --flakemine-seed=N``."""
import random

import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--flakemine-seed",
        type=int,
        default=None,
        help="shuffle all collected tests with this seed",
    )


@pytest.hookimpl(trylast=True)
def pytest_collection_modifyitems(session, config, items):
    seed = config.getoption("flakemine_seed")
    if seed is None:
        return
    random.Random(seed).shuffle(items)
