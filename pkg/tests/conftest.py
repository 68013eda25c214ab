"""Shared fixtures: small learnable datasets and their splits."""

import numpy as np
import pytest

from tdro.data import Dataset, chronological_split
from tdro.grouping import build_group_period_index


def pytest_configure(config):
    # collected "CRITERION n: PASS/FAIL ..." lines from the acceptance tests
    config._criterion_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def make_toy_dataset(num_users=24, num_items=36, n=1200, d_feat=6, seed=0,
                     noise=0.05):
    """Learnable implicit feedback: users prefer items sharing their block.

    Items belong to ``d_feat`` blocks with nearly one-hot features; each
    user favours one block and interacts mostly inside it, so both the CF
    and the feature tower can learn the structure.
    """
    rng = np.random.default_rng(seed)
    block_of_item = np.arange(num_items) % d_feat
    features = np.eye(d_feat)[block_of_item] + rng.normal(
        0, noise, size=(num_items, d_feat))
    block_of_user = np.arange(num_users) % d_feat
    users = rng.integers(num_users, size=n)
    in_block = rng.random(n) < 0.8
    items = np.empty(n, dtype=np.int64)
    for i, u in enumerate(users):
        if in_block[i]:
            members = np.flatnonzero(block_of_item == block_of_user[u])
            items[i] = members[rng.integers(len(members))]
        else:
            items[i] = rng.integers(num_items)
    return Dataset(users=users, items=items,
                   timestamps=np.arange(n, dtype=np.int64),
                   features=features, num_users=num_users,
                   num_items=num_items)


@pytest.fixture(scope="session")
def toy_split():
    return chronological_split(make_toy_dataset())


@pytest.fixture(scope="session")
def toy_index(toy_split):
    return build_group_period_index(toy_split, 3, 3, 0.2, seed=0)
