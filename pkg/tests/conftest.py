import json
from pathlib import Path

import numpy as np
import pytest

from flowppf.gmm import Gmm
from flowppf.grid import bundled_case

DATA = Path(__file__).resolve().parents[1] / "src" / "flowppf" / "data"


def bundled_gmm(name: str) -> Gmm:
    with open(DATA / f"{name}.json") as fh:
        return Gmm.from_json(json.load(fh))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def case2():
    return bundled_case("case2")


@pytest.fixture(scope="session")
def radial():
    return bundled_case("case6_radial")


@pytest.fixture(scope="session")
def mesh():
    return bundled_case("case6_mesh")


@pytest.fixture(scope="session")
def wide_gmm():
    return bundled_gmm("injections_wide")


@pytest.fixture(scope="session")
def nominal_gmm():
    return bundled_gmm("injections_nominal")
