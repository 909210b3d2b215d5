import numpy as np
import pytest

from taxograph.taxonomy import builtin_path, human_body_taxonomy, load_embeddings


@pytest.fixture(scope="session")
def body():
    return human_body_taxonomy()


@pytest.fixture(scope="session")
def embeddings():
    return load_embeddings(builtin_path("toy_embeddings.txt"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
