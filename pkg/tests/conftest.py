import io

import numpy as np
import pytest

from services.corpus_service import CorpusService
from services.world_service import WorldService
from utils import events


@pytest.fixture(autouse=True)
def quiet_events():
    """Send progress events to a buffer instead of stdout"""
    buffer = io.StringIO()
    events.set_stream(buffer)
    yield buffer
    events.set_stream(None)


@pytest.fixture(scope="session")
def world():
    """Two families of two languages, six symbols each"""
    return WorldService.define_world(
        seed=0, num_families=2, langs_per_family=2, symbols_per_lang=6, num_speakers=2,
    )


@pytest.fixture
def rng():
    """Seeded generator for reproducible draws"""
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def corpus_dir(world, tmp_path_factory):
    """Small generated corpus with every split populated"""
    out = tmp_path_factory.mktemp("corpus")
    CorpusService(world).gen_corpus(
        out, pairs_per_direction=10, seed=0, length_range=(2, 4),
        valid_fraction=0.2, test_fraction=0.2, ood_pairs_per_direction=2,
    )
    return out
