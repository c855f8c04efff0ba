import numpy as np
import pytest

from alqueue import harness as hz
from alqueue.core import Candidate, Origin, ScoredRecord, bits_to_mask


@pytest.fixture(scope="session")
def bundle():
    return hz.make_world(0)


@pytest.fixture(scope="session")
def world_dir(tmp_path_factory, bundle):
    d = tmp_path_factory.mktemp("world0")
    hz.make_world(0, d)
    return d


def make_record(id, s_is=None, s_sa=0.1, s_t=0.2, latent=None, bits=None):
    """Stand-alone record with a distinct embedding per id."""
    latent = np.full(8, float(id)) if latent is None else np.asarray(latent, dtype=float)
    emb = np.full(38, float(id)) * 1e-3
    bits = frozenset({id % 64}) if bits is None else frozenset(bits)
    c = Candidate(id, latent, emb, bits, Origin.GENERATED, 0)
    return ScoredRecord(c, s_sa, s_t, s_is)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
