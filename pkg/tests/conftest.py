import pytest
import torch

from gift.backends import build_fr
from gift.generator import ToyGenerator
from gift.inversion import ToyPerceptual
from gift.segmentation import ToySegmenter

TOY_MODELS = {
    "toyA": {"kind": "toy", "seed": 1, "width": 16},
    "toyB": {"kind": "toy", "seed": 2, "width": 16},
    "toyC": {"kind": "toy", "seed": 3, "width": 24},
    "toyD": {"kind": "toy", "seed": 4, "width": 24},
}


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def generator():
    return ToyGenerator(seed=0)


@pytest.fixture(scope="session")
def generator64(generator):
    return generator.as_dtype(torch.float64)


@pytest.fixture(scope="session")
def segmenter():
    return ToySegmenter()


@pytest.fixture(scope="session")
def perceptual():
    return ToyPerceptual()


@pytest.fixture(scope="session")
def fr_cache(request):
    return request.config.cache.mkdir("gift-toy-fr")


@pytest.fixture(scope="session")
def toy_models(generator, fr_cache):
    """The four trained toy embedders with their FAR 0.01 thresholds, trained once and cached."""
    out = {}
    for mid, block in TOY_MODELS.items():
        out[mid] = build_fr(mid, block, generator, fr_cache, far=0.01)
    return out


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number].splitlines()[0])
