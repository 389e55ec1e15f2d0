import numpy as np
import pytest

from trajviews.city import generate_pois, generate_road_network, simulate_trajectories
from trajviews.views import GridSpec, derive_views


@pytest.fixture(scope="session")
def small_city():
    net = generate_road_network(seed=3, rows=12, cols=12, drop_rate=0.1)
    pois = generate_pois(net, seed=4, zone_count=6, pois_per_zone=120)
    spec = GridSpec.covering(net, cell_size=250.0)
    return net, pois, spec


@pytest.fixture(scope="session")
def clean_trajs(small_city):
    net, _, _ = small_city
    return simulate_trajectories(net, seed=5, n=60, sample_period=5.0, noise_sigma=0.0, min_trip_m=1200)


@pytest.fixture(scope="session")
def noisy_trajs(small_city):
    net, _, _ = small_city
    return simulate_trajectories(net, seed=6, n=60, sample_period=5.0, noise_sigma=12.0, min_trip_m=1200)


@pytest.fixture(scope="session")
def small_samples(small_city, noisy_trajs):
    net, pois, spec = small_city
    return derive_views(noisy_trajs, net, pois, spec)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


@pytest.fixture(scope="session")
def tiny_data(small_city):
    from trajviews.pipeline import assemble

    net, pois, spec = small_city
    trajs = simulate_trajectories(net, seed=8, n=120, sample_period=5.0, noise_sigma=8.0, min_trip_m=1500)
    return assemble(net, spec, derive_views(trajs, net, pois, spec), seed=0)


@pytest.fixture(scope="session")
def tiny_config():
    from trajviews.pipeline import TrainConfig

    return TrainConfig(epochs=2, batch_size=16, d=16, heads=2, depth=1, fusion_depth=1, seed=0)


@pytest.fixture(scope="session")
def tiny_run(tiny_config, tiny_data):
    from trajviews.pipeline import pretrain

    return pretrain(tiny_config, tiny_data)


# ------------------------------------------------------------------ acceptance reporting

_CRITERIA = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, lines: dict, number: int, title: str):
        self.lines, self.number, self.title = lines, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        status = "PASS" if kind is None else "FAIL"
        line = f"criterion {self.number:>2} {status}  {self.title}"
        if self.detail:
            line += f"  [{self.detail}]"
        self.lines[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records one pass/fail line for the summary."""
    lines = request.config.stash.setdefault(_CRITERIA, {})
    return lambda number, title: _Criterion(lines, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
