import contextlib
import time

import numpy as np
import pytest

from gazemap.registry import propagate_aois, registry_from_arrays, seed_aoi
from gazemap.synth import default_script, generate_scene, generate_session

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}
    config.addinivalue_line("markers", "property: hypothesis / invariant suites (acceptance criterion 6)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok, elapsed, detail = results[n]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {n}: {name} ({elapsed:.2f} s){' - ' + detail if detail else ''}")


@pytest.fixture
def criterion(request):
    """``with criterion(n, name, limit_s) as info:`` records a pass/fail line for the summary."""
    results = request.config.stash[ACCEPTANCE_KEY]

    @contextlib.contextmanager
    def _record(n, name, limit_s):
        info = {"detail": ""}
        t0 = time.perf_counter()
        try:
            yield info
        except BaseException as exc:
            results[n] = (name, False, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        elapsed = time.perf_counter() - t0
        ok = elapsed < limit_s
        results[n] = (name, ok, elapsed, info["detail"] if ok else f"exceeded {limit_s} s limit")
        assert ok, f"criterion {n} took {elapsed:.1f} s (limit {limit_s} s)"

    return _record


@pytest.fixture(scope="session")
def scene():
    return generate_scene()


@pytest.fixture(scope="session")
def synthetic_session(scene):
    return generate_session(scene, default_script(scene.spec))


@pytest.fixture(scope="session")
def base_registry(scene):
    named = [("base", scene.base)] + [(v.id, v.image) for v in scene.views]
    return registry_from_arrays(named, poses={v.id: v.pose for v in scene.views})


@pytest.fixture(scope="session")
def seeded_registry(base_registry, scene):
    reg = base_registry
    for aoi_id, (label, box) in scene.aois.items():
        reg = seed_aoi(reg, aoi_id, label, "base", box)
    return reg


@pytest.fixture(scope="session")
def propagated(seeded_registry):
    return propagate_aois(seeded_registry)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_homography(rng, scale=0.15, proj=1e-3):
    h = np.eye(3) + rng.normal(0, scale, (3, 3))
    h[2, :2] = rng.normal(0, proj, 2)
    h[:2, 2] = rng.normal(0, 20, 2)
    h[2, 2] = 1.0
    return h
