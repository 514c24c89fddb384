import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_slide_dir(tmp_path, base, factors=(1,), base_magnification=20, name="s"):
    from wsiqc.pyramid import write_tile_tree

    return write_tile_tree(tmp_path / name, base, factors, base_magnification)


E2E_MAGS = {"q1": 10, "q3": 10, "q4": 10}


@pytest.fixture(scope="session")
def e2e_models():
    """Defaults with a grid calibration measured at the 10x artifact level."""
    from wsiqc.defaults import build_grid
    from wsiqc.pipeline import PipelineConfig, load_models

    models = load_models(PipelineConfig(magnifications=dict(E2E_MAGS)))
    models.grid = build_grid(downsample=2)
    return models


@pytest.fixture(scope="session")
def synth_slide(tmp_path_factory):
    from wsiqc.synth import random_scene, write_synthetic

    return write_synthetic(random_scene(7), tmp_path_factory.mktemp("synth7"))


ACCEPTANCE_RESULTS: list = []


class _Criterion:
    def __init__(self, number: int, title: str, budget_s: float | None):
        self.number, self.title, self.budget_s = number, title, budget_s
        self.detail = ""

    def __enter__(self):
        import time

        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time

        elapsed = time.perf_counter() - self._t0
        ok = exc_type is None
        if ok and self.budget_s is not None and elapsed > self.budget_s:
            ok = False
            self.detail += f" over time budget {self.budget_s:g}s"
        status = "PASS" if ok else "FAIL"
        why = "" if exc is None else f" ({type(exc).__name__}: {str(exc).splitlines()[0][:120] if str(exc) else ''})"
        line = f"criterion {self.number}: {status} {self.title} [{elapsed:.1f}s] {self.detail.strip()}{why}"
        ACCEPTANCE_RESULTS.append(line)
        print(line)
        if exc is None and not ok:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
