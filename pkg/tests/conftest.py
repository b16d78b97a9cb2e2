import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from icas.pipeline import BackboneConfig, Conditions, IcasModel  # noqa: E402
from icas.content_cycling import ContentEmbeddingList  # noqa: E402

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {name}: {'PASS' if ok else 'FAIL'}  {detail}")


SMALL = BackboneConfig(height=2, width_cells=2, width=4, blocks=2, style_tokens=2, steps=4)


def random_conditions(cfg: BackboneConfig, rng: np.random.Generator, k: int = 2) -> Conditions:
    content = ContentEmbeddingList.of([rng.normal(size=cfg.width) for _ in range(k)])
    structure = rng.uniform(0, 1, (cfg.height, cfg.width_cells, cfg.structure_channels))
    return Conditions(content, rng.normal(size=cfg.width), structure)


def randomize(model: IcasModel, rng: np.random.Generator, std: float = 0.3) -> IcasModel:
    """Give every weight, zero-initialized ones included, a nonzero value."""
    for t in model.params.values():
        t.data = rng.normal(0.0, std, t.shape)
    return model


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
