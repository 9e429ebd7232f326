import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

import numerics as nx  # noqa: E402
from cpa import CpaConfig, CpaParams, TextSummary, TokenGrid  # noqa: E402
from synthdata import GeneratorConfig  # noqa: E402

SMALL_D = 8
SMALL_GRID = 4
SMALL_CATEGORIES = 3


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture
def small_config() -> CpaConfig:
    return CpaConfig(d=SMALL_D, hidden=6, d_align=5, region_h=2, region_w=2)


@pytest.fixture
def small_grid(rng) -> TokenGrid:
    return TokenGrid.from_array(rng.normal(size=(SMALL_GRID * SMALL_GRID, SMALL_D)), SMALL_GRID, SMALL_GRID)


@pytest.fixture
def small_text(rng) -> TextSummary:
    return TextSummary(nx.constant(rng.normal(size=(3, SMALL_D))))


@pytest.fixture
def random_params(small_config, rng) -> CpaParams:
    return CpaParams.initialize(small_config, rng, neutral_routing=False)


@pytest.fixture
def neutral_params(small_config, rng) -> CpaParams:
    return CpaParams.initialize(small_config, rng, neutral_routing=True)


@pytest.fixture
def small_generator() -> GeneratorConfig:
    return GeneratorConfig(
        image_w=64,
        image_h=64,
        grid_h=SMALL_GRID,
        grid_w=SMALL_GRID,
        d=SMALL_D,
        categories=SMALL_CATEGORIES,
        ground_count=(2, 4),
        ground_side=(12.0, 20.0),
        ground_spread=10.0,
        aerial_count=(5, 9),
        aerial_side=(3.0, 6.0),
        max_location_categories=2,
    )
