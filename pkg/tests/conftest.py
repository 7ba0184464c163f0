from pathlib import Path

import numpy as np
import pytest

from zsfc.catalog import Catalog, CategoryHierarchy, NegativePairList, load_catalog

DATA = Path(__file__).parent / "data"
SAMPLER_DIR = DATA / "sampler"


@pytest.fixture
def fixture_catalog():
    d = SAMPLER_DIR
    return load_catalog(d / "catalog.tsv", d / "hierarchy.tsv", d / "negative_pairs.tsv")


def toy_catalog(n_items=64, n_categories=8, seed=0, features_dim=None, negatives=()):
    """Flat hierarchy of ``n_categories`` leaves under one root."""
    rng = np.random.default_rng(seed)
    keys = tuple(f"c{i}" for i in range(n_categories)) + ("root",)
    parent = np.array([n_categories] * n_categories + [-1], dtype=np.int64)
    h = CategoryHierarchy(keys, parent)
    cats = rng.integers(0, n_categories, size=n_items)
    feats = None
    if features_dim:
        feats = rng.normal(scale=0.1, size=(n_items, features_dim)).astype(np.float32)
    return Catalog(tuple(f"i{i}" for i in range(n_items)), cats, h, NegativePairList.from_pairs(negatives), feats)


@pytest.fixture
def small_catalog():
    return toy_catalog()


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
