"""Shared material fixtures."""

from __future__ import annotations

from typing import List

import pytest

from models import MaterialRange, MaterialTriplet
from services import mtd_service
from services.matvae_service import MatVaeModel


@pytest.fixture
def steel() -> MaterialTriplet:
    return MaterialTriplet(2e11, 0.31, 7700.0)


@pytest.fixture
def small_db():
    return mtd_service.build_db(
        [
            MaterialRange("Rubber", 1e6, 1e8, 0.45, 0.49, 900.0, 1300.0),
            MaterialRange("Wood", 5e9, 2e10, 0.25, 0.40, 400.0, 900.0),
            MaterialRange("Steel", 2e11, 2e11, 0.31, 0.31, 7700.0, 7700.0),
            MaterialRange("Glass", 5e10, 9e10, 0.18, 0.25, 2200.0, 2800.0),
        ]
    )


@pytest.fixture
def training_triplets(small_db) -> List[MaterialTriplet]:
    return mtd_service.sample_triplets(small_db, 400, seed=7)


@pytest.fixture
def small_model(training_triplets) -> MatVaeModel:
    """Untrained network with small layers; enough for gradient and plumbing checks."""
    normalizer = mtd_service.fit_normalizer(training_triplets)
    return MatVaeModel(normalizer, hidden=8, dropout=0.0, seed=3)
