"""Shared fixtures: small synthetic tiles sized for fast tests."""

from __future__ import annotations

from pathlib import Path

import pytest

from terralabel.synth import (
    DEFAULT_SPECTRA,
    SynthSpec,
    generate_tile,
    min_interclass_distance,
)

MIN_DIST = min_interclass_distance(DEFAULT_SPECTRA)
EQUAL_WEIGHTS = (0.125,) * 8


def small_spec(**overrides) -> SynthSpec:
    base = dict(
        width=96,
        height=96,
        n_sites=12,
        class_weights=EQUAL_WEIGHTS,
        noise_sigma=0.2 * MIN_DIST,
        cloud_fraction=0.1,
        gl30_corruption=0.2,
        n_scenes=2,
        master_seed=7,
    )
    base.update(overrides)
    return SynthSpec(**base)


@pytest.fixture(scope="session")
def shared_tile(tmp_path_factory) -> tuple[Path, SynthSpec, list]:
    """One 96x96 2-scene tile reused by read-only tests."""
    tile_dir = tmp_path_factory.mktemp("tile")
    spec = small_spec()
    manifests = generate_tile(spec, tile_dir)
    return tile_dir, spec, manifests
