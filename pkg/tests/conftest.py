"""Shared fixtures: small synthetic fundus frames rendered at test scale."""

import numpy as np
import pytest

from retscreen.core import PixelGrid
from retscreen.harness.synth import (
    ROLE_BLURRED,
    ROLE_NEGATIVE,
    ROLE_POSITIVE,
    RenderedSample,
    SynthSpec,
    render_sample,
)

TEST_SIZE = 192


def render_one(role: str, seed: int, size: int = TEST_SIZE, **spec_kw) -> RenderedSample:
    spec = SynthSpec(count=1, seed=seed, size=size, **spec_kw)
    return render_sample(spec, np.random.default_rng(seed), role)


@pytest.fixture(scope="session")
def clean_fundus() -> PixelGrid:
    # no salt: "clean" means lesion-free and speckle-free
    return render_one(ROLE_NEGATIVE, seed=101, salt_fraction=0.0).image


@pytest.fixture(scope="session")
def positive_sample() -> RenderedSample:
    return render_one(ROLE_POSITIVE, seed=202)


@pytest.fixture(scope="session")
def blurred_fundus() -> PixelGrid:
    return render_one(ROLE_BLURRED, seed=303).image


@pytest.fixture(scope="session")
def black_frame() -> PixelGrid:
    return PixelGrid.from_array(np.zeros((TEST_SIZE, TEST_SIZE), dtype=np.float32))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """8-image corpus at test scale: 3 positives, 1 ungradable, 4 negatives."""
    from retscreen.harness.synth import synth_generate

    out = tmp_path_factory.mktemp("tiny-corpus")
    spec = SynthSpec(count=8, seed=7, size=TEST_SIZE)
    synth_generate(spec, out)
    return out, spec


@pytest.fixture(scope="session")
def seed42_corpus(tmp_path_factory):
    """The default 200-image corpus the acceptance floors are defined on."""
    from retscreen.harness.synth import synth_generate

    out = tmp_path_factory.mktemp("seed42-corpus")
    spec = SynthSpec(count=200, seed=42)
    synth_generate(spec, out)
    return out, spec
