import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgedistill.toy import (
    N_VARIATIONS,
    ShapeAttributes,
    ToyCorpusSpec,
    caption_for,
    estimate_attributes,
    parse_caption,
    render,
)

SPEC = ToyCorpusSpec()


@pytest.mark.parametrize("background,radius_scale", [(0.0, 1.0), (0.4, 1.25), (0.3, 0.8)])
def test_estimator_recovers_every_combination(background, radius_scale):
    spec = ToyCorpusSpec(background=background, radius_scale=radius_scale)
    misses = []
    for combo in spec.combinations():
        attrs = ShapeAttributes(*combo)
        for offset in ((0, 0), (1, -1), (-1, 1)):
            img = render(attrs, spec, offset).astype(np.float32) / 255.0
            if estimate_attributes(img, spec) != attrs:
                misses.append((combo, offset))
    assert misses == []


def test_render_background_level():
    spec = ToyCorpusSpec(background=0.4)
    img = render(ShapeAttributes("circle", "red", "top left"), spec)
    assert img[:, -1, -1].tolist() == [102, 102, 102]


def test_blank_image_has_no_attributes():
    assert estimate_attributes(np.zeros((3, 32, 32), np.float32), SPEC) is None


def test_captions_are_distinct_and_parse_back():
    attrs = ShapeAttributes("diamond", "orange", "bottom center")
    caps = [caption_for(attrs, v) for v in range(N_VARIATIONS)]
    assert len(set(caps)) == N_VARIATIONS
    assert all(parse_caption(c, SPEC) == attrs for c in caps)


def test_parse_rejects_incomplete_caption():
    assert parse_caption("a red shape somewhere", SPEC) is None


def test_vocabulary_covers_grammar():
    vocab = set(SPEC.vocabulary())
    for combo in SPEC.combinations()[:20]:
        for v in range(N_VARIATIONS):
            assert set(caption_for(ShapeAttributes(*combo), v).split()) <= vocab


@pytest.mark.parametrize("kwargs", [dict(background=1.5), dict(radius_scale=3.0), dict(grid=4),
                                    dict(captions_per_image=0), dict(shapes=("star",))])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        ToyCorpusSpec(**kwargs)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(SPEC.combinations()), st.integers(-1, 1), st.integers(-1, 1),
       st.floats(0.0, 0.08))
def test_estimator_tolerates_mild_noise(combo, dy, dx, noise):
    attrs = ShapeAttributes(*combo)
    rng = np.random.default_rng(0)
    img = render(attrs, SPEC, (dy, dx)).astype(np.float64) / 255.0
    img = np.clip(img + rng.uniform(-noise, noise, img.shape), 0, 1)
    assert estimate_attributes(img, SPEC) == attrs
