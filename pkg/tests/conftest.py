import numpy as np
import pytest

from meshfat.surface import marching_cubes
from meshfat.volume import cohort_dims, generate_synthetic_body, sample_body_spec, segment_body

BODY_SPACING = (6.0, 6.0, 6.0)


def body_volume(seed=0, spacing=BODY_SPACING):
    dims = cohort_dims(spacing)
    spec = sample_body_spec(seed, dims=dims, spacing=spacing)
    return generate_synthetic_body(spec, dims, spacing)


@pytest.fixture(scope="session")
def body():
    """(volume, labels, surface mesh) of one synthetic subject."""
    v, labels = body_volume(0)
    seg = segment_body(v)
    m = marching_cubes(seg.pad(1), origin=tuple(-np.asarray(seg.spacing)))
    return v, labels, m
