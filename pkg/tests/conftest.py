import numpy as np
import pytest
import torch
from hypothesis import settings

from gliotl.models import ArchitectureSpec
from gliotl.synthgen import SynthCohortSpec, generate_cohort

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_vgg_spec():
    # closed-form count is worked out in test_models
    return ArchitectureSpec.vgg3d(input_shape=(16, 16, 16), conv_block_channels=(2, 2, 2, 2), fc_widths=(4, 4, 2, 1))


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """12 HAD + 12 WAD subjects at 16^3, written to disk once per session."""
    out = tmp_path_factory.mktemp("cohort")
    spec = SynthCohortSpec(n_subjects=12, n_wad_subjects=12, volume_shape=(16, 16, 16), radius_range=(2.0, 3.0),
                           radius_step=1.5, seed=7)
    return generate_cohort(spec, out), out
