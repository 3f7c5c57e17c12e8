import numpy as np
import pytest
from scipy.ndimage import label as cc_label

from tilefuse import PhantomSpec, make_phantom
from tilefuse.errors import ConfigurationError


def test_fixed_seed_is_bitwise_deterministic():
    spec = PhantomSpec(dims=(20, 18, 16), label_count=4, seed=7,
                       noise_std=0.05, bias_amplitude=0.2)
    v1, l1 = make_phantom(spec)
    v2, l2 = make_phantom(spec)
    assert np.array_equal(v1.data, v2.data)
    assert np.array_equal(l1.data, l2.data)


def test_clean_phantom_is_piecewise_constant():
    spec = PhantomSpec(dims=(20, 20, 20), label_count=4, seed=0,
                       noise_std=0.0, bias_amplitude=0.0)
    vol, lab = make_phantom(spec)
    for l in range(4):
        region = vol.data[lab.data == l]
        assert region.size > 0
        assert np.all(region == region[0])


def test_distinct_intensities_per_label():
    vol, lab = make_phantom(PhantomSpec(dims=(20, 20, 20), label_count=5,
                                        seed=0, noise_std=0.0))
    means = [vol.data[lab.data == l].mean() for l in range(5)]
    assert len(set(np.round(means, 9))) == 5


def test_labels_form_connected_nested_regions():
    _, lab = make_phantom(PhantomSpec(dims=(24, 22, 20), label_count=5,
                                      seed=1, noise_std=0.0))
    for l in range(1, 5):
        _, n_components = cc_label(lab.data == l)
        assert n_components == 1


def test_too_many_labels_rejected():
    with pytest.raises(ConfigurationError):
        make_phantom(PhantomSpec(dims=(10, 10, 10), label_count=50))
    with pytest.raises(ConfigurationError):
        make_phantom(PhantomSpec(dims=(10, 10, 10), label_count=1))


def test_misalignment_moves_both_volumes_together():
    spec = PhantomSpec(dims=(24, 24, 24), label_count=3, seed=2,
                       noise_std=0.0, translation=(3.0, 0.0, 0.0))
    vol, lab = make_phantom(spec)
    base_vol, base_lab = make_phantom(
        PhantomSpec(dims=(24, 24, 24), label_count=3, seed=2, noise_std=0.0))
    assert not np.array_equal(lab.data, base_lab.data)
    # the labeled region still matches the bright region after the shift
    inside = lab.data > 0
    assert vol.data[inside].mean() > vol.data[~inside].mean()


def test_noise_and_bias_change_intensity_not_labels():
    clean_v, clean_l = make_phantom(
        PhantomSpec(dims=(16, 16, 16), label_count=3, seed=5, noise_std=0.0))
    noisy_v, noisy_l = make_phantom(
        PhantomSpec(dims=(16, 16, 16), label_count=3, seed=5, noise_std=0.1,
                    bias_amplitude=0.3))
    assert np.array_equal(clean_l.data, noisy_l.data)
    assert not np.array_equal(clean_v.data, noisy_v.data)
