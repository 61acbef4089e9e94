import numpy as np
import pytest

from hepatoscan.densitometry import interior_bits
from hepatoscan.io import volume_bytes
from hepatoscan.phantom import BONE, LUNG, Lesion, PhantomSpec, generate
from hepatoscan.volume import InvalidArgumentError


def test_same_seed_same_bytes():
    spec = PhantomSpec(kind="chest_crop", liver_hu=33.0, fov_liver_fraction=0.7, seed=9)
    a, ta = generate(spec)
    b, tb = generate(spec)
    assert volume_bytes(a) == volume_bytes(b)
    assert ta.liver_mask == tb.liver_mask


def test_different_seed_differs():
    a, _ = generate(PhantomSpec(seed=1))
    b, _ = generate(PhantomSpec(seed=2))
    assert volume_bytes(a) != volume_bytes(b)


def test_liver_interior_mean():
    vol, truth = generate(PhantomSpec(kind="body", liver_hu=50.0, noise_sigma_hu=10.0, seed=3))
    inner = interior_bits(truth.liver_mask)
    assert inner.sum() >= 5 * 10**4
    assert vol.values[inner].mean() == pytest.approx(50.0, abs=0.2)
    assert truth.liver_mean_hu == 50.0 and truth.label


def test_body_contents():
    vol, truth = generate(PhantomSpec(kind="body", noise_sigma_hu=0.0, seed=4))
    v = vol.values
    assert (v == LUNG).sum() > 1000
    assert (v == BONE).sum() > 1000
    assert (v == -1000).any()  # air around the body
    assert truth.lesion_mask is None
    assert truth.shape_type is not None


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fov_fraction(seed):
    _, crop = generate(PhantomSpec(kind="chest_crop", fov_liver_fraction=0.4, seed=seed))
    _, full = generate(PhantomSpec(kind="chest_crop", fov_liver_fraction=1.0, seed=seed))
    n_crop, n_full = crop.liver_mask.bits.sum(), full.liver_mask.bits.sum()
    assert n_crop / n_full == pytest.approx(0.4, abs=0.03)
    assert crop.extra["uncropped_liver_voxels"] == n_full


@pytest.mark.parametrize("kind", ["head", "limb"])
def test_negatives_have_no_liver(kind):
    vol, truth = generate(PhantomSpec(kind=kind, seed=5))
    assert not truth.label
    assert not truth.liver_mask.bits.any()
    assert np.isnan(truth.liver_mean_hu)
    assert (vol.values >= 600).sum() > 100  # skull or long bones


def test_lesion_fraction():
    _, truth = generate(PhantomSpec(kind="body", lesion=Lesion(24.0, fraction=0.2), seed=6))
    frac = truth.lesion_mask.bits.sum() / truth.liver_mask.bits.sum()
    assert frac == pytest.approx(0.2, abs=0.01)
    assert not (truth.lesion_mask.bits & ~truth.liver_mask.bits).any()


def test_lesion_values():
    vol, truth = generate(PhantomSpec(kind="body", liver_hu=50.0, lesion=Lesion(24.0, radius_mm=20.0), noise_sigma_hu=0.0, seed=7))
    assert np.all(vol.values[truth.lesion_mask.bits] == 24)
    liver_only = truth.liver_mask.bits & ~truth.lesion_mask.bits
    assert np.all(vol.values[liver_only] == 50)


@pytest.mark.parametrize(
    "kw",
    [
        dict(kind="torso"),
        dict(liver_hu=400.0),
        dict(noise_sigma_hu=-1.0),
        dict(fov_liver_fraction=0.0),
        dict(fov_liver_fraction=1.5),
        dict(liver_scale=2.0),
    ],
)
def test_invalid_spec(kw):
    with pytest.raises(InvalidArgumentError):
        PhantomSpec(**kw)


@pytest.mark.parametrize("kw", [dict(hu=24.0), dict(hu=24.0, fraction=1.0), dict(hu=500.0, radius_mm=5.0), dict(hu=0.0, radius_mm=-1.0)])
def test_invalid_lesion(kw):
    with pytest.raises(InvalidArgumentError):
        Lesion(**kw)


def test_density_range_spanned():
    for hu in (-4.9, 72.6):
        vol, truth = generate(PhantomSpec(liver_hu=hu, noise_sigma_hu=0.0, seed=8))
        assert np.all(vol.values[truth.liver_mask.bits] == round(hu))
