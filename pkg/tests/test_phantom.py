import json
import os

import numpy as np
import pytest

from petmae.errors import BadConfig
from petmae.phantom import PhantomConfig, blur, generate_corpus, generate_phantom

SMALL = PhantomConfig(shape=(24, 32, 32))


def test_same_seed_bit_identical():
    a = generate_phantom(SMALL, 5)
    b = generate_phantom(SMALL, 5)
    for u, v in zip(a, b):
        assert u.data.tobytes() == v.data.tobytes()
    assert generate_phantom(SMALL, 6)[1].data.tobytes() != a[1].data.tobytes()


def test_lesion_contrast_and_containment_100_seeds():
    for seed in range(100):
        ct, pet, lab = generate_phantom(SMALL, seed)
        body = ct.data[0] > -500
        les = lab.data[0] > 0
        assert les.any()
        assert not (les & ~body).any()
        assert pet.data[0][les].mean() >= 3 * pet.data[0][body & ~les].mean()


def test_ct_histogram_modes_100_seeds():
    edges = np.arange(-1100, 500, 20.0)
    centres = (edges[:-1] + edges[1:]) / 2
    for seed in range(100):
        ct = generate_phantom(SMALL, seed)[0].data[0]
        hist, _ = np.histogram(ct, edges)
        low = centres[:40][np.argmax(hist[:40])]  # below -300 HU
        high = centres[40:][np.argmax(hist[40:])]
        assert abs(low - -1000) <= 60 and abs(high - 40) <= 60


def test_rho_one_without_lesions_is_function_of_body():
    cfg = PhantomConfig(shape=(16, 24, 24), rho=1.0, lesion_count=(0, 0))
    ct, pet, lab = generate_phantom(cfg, 3)
    body = (ct.data[0] > -500).astype(float)
    assert lab.data.sum() == 0
    assert np.array_equal(pet.data[0], np.clip(blur(body, cfg.body_blur_passes), 0, None))


def test_rho_zero_structure_from_noise_only():
    cfg = PhantomConfig(shape=(16, 24, 24), rho=0.0, lesion_count=(0, 0))
    a_ct, a_pet, _ = generate_phantom(cfg, 3)
    body = a_ct.data[0] > -500
    assert (a_pet.data[0][~body] == 0).all()
    assert a_pet.data[0][body].std() > 0.1


def test_pet_background_near_one_inside_body():
    ct, pet, lab = generate_phantom(SMALL, 11)
    inner = (ct.data[0] > -500) & (lab.data[0] == 0)
    assert abs(np.median(pet.data[0][inner]) - 1.0) < 0.2


def test_bad_configs():
    for kwargs in ({"rho": 1.5}, {"lesion_radius_mm": (-1.0, 2.0)}, {"body_fraction": (0.5, 1.2)}):
        with pytest.raises(BadConfig):
            PhantomConfig(**kwargs)


def test_corpus_files_and_byte_identical_regeneration(tmp_path):
    cfg = PhantomConfig(shape=(12, 16, 16))
    m1 = generate_corpus(3, 42, tmp_path / "a", cfg)
    generate_corpus(3, 42, tmp_path / "b", cfg)
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b"))
    assert len(names) == 10
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    with open(tmp_path / "a" / "corpus.json") as fh:
        on_disk = json.load(fh)
    assert on_disk == json.loads(json.dumps(m1))
    assert on_disk["seed"] == 42 and len(on_disk["cases"]) == 3
    assert all(c["lesion_mean_pet"] >= 3 * c["background_mean_pet"] for c in on_disk["cases"])
    with pytest.raises(BadConfig):
        generate_corpus(0, 1, tmp_path / "c", cfg)
