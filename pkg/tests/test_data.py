import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stylerecon import data, geometry, renderer
from stylerecon.renderer import ViewSpec


def test_composite_reductions():
    rng = np.random.default_rng(0)
    obj, bg = rng.random((5, 5, 3)), rng.random((5, 5, 3))
    np.testing.assert_array_equal(data.composite(obj, np.ones((5, 5)), bg), obj)
    np.testing.assert_array_equal(data.composite(obj, np.zeros((5, 5)), bg), bg)
    half = data.composite(np.ones((5, 5, 3)), np.full((5, 5), 0.5), np.zeros((5, 5, 3)))
    np.testing.assert_array_equal(half, 0.5)


def test_composite_shape_mismatch():
    with pytest.raises(ValueError):
        data.composite(np.zeros((4, 4, 3)), np.zeros((5, 5)), np.zeros((4, 4, 3)))


def test_brightness_sigma_zero_is_identity():
    rng = np.random.default_rng(0)
    img, sil = rng.random((8, 8, 3)), rng.random((8, 8))
    out = data.perturb_brightness(img, sil, 0.0, np.random.default_rng(1))
    assert np.array_equal(out, img)


def test_brightness_full_silhouette_scales_image():
    img = np.random.default_rng(0).random((8, 8, 3))
    out = data.perturb_brightness(img, np.ones((8, 8)), 0.7, np.random.default_rng(5))
    n1, _ = np.random.default_rng(5).normal(0.0, 0.7, size=2)
    assert np.array_equal(out, img * (1 + n1))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 4.0), st.integers(0, 2**31 - 1))
def test_brightness_empty_silhouette_only_brightens(sigma, seed):
    img = np.random.default_rng(seed).random((6, 6, 3))
    out = data.perturb_brightness(img, np.zeros((6, 6)), sigma, np.random.default_rng(seed))
    assert np.all(out >= img)
    assert np.allclose(out - img, (out - img).flat[0])


def test_brightness_never_clips():
    img = np.full((8, 8, 3), 0.9)
    sil = np.zeros((8, 8))
    sil[2:6, 2:6] = 1
    rng = np.random.default_rng(0)
    outs = [data.perturb_brightness(img, sil, 4.0, rng) for _ in range(20)]
    assert max(o.max() for o in outs) > 1.0
    assert min(o.min() for o in outs) < 0.0


def test_azimuth_perturbation():
    v = ViewSpec(10.0, 30.0, 2.732, 32)
    assert data.perturb_azimuth(v, 0.0, np.random.default_rng(0)) == v
    rng = np.random.default_rng(0)
    base = ViewSpec(180.0, 30.0, 2.732, 32)
    draws = np.array([data.perturb_azimuth(base, 5.0, rng).azimuth for _ in range(10_000)])
    assert abs(draws.std() - 5.0) <= 0.25
    near_zero = [data.perturb_azimuth(ViewSpec(0.0, 30.0, 2.732, 32), 5.0, rng).azimuth for _ in range(2000)]
    assert all(0.0 <= a < 360.0 for a in near_zero)


def test_panorama_views_overlap():
    pano = np.random.default_rng(0).random((32, 192, 3))
    views = data.panorama_views(pano, 32)
    assert views.shape == (24, 32, 32, 3)
    # window spans four view-shifts, so view k+1 starts a quarter into view k
    np.testing.assert_array_equal(views[1][:, :24], views[0][:, 8:])


def test_toy_dataset_counts_and_determinism():
    spec = data.ToySpec(num_objects=10, shapes=("cube",), seed=4)
    a, b = data.make_toy_dataset(spec), data.make_toy_dataset(spec)
    assert len(a) == 10
    assert all(r.images.shape == (24, 32, 32, 3) and len(r.views) == 24 for r in a)
    assert all(np.array_equal(x.images, y.images) for x, y in zip(a, b))


def test_toy_silhouette_matches_hard_raster(small_records):
    for r in small_records[:3]:
        for k in (0, 7, 13):
            hard = renderer.hard_silhouette(r.mesh, r.views[k])
            assert np.mean((r.silhouettes[k] > 0.5) == hard) >= 0.99


def test_toy_spec_validation():
    with pytest.raises(ValueError):
        data.ToySpec(background="plaid")
    with pytest.raises(ValueError):
        data.ToySpec(shapes=("cube", "teapot"))
    with pytest.raises(ValueError):
        data.ToySpec(background="directory")


def test_record_needs_two_views():
    with pytest.raises(ValueError):
        data.ObjectRecord("a", "cube", np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 4)),
                          [ViewSpec(0, 30, 2.732, 16)], None)


def test_split_is_per_class_and_disjoint(small_records):
    train, test = data.split_records(small_records, 1 / 3, 0)
    assert not set(train) & set(test)
    assert Counter(i.split("_")[0] for i in test) == {"cube": 1, "sphere": 1, "pyramid": 1}
    assert data.split_records(small_records, 1 / 3, 0) == (train, test)


def test_training_set_has_no_silhouettes(small_train_set):
    assert not hasattr(small_train_set, "silhouettes")
    assert small_train_set.images.shape == (9, 24, 4, 32, 32)
    assert float(small_train_set.images[:, :, 3].min()) == 1.0


def test_sample_pairs_contract(small_train_set):
    rng = np.random.default_rng(0)
    x, y, cx, cy, obj = small_train_set.sample_pairs(rng, 64)
    assert x.shape == y.shape == (64, 4, 32, 32)
    assert torch_all_ne(cx.azimuth, cy.azimuth)
    one = data.sample_pair(small_train_set, rng)
    assert one[2] != one[3] and one[4] in small_train_set.object_ids


def torch_all_ne(a, b):
    return bool((a != b).all())


def test_sample_pairs_uniform_over_objects(small_train_set):
    # chi-square goodness of fit against a uniform multinomial, 8 dof
    rng = np.random.default_rng(1)
    counts = np.zeros(9)
    for _ in range(100):
        *_, obj = small_train_set.sample_pairs(rng, 100)
        counts += np.bincount(obj, minlength=9)
    expected = counts.sum() / 9
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 26.1          # 0.999 quantile of chi-square(8)


def test_azimuth_perturbation_reaches_cameras(small_records):
    ts0 = data.build_training_set(small_records)
    ts5 = data.build_training_set(small_records, data.PerturbSpec(azimuth_sigma=5.0))
    assert not np.array_equal(ts0.azimuth.numpy(), ts5.azimuth.numpy())
    assert np.array_equal(ts0.images.numpy(), ts5.images.numpy())
    ts0b = data.build_training_set(small_records, data.PerturbSpec(azimuth_sigma=0.0))
    assert np.array_equal(ts0.azimuth.numpy(), ts0b.azimuth.numpy())


def test_eval_items_ignore_azimuth_noise(small_records):
    a = data.build_eval_items(small_records[:2])
    b = data.build_eval_items(small_records[:2], data.PerturbSpec(azimuth_sigma=5.0))
    assert all(np.array_equal(x.image.numpy(), y.image.numpy()) for x, y in zip(a, b))
    assert len(a) == 48


def test_save_load_roundtrip(tmp_path, small_records):
    recs = small_records[:3]
    data.save_dataset(recs, tmp_path, train_ids=[recs[0].object_id], test_ids=[r.object_id for r in recs[1:]])
    back = data.load_dataset(tmp_path)
    assert [r.object_id for r in back] == [r.object_id for r in recs]
    np.testing.assert_allclose(back[0].images, recs[0].images, atol=1 / 255)
    np.testing.assert_allclose(back[0].mesh.vertices, recs[0].mesh.vertices, atol=1e-6)
    assert [r.object_id for r in data.load_dataset(tmp_path, "train")] == [recs[0].object_id]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["split"]["test"] == sorted(r.object_id for r in recs[1:])


def test_background_directory(tmp_path):
    from PIL import Image

    Image.fromarray((np.random.default_rng(0).random((32, 192, 3)) * 255).astype(np.uint8)).save(tmp_path / "p.png")
    scenes = data.load_background_library(tmp_path, 32)
    assert len(scenes) == 1 and scenes[0].shape == (24, 32, 32, 3)
    recs = data.make_toy_dataset(data.ToySpec(num_objects=2, background="directory", background_dir=str(tmp_path)))
    assert len(recs) == 2


def test_environment_output_root(monkeypatch):
    monkeypatch.setenv("STYLERECON_OUTPUT", "/tmp/somewhere")
    assert str(data.environment_output_root()) == "/tmp/somewhere"


def test_select_records(small_records):
    ids = [small_records[2].object_id, small_records[0].object_id]
    assert [r.object_id for r in data.select_records(small_records, ids)] == ids
    with pytest.raises(KeyError):
        data.select_records(small_records, ["nope"])
