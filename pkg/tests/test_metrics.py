import hashlib
import json
import math

import numpy as np
import pytest
import scipy.ndimage
import torch

from app.core.errors import IngestionError, ShapeError
from app.schemas import FieldConfig
from app.services import radiance_field as rf
from app.services.helpers import make_generator
from app.services.metrics import (
    NIQEModel,
    evaluate_bicubic_baseline,
    evaluate_images,
    evaluate_run,
    fit_niqe_model,
    mean_psnr,
    niqe,
    niqe_features,
    pair_reprojection_error,
    perc_proxy,
    psnr,
    reprojection_error,
)
from app.services.scene_data import ring_poses

from .conftest import TINY_FIELD, TINY_METRICS


def _smooth(seed, size=64):
    rng = np.random.default_rng(seed)
    base = scipy.ndimage.gaussian_filter(rng.random((size, size, 3)), sigma=(3, 3, 0))
    base = (base - base.min()) / (base.max() - base.min())
    return 0.1 + 0.8 * base


# Test 1: PSNR reference values
def test_psnr_values():
    img = np.full((4, 4, 3), 0.5)
    assert psnr(img, img) == math.inf
    a = np.zeros((2, 2))
    assert psnr(a, a + 1.0, max_val=255.0) == pytest.approx(48.1308, abs=1e-4)
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert mean_psnr([a, a], [a + 0.1, a + 0.1]) == pytest.approx(20.0)
    assert math.isnan(mean_psnr([], []))
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_niqe_rejects_small_images():
    with pytest.raises(ShapeError):
        niqe_features(np.zeros((15, 40, 3)), patch_size=8, min_side=16)


# Test 2: added noise moves an image away from the pristine statistics
def test_niqe_prefers_clean_images():
    model = fit_niqe_model([_smooth(s) for s in range(10)], patch_size=8, min_side=16)
    clean = _smooth(99)
    noise = np.random.default_rng(5).normal(0.0, 0.15, clean.shape)
    noisy = np.clip(clean + noise, 0.0, 1.0)
    assert niqe(clean, model, min_side=16) < niqe(noisy, model, min_side=16)
    assert niqe(clean, model, min_side=16) == niqe(clean.copy(), model, min_side=16)


def test_niqe_model_save_and_load(tmp_path):
    model = NIQEModel(np.arange(3.0), np.eye(3), patch_size=8)
    loaded = NIQEModel.load(model.save(tmp_path / "niqe.json"))
    assert np.array_equal(loaded.mu, model.mu) and np.array_equal(loaded.cov, model.cov)
    assert loaded.patch_size == 8
    doc = json.loads((tmp_path / "niqe.json").read_text())
    doc["version"] = 99
    (tmp_path / "newer.json").write_text(json.dumps(doc))
    with pytest.raises(IngestionError):
        NIQEModel.load(tmp_path / "newer.json")
    with pytest.raises(IngestionError):
        NIQEModel.load(tmp_path / "absent.json")


def test_perc_proxy_properties(tiny_codec):
    gen = make_generator(0)
    a, b = torch.rand(16, 16, 3, generator=gen), torch.rand(16, 16, 3, generator=gen)
    assert perc_proxy(a, a, tiny_codec) == 0.0
    assert perc_proxy(a, b, tiny_codec) > 0.0
    assert perc_proxy(a, b, tiny_codec) == pytest.approx(perc_proxy(b, a, tiny_codec))
    with pytest.raises(ShapeError):
        perc_proxy(a, torch.rand(8, 8, 3), tiny_codec)


@pytest.mark.parametrize("seed", range(12))
def test_perc_proxy_is_a_pseudometric(seed, tiny_codec):
    gen = make_generator(100 + seed)
    size = 8 * (1 + seed % 3)
    a, b = torch.rand(size, size, 3, generator=gen), torch.rand(size, size, 3, generator=gen)
    forward, backward = perc_proxy(a, b, tiny_codec), perc_proxy(b, a, tiny_codec)
    assert forward >= 0.0
    assert forward == backward
    assert perc_proxy(b, b, tiny_codec) == 0.0


def test_perc_proxy_grows_with_noise(tiny_codec):
    img = torch.from_numpy(_smooth(3, size=16)).float()
    gen = make_generator(1)
    noise = torch.randn(img.shape, generator=gen)
    weak = perc_proxy(img, img + 0.05 * noise, tiny_codec)
    strong = perc_proxy(img, img + 0.2 * noise, tiny_codec)
    assert strong > weak > 0.0


def test_reprojection_of_constant_images():
    poses = ring_poses(8, 3.0, 8, 1.2)[:2]
    depth = torch.full((8, 8), 3.0)
    mask = torch.ones(8, 8, dtype=torch.bool)
    flat = torch.full((8, 8, 3), 0.4)
    assert pair_reprojection_error(flat, flat, poses[0], poses[1], depth, mask) == pytest.approx(0.0, abs=1e-6)
    other = torch.full((8, 8, 3), 0.6)
    assert pair_reprojection_error(flat, other, poses[0], poses[1], depth, mask) == pytest.approx(0.2, abs=1e-6)
    assert pair_reprojection_error(flat, other, poses[0], poses[1], depth, torch.zeros_like(mask)) is None
    assert math.isnan(reprojection_error([flat, other], poses, [depth, depth], [~mask, ~mask]))
    with pytest.raises(ShapeError):
        reprojection_error([flat], poses, [depth], [mask])


def test_evaluate_images(tiny_codec):
    images = [torch.full((16, 16, 3), 0.3), torch.full((16, 16, 3), 0.6)]
    report = evaluate_images("identity", images, images, tiny_codec, None, config=TINY_METRICS, config_hash="abc")
    assert report.psnr_infinite and report.psnr_db is None
    assert report.perc_proxy == 0.0
    assert report.niqe is None and report.n_views == 2 and report.config_hash == "abc"

    model = NIQEModel(np.zeros(36), np.eye(36), patch_size=8)
    tiny = [torch.full((8, 8, 3), 0.3)]
    skipped = evaluate_images("x", tiny, None, None, model, config=TINY_METRICS)
    assert skipped.niqe is None and skipped.psnr_db is None


def test_evaluate_run_requires_outputs(tiny_scene, tmp_path):
    _, ds = tiny_scene
    with pytest.raises(IngestionError, match="field_sr.bin"):
        evaluate_run(tmp_path, ds, None, method="vsd_lora_spaced")


def test_evaluate_run_and_baseline(tiny_scene, tiny_codec, tmp_path):
    _, ds = tiny_scene
    field = rf.RadianceField(TINY_FIELD.sr_grid_res, ds.bbox)
    field.save(tmp_path / "field_sr.bin")
    (tmp_path / "config.json").write_text('{"method": "identity"}')
    report = evaluate_run(tmp_path, ds, tiny_codec, method="identity", field_config=TINY_FIELD, metrics_config=TINY_METRICS, held_out_every=3)
    assert report.method == "identity" and report.n_views == 2
    assert report.config_hash == hashlib.sha256(b'{"method": "identity"}').hexdigest()
    assert report.psnr_db is not None and report.perc_proxy is not None

    baseline = evaluate_bicubic_baseline(
        rf.RadianceField(TINY_FIELD.lr_grid_res, ds.bbox), ds, tiny_codec,
        field_config=FieldConfig(n_samples=8), metrics_config=TINY_METRICS, held_out_every=3,
    )
    assert baseline.method == "bicubic" and baseline.n_views == 2
    assert baseline.psnr_db is not None
