import math

import pandas as pd
import pytest
import torch

from app.core.errors import ConfigurationError, ShapeError
from app.schemas import ScheduleConfig, ScheduleKind, Weighting
from app.services.diffusion_core import (
    Conditioning,
    NoiseSchedule,
    PromptVocabulary,
    add_noise,
    build_corpus,
    build_vocabulary,
    load_denoiser,
    predict_noise_frozen,
    pretrain_denoiser,
    save_denoiser,
    validation_mse,
    weighting,
)
from app.services.helpers import make_generator
from app.services.latent_codec import LatentImage, encode

from .conftest import TINY_DENOISER

QUARTER = NoiseSchedule(2, torch.tensor([1.0, 0.25, 0.0], dtype=torch.float64))


# Test 1: closed-form forward diffusion
def test_add_noise_closed_form():
    x_t = add_noise(torch.tensor([2.0], dtype=torch.float64), 1, torch.tensor([4.0], dtype=torch.float64), QUARTER)
    assert float(x_t) == pytest.approx(1.0 + math.sqrt(0.75) * 4.0, abs=1e-12)
    assert float(x_t) == pytest.approx(4.46410, abs=1e-5)


def test_add_noise_endpoints():
    sched = NoiseSchedule.cosine(50)
    x0 = torch.randn(4, 4, 4, generator=make_generator(0))
    eps = torch.randn(4, 4, 4, generator=make_generator(1))
    assert torch.equal(add_noise(x0, 0, eps, sched), x0)
    assert torch.equal(add_noise(x0, 50, eps, sched), eps), "alpha_bar_T = 0 must return pure noise"
    latent = add_noise(LatentImage(x0, source_view=2), 10, eps, sched)
    assert isinstance(latent, LatentImage) and latent.source_view == 2


def test_add_noise_rejects_bad_inputs():
    with pytest.raises(ConfigurationError):
        add_noise(torch.zeros(2), 3, torch.zeros(2), QUARTER)
    with pytest.raises(ShapeError):
        add_noise(torch.zeros(2), 1, torch.zeros(3), QUARTER)


# Test 2: empirical variance of x_t matches alpha_bar Var(x0) + (1 - alpha_bar)
@pytest.mark.parametrize("fraction", [0.25, 0.5, 0.75])
def test_forward_diffusion_variance(fraction):
    sched = NoiseSchedule.cosine(1000)
    t = int(sched.T * fraction)
    gen = make_generator(int(fraction * 100))
    x0 = 2.0 * torch.randn(10_000, generator=gen, dtype=torch.float64)
    eps = torch.randn(10_000, generator=gen, dtype=torch.float64)
    x_t = add_noise(x0, t, eps, sched)
    ab = float(sched.alpha_bar[t])
    expected = ab * float(x0.var()) + (1.0 - ab)
    assert float(x_t.var()) == pytest.approx(expected, rel=0.05)


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        NoiseSchedule(2, torch.tensor([1.0, 0.5, 0.6]))
    with pytest.raises(ConfigurationError):
        NoiseSchedule(2, torch.tensor([0.9, 0.5, 0.1]))
    with pytest.raises(ConfigurationError):
        NoiseSchedule(3, torch.tensor([1.0, 0.5, 0.1]))
    cosine = NoiseSchedule.cosine(100)
    assert float(cosine.alpha_bar[0]) == 1.0 and float(cosine.alpha_bar[-1]) == 0.0
    linear = NoiseSchedule.from_config(ScheduleConfig(kind=ScheduleKind.linear, T=100))
    assert bool((linear.alpha_bar[1:] < linear.alpha_bar[:-1]).all())
    with pytest.raises(ConfigurationError):
        cosine.check_t(101)


def test_schedule_csv(tmp_path):
    path = NoiseSchedule.cosine(20).to_csv(tmp_path / "schedule.csv")
    df = pd.read_csv(path)
    assert list(df.columns) == ["t", "alpha_bar"]
    assert len(df) == 21 and df["alpha_bar"].iloc[0] == 1.0


def test_weighting_kinds():
    assert weighting(1, QUARTER, Weighting.constant) == 1.0
    assert weighting(1, QUARTER, Weighting.one_minus_alpha_bar, 2.0) == pytest.approx(1.5)
    assert weighting(1, QUARTER, Weighting.snr) == pytest.approx(1.0 / 3.0)


def test_prompt_vocabulary(tmp_path):
    vocab = PromptVocabulary(["a chair", "a fern"])
    assert len(vocab) == 3
    assert vocab.lookup("a fern") == 2
    assert vocab.lookup("never seen") == 0
    assert vocab.add("a fern") == 2
    loaded = PromptVocabulary.load(vocab.save(tmp_path / "vocab.json"))
    assert loaded.tokens == vocab.tokens
    with pytest.raises(ConfigurationError):
        PromptVocabulary.from_json({"tokens": ["a chair"]})


def test_denoiser_forward_and_input_checks(tiny_denoiser, tiny_codec, tiny_scene):
    _, ds = tiny_scene
    lr = encode(ds.hr_images[0], tiny_codec)
    cond = Conditioning(10, 1, 2, lr)
    out = predict_noise_frozen(tiny_denoiser, lr.data, cond)
    assert out.shape == lr.data.shape
    batch = predict_noise_frozen(tiny_denoiser, lr.data.expand(3, -1, -1, -1), cond)
    assert batch.shape == (3, *lr.data.shape)
    with pytest.raises(ShapeError):
        predict_noise_frozen(tiny_denoiser, lr.data, Conditioning(10, 7, 0, lr))
    with pytest.raises(ShapeError):
        predict_noise_frozen(tiny_denoiser, torch.zeros(4, 6, 6), Conditioning(10, 0, 0, LatentImage(torch.zeros(4, 6, 6))))
    with pytest.raises(ConfigurationError):
        Conditioning(-1, 0, 0, lr)
    with pytest.raises(ConfigurationError):
        Conditioning(101, 0, 0, lr, T=100)
    bounded = Conditioning(100, 0, 0, lr, T=100)
    with pytest.raises(ConfigurationError):
        bounded.with_t(101)
    assert bounded.with_t(0).T == 100


# Test 3: pretraining yields a frozen model that survives a save/load cycle
def test_pretrain_save_and_load(tiny_codec, tiny_scene, tmp_path):
    _, ds = tiny_scene
    vocab = build_vocabulary([ds])
    corpus = build_corpus(tiny_codec, [ds], vocab)
    assert len(corpus) == len(ds)
    sched = NoiseSchedule.cosine(100)
    denoiser = pretrain_denoiser(tiny_codec, [ds], 3, seed=4, config=TINY_DENOISER, schedule=sched, vocab=vocab, corpus=corpus)
    assert not any(p.requires_grad for p in denoiser.parameters())
    assert denoiser.metadata.steps_run == 3 and denoiser.metadata.weights_hash

    save_denoiser(tmp_path / "denoiser.bin", denoiser, TINY_DENOISER, sched, vocab)
    loaded, sched2, vocab2 = load_denoiser(tmp_path / "denoiser.bin")
    assert loaded.metadata.weights_hash == denoiser.metadata.weights_hash
    assert torch.equal(sched2.alpha_bar, sched.alpha_bar)
    assert vocab2.tokens == vocab.tokens
    lr = corpus.lr_latents[0]
    cond = Conditioning(30, vocab.lookup(ds.prompt), 0, LatentImage(lr))
    assert torch.equal(predict_noise_frozen(loaded, lr, cond), predict_noise_frozen(denoiser, lr, cond))

    again = pretrain_denoiser(tiny_codec, [ds], 3, seed=4, config=TINY_DENOISER, schedule=sched, vocab=vocab, corpus=corpus)
    assert again.metadata.weights_hash == denoiser.metadata.weights_hash, "fixed seed must reproduce the weights"


@pytest.fixture(scope="module")
def denoising_setup(tiny_codec, tiny_scene):
    _, ds = tiny_scene
    vocab = build_vocabulary([ds])
    corpus = build_corpus(tiny_codec, [ds], vocab)
    return ds, vocab, corpus, NoiseSchedule.cosine(100)


def test_untrained_denoiser_is_no_better_than_zero(tiny_codec, denoising_setup):
    ds, vocab, corpus, sched = denoising_setup
    untrained = pretrain_denoiser(tiny_codec, [ds], 0, seed=2, config=TINY_DENOISER, schedule=sched, vocab=vocab, corpus=corpus)
    assert untrained.metadata.steps_run == 0
    assert abs(validation_mse(untrained, corpus, sched, seed=9) - 1.0) < 0.2


# Test 4: a trained denoiser beats the zero predictor and listens to its class input
def test_trained_denoiser_beats_zero_predictor(tiny_codec, denoising_setup):
    ds, vocab, corpus, sched = denoising_setup
    config = TINY_DENOISER.model_copy(update={"steps": 300, "log_every": 100})
    denoiser = pretrain_denoiser(tiny_codec, [ds], config.steps, seed=2, config=config, schedule=sched, vocab=vocab, corpus=corpus)
    gen = make_generator(9)
    zero_mse = sum(float(torch.randn(corpus.hr_latents.shape, generator=gen).pow(2).mean()) for _ in range(4)) / 4
    trained_mse = validation_mse(denoiser, corpus, sched, seed=9)
    assert trained_mse < 0.9 * zero_mse, f"trained {trained_mse:.4f} vs zero predictor {zero_mse:.4f}"

    lr = LatentImage(corpus.lr_latents[0])
    x_t = torch.randn(lr.data.shape, generator=gen)
    pid = vocab.lookup(ds.prompt)
    a = predict_noise_frozen(denoiser, x_t, Conditioning(50, pid, 0, lr))
    b = predict_noise_frozen(denoiser, x_t, Conditioning(50, pid, 1, lr))
    assert float((a - b).abs().max()) > 0.0
