import numpy as np
import pytest

from leapvid import autodiff as ad
from leapvid.base import loss_reduction
from leapvid.rafi import (AutoencoderQualityError, FlowRegressor, FrameAutoencoder, Rafi, augment_latent,
                          draw_flow_samples, draw_indices, extract_action, flow_loss, integrate_flow,
                          sample_probability_path, sample_video, sinusoidal_embedding, target_vector_field)

from helpers import tiny_data


@pytest.fixture(scope="module")
def small_ae():
    frames, _ = tiny_data(6, 8)
    return FrameAutoencoder(latent_channels=4, width=8, n_steps=30, batch_size=16, min_psnr=None).fit(frames)


def test_augment_and_extract_are_inverse(rng):
    z = rng.normal(size=(3, 4, 4, 8))
    a = rng.uniform(size=(3, 2))
    aug = augment_latent(z, a)
    assert aug.shape == (3, 4, 4, 10)
    assert np.all(aug[..., 8:] == a[:, None, None, :])
    lat, back = extract_action(aug)
    assert np.array_equal(lat, z) and np.array_equal(back, a)
    assert np.all(augment_latent(z, np.zeros((3, 2)))[..., 8:] == 0)


def test_augment_rejects_wrong_action_shape(rng):
    with pytest.raises(ValueError):
        augment_latent(rng.normal(size=(3, 4, 4, 8)), rng.uniform(size=(2, 2)))
    with pytest.raises(ValueError):
        augment_latent(rng.normal(size=(1, 4, 4, 8)), np.array([[1.5, 0.0]]))


def test_extract_action_clamps():
    aug = np.zeros((1, 2, 2, 3))
    aug[..., 1] = 2.0
    aug[..., 2] = -1.0
    assert np.array_equal(extract_action(aug)[1], [[1.0, 0.0]])


def test_path_endpoints(rng):
    target, noise = rng.normal(size=(2, 4, 4, 3)), rng.normal(size=(2, 4, 4, 3))
    assert np.array_equal(sample_probability_path(target, 1.0, noise, sigma_min=0.0), target)
    assert np.array_equal(sample_probability_path(target, 0.0, noise), noise)
    with pytest.raises(ValueError):
        sample_probability_path(target, 1.5, noise)


def test_path_moments_at_half(rng):
    target = np.array([1.0, -2.0, 0.5])
    noise = rng.standard_normal((100_000, 3))
    nu = sample_probability_path(target, 0.5, noise, sigma_min=0.1)
    sd = 1 - 0.5 * 0.9
    se = sd / np.sqrt(len(nu))
    assert np.all(np.abs(nu.mean(0) - 0.5 * target) < 3 * se)
    assert np.all(np.abs(nu.std(0) - sd) < 3 * sd / np.sqrt(2 * len(nu)))


def test_target_field_closed_forms(rng):
    z = rng.normal(size=(4, 4, 3))
    np.testing.assert_allclose(target_vector_field(0.3 * z, z, 0.3, sigma_min=0.0), z)
    np.testing.assert_allclose(target_vector_field(np.zeros_like(z), z, 0.0), z)
    with pytest.raises(ValueError, match="vanishes"):
        target_vector_field(z, z, 1.0, sigma_min=0.0)


def test_euler_integration_follows_closed_form(f64, rng):
    z, nu0 = rng.normal(size=(4, 4, 5)), rng.normal(size=(4, 4, 5))
    steps = 100
    nu = nu0.copy()
    for k in range(90):
        t = k / steps
        nu = nu + target_vector_field(nu, z, t) / steps
    exact = sample_probability_path(z, 0.9, nu0)
    assert np.linalg.norm(nu - exact) / np.linalg.norm(exact) < 1e-2


def test_integrate_flow_rejects_zero_steps():
    with pytest.raises(ValueError):
        integrate_flow(lambda nu, t: nu, np.zeros(2), 0)


def test_index_bounds(rng):
    tau, c = draw_indices(10, 10_000, rng)
    assert tau.min() == 3 and tau.max() == 10
    assert np.all(c >= 1) and np.all(c <= tau - 2)
    with pytest.raises(ValueError):
        draw_indices(2, 1, rng)


def test_flow_samples_short_sequences_rejected(rng):
    with pytest.raises(ValueError):
        draw_flow_samples(np.zeros((2, 4, 4, 4, 3)), rng)


def test_oracle_regressor_has_zero_loss(rng):
    latents = rng.normal(size=(3, 8, 4, 4, 5))
    sample, prev, earlier = draw_flow_samples(latents, rng, batch_size=16)
    target = latents[sample.sequence, sample.tau - 1]

    def oracle(nu, p, e, t, gap):
        return ad.Value(target_vector_field(nu, target, t))

    assert float(flow_loss(oracle, sample, prev, earlier).data) == 0.0


def test_regressor_output_shape_and_loss_finite(rng):
    reg = FlowRegressor(rng, 6, width=8)
    latents = rng.normal(size=(3, 8, 4, 4, 6))
    sample, prev, earlier = draw_flow_samples(latents, rng, batch_size=5)
    loss = flow_loss(reg, sample, prev, earlier)
    assert np.isfinite(loss.data) and float(loss.data) >= 0
    assert reg(sample.nu, prev, earlier, sample.t, sample.tau - sample.c).shape == (5, 4, 4, 6)


def test_sinusoidal_embedding_shape():
    e = sinusoidal_embedding([0.0, 0.5], dim=8)
    assert e.shape == (2, 8)
    np.testing.assert_allclose(e[0], [0, 0, 0, 0, 1, 1, 1, 1])


def test_autoencoder_shapes_determinism_and_inverse(small_ae):
    frames, _ = tiny_data(2, 8)
    z = small_ae.transform(frames)
    assert z.shape == (2, 8, 4, 4, 4)
    assert np.array_equal(z, small_ae.transform(frames))
    x = small_ae.inverse_transform(z)
    assert x.shape == frames.shape and 0 <= x.min() and x.max() <= 1


def test_autoencoder_quality_gate():
    frames, _ = tiny_data(4, 8)
    with pytest.raises(AutoencoderQualityError) as err:
        FrameAutoencoder(latent_channels=1, width=4, n_steps=2, min_psnr=40.0).fit(frames, validation=frames)
    assert err.value.psnr < 40


def test_autoencoder_roundtrip(tmp_path, small_ae):
    small_ae.save(tmp_path / "ae.ckpt")
    back = FrameAutoencoder.load(tmp_path / "ae.ckpt")
    frames, _ = tiny_data(2, 8)
    assert np.array_equal(back.transform(frames), small_ae.transform(frames))


def test_sample_video_contracts(small_ae, rng):
    frames, actions = tiny_data(2, 8)
    reg = FlowRegressor(rng, 6, width=8)
    x, a = sample_video(reg, small_ae, frames[:, :3], actions[:, :3], 3, euler_steps=2)
    assert x.shape == (2, 3, 16, 16, 1) and a.shape == (2, 3, 2)
    assert 0 <= a.min() and a.max() <= 1
    x0, a0 = sample_video(reg, small_ae, frames[:, :3], actions[:, :3], 0)
    assert x0.shape[1] == 0
    with pytest.raises(ValueError, match="2 condition"):
        sample_video(reg, small_ae, frames[:, :1], actions[:, :1], 2)


def test_oracle_sampler_recovers_known_target():
    # with sigma_min = 0 the exact field of a single target carries any noise onto it
    target = np.random.default_rng(0).normal(size=(1, 4, 4, 4))

    def field(nu, t):
        return target_vector_field(nu, target, t, sigma_min=0.0)

    out = integrate_flow(field, np.random.default_rng(1).normal(size=target.shape), 100)
    assert np.linalg.norm(out - target) / np.linalg.norm(target) < 1e-2


def test_rafi_estimator_with_and_without_actions(small_ae, tmp_path):
    frames, actions = tiny_data(6, 8)
    for use_actions in (True, False):
        est = Rafi(use_actions=use_actions, autoencoder=small_ae, latent_channels=4, width=8, n_steps=5,
                   batch_size=8, euler_steps=2).fit(frames, actions)
        x, a = est.predict(frames[:, :2], actions[:, :2], horizon=2, random_state=0)
        assert x.shape == (6, 2, 16, 16, 1)
        assert (a is None) != use_actions
        assert np.isfinite(est.score(frames, actions))
    est.save(tmp_path / "r.ckpt")
    assert (tmp_path / "r.ae.ckpt").exists()
    back = Rafi.load(tmp_path / "r.ckpt", **{k: v for k, v in est.get_params(deep=False).items() if k != "autoencoder"})
    x2, _ = back.predict(frames[:, :2], actions[:, :2], horizon=2, random_state=0)
    x1, _ = est.predict(frames[:, :2], actions[:, :2], horizon=2, random_state=0)
    assert x1.tobytes() == x2.tobytes()


def test_rafi_training_reduces_loss(small_ae):
    frames, actions = tiny_data(6, 8)
    est = Rafi(autoencoder=small_ae, latent_channels=4, width=16, n_steps=150, batch_size=16).fit(frames, actions)
    assert loss_reduction(est.log_.losses(), head=50) > 0.2
