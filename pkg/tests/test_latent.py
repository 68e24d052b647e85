import numpy as np
import pytest

from moco5d.latent import (
    SMOOTH_L1_EPS,
    AutoencoderParams,
    LatentSeries,
    LatentTrainConfig,
    autoencoder_loss,
    band_penalty,
    channel_filters,
    design_band_filter,
    encode,
    preprocess_navigators,
    train_autoencoder,
)
from moco5d.metrics import aligned_phase_corr, band_energy_fraction, phase_subspace_corr
from moco5d.simulate import PhantomSpec, kooshball_trajectory, simulate_acquisition

FS = 1.0 / 0.088  # default frame rate, Hz


class TestFilters:
    @pytest.mark.parametrize("mode", ["stop", "pass"])
    def test_stopband_attenuation(self, mode):
        filt = design_band_filter((0.05, 0.7), FS, mode)
        for lo, hi in filt.stop_region():
            f = np.linspace(lo, hi, 200)
            if lo == 0.0:
                f = f[1:]  # a band-pass has -inf dB at DC; measure above it
            resp = filt.response(f)
            assert 20 * np.log10(resp.max() + 1e-300) <= -40.0, mode

    @pytest.mark.parametrize("mode", ["stop", "pass"])
    def test_passband_flat(self, mode):
        filt = design_band_filter((0.05, 0.7), FS, mode)
        for lo, hi in filt.pass_region():
            if hi <= lo:
                continue
            f = np.linspace(lo, hi, 200)
            resp = filt.response(f)
            assert 20 * np.log10(resp.min()) >= -1.0, mode

    def test_channel_assignment(self):
        cardiac, resp1, resp2 = channel_filters(FS)
        assert cardiac.mode == "pass"      # penalizes respiratory-band leakage
        assert resp1.mode == "stop"        # penalizes out-of-band leakage
        assert resp1 is resp2


class TestPreprocess:
    def _tones(self, T, freqs, amps):
        t = np.arange(T) / FS
        return sum(a * np.sin(2 * np.pi * f * t + 0.3) for f, a in zip(freqs, amps))

    def test_high_frequency_attenuated(self):
        # row standardization preserves within-row ratios, so attenuation is
        # measured as the 5 Hz : 0.8 Hz bin ratio, output vs input
        T = 1024
        row = self._tones(T, [0.8, 5.0], [1.0, 1.0])
        Y = np.stack([row, self._tones(T, [0.4], [1.0])])
        out, kept = preprocess_navigators(Y, FS)
        f = np.fft.rfftfreq(T, 1 / FS)
        b5, b08 = np.argmin(np.abs(f - 5.0)), np.argmin(np.abs(f - 0.8))
        spec_in = np.abs(np.fft.rfft(row))
        spec_out = np.abs(np.fft.rfft(out[0]))
        atten = (spec_out[b5] / spec_out[b08]) / (spec_in[b5] / spec_in[b08])
        assert atten < 0.1  # >= 20 dB

    def test_polynomial_drift_absorbed(self):
        # a pure cubic drift row collapses into the degree-8 fit and is
        # dropped as zero-variance; drift on top of a tone leaves the tone
        T = 512
        t = np.linspace(-1, 1, T)
        drift = 3.0 + 2.0 * t - 1.5 * t**2 + 0.7 * t**3
        k_tone = 14  # exact FFT bin (~0.31 Hz) so energy stays in one bin
        tone = 1e-3 * np.sin(2 * np.pi * k_tone * np.arange(T) / T)
        Y = np.stack([drift, drift + tone, self._tones(T, [0.5], [1.0])])
        out, kept = preprocess_navigators(Y, FS)
        assert 0 not in kept  # pure drift row dropped
        mixed = out[list(kept).index(1)]
        spec = np.abs(np.fft.rfft(mixed)) ** 2
        band = spec[k_tone - 1:k_tone + 2].sum()
        assert band / spec[1:].sum() > 0.95

    def test_physiological_band_survives(self):
        T = 1024
        k1, k2 = 23, 108  # exact bins: 0.255 Hz and 1.198 Hz
        t = np.arange(T)
        row = np.sin(2 * np.pi * k1 * t / T) + np.sin(2 * np.pi * k2 * t / T)
        row_n = (row - row.mean()) / row.std()
        Y = np.stack([row, np.sin(2 * np.pi * 40 * t / T)])
        out, _ = preprocess_navigators(Y, FS)
        si, so = np.abs(np.fft.rfft(row_n)), np.abs(np.fft.rfft(out[0]))
        assert so[k1] / si[k1] >= 0.9
        assert so[k2] / si[k2] >= 0.9

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            preprocess_navigators(np.zeros((4, 32)), FS)


class TestLoss:
    def test_zero_params_on_zero_data(self):
        # zero residual: only the smoothing floor eps per DFT bin remains
        params = AutoencoderParams.init(6, (8, 4), seed=0)
        for k in params.weights:
            params.weights[k] = np.zeros_like(params.weights[k])
        Y = np.zeros((6, 128))
        filters = channel_filters(FS)
        loss, grads, aux = autoencoder_loss(params, Y, filters, 1.0)
        assert loss <= 6 * 128 * SMOOTH_L1_EPS * 1.01
        assert all(np.all(g == 0) for g in grads.values())

    def test_zero_params_reproduce_dft_l1_oracle(self):
        rng = np.random.default_rng(0)
        params = AutoencoderParams.init(5, (8, 4), seed=0)
        for k in params.weights:
            params.weights[k] = np.zeros_like(params.weights[k])
        Y = rng.standard_normal((5, 64))
        loss, _, aux = autoencoder_loss(params, Y, channel_filters(FS), 0.0)
        oracle = np.abs(np.fft.fft(-Y, axis=1)).sum()  # residual is -Y
        assert loss == pytest.approx(oracle, rel=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        params = AutoencoderParams.init(7, (6, 4), seed=2)
        Y = rng.standard_normal((7, 96))
        filters = channel_filters(FS)
        lam = 3.0
        loss, grads, _ = autoencoder_loss(params, Y, filters, lam)
        h = 1e-6
        for key in ("enc_w0", "enc_b1", "enc_w2", "dec_w0", "dec_w2", "dec_b2"):
            d = rng.standard_normal(params.weights[key].shape)
            orig = params.weights[key].copy()
            params.weights[key] = orig + h * d
            lp = autoencoder_loss(params, Y, filters, lam)[0]
            params.weights[key] = orig - h * d
            lm = autoencoder_loss(params, Y, filters, lam)[0]
            params.weights[key] = orig
            fd = (lp - lm) / (2 * h)
            an = float(np.sum(grads[key] * d))
            assert abs(fd - an) / max(abs(fd), 1e-9) < 1e-4, key

    def test_band_penalty_matches_direct_convolution(self):
        # respiratory-band-only cardiac channel: penalty equals the direct
        # convolution energy, computed independently here
        rng = np.random.default_rng(3)
        T = 256
        t = np.arange(T) / FS
        Z = np.stack([np.sin(2 * np.pi * 0.3 * t),          # in resp band
                      rng.standard_normal(T),
                      rng.standard_normal(T)])
        filters = channel_filters(FS)
        pen, g = band_penalty(Z, filters)
        direct = 0.0
        for ch, filt in enumerate(filters):
            full = np.convolve(Z[ch], filt.taps)
            k0 = (len(filt.taps) - 1) // 2
            y = full[k0:k0 + T]
            direct += float(y @ y)
        assert pen == pytest.approx(direct, abs=1e-10 * max(direct, 1))

    def test_band_penalty_adjoint(self):
        rng = np.random.default_rng(4)
        Z = rng.standard_normal((3, 128))
        filters = channel_filters(FS)
        pen, g = band_penalty(Z, filters)
        d = rng.standard_normal(Z.shape)
        h = 1e-6
        fd = (band_penalty(Z + h * d, filters)[0] - band_penalty(Z - h * d, filters)[0]) / (2 * h)
        assert abs(fd - float(np.sum(g * d))) / max(abs(fd), 1e-9) < 1e-6

    def test_negative_lambda_rejected(self):
        params = AutoencoderParams.init(4, (4,), seed=0)
        with pytest.raises(ValueError):
            autoencoder_loss(params, np.zeros((4, 64)), channel_filters(FS), -1.0)


@pytest.fixture(scope="module")
def sim_navigators():
    spec = PhantomSpec()
    T = 512
    traj = kooshball_trajectory(T * 22, 4, 22)
    ds = simulate_acquisition(spec, traj, (24, 24, 24), 9.0,
                              coil_count=2, seed=0, kspace=False)
    Y, _ = preprocess_navigators(ds.navigators, 1 / ds.frame_seconds)
    return spec, ds, Y


class TestTraining:
    def test_constant_navigators_give_constant_latents(self):
        params = AutoencoderParams.init(5, (6, 4), seed=0)
        Y = np.full((5, 80), 0.7)
        Z = encode(params, Y)
        assert np.allclose(Z, Z[:, :1])

    def test_disentangles_simulated_motion(self, sim_navigators):
        spec, ds, Y = sim_navigators
        fs = 1 / ds.frame_seconds
        cfg = LatentTrainConfig(iters=3000, seed=0, log_every=0)
        params, lat, hist = train_autoencoder(Y, fs, cfg, ds.frame_times)
        pc, pr = ds.truth_phases[:, 0], ds.truth_phases[:, 1]
        assert aligned_phase_corr(lat.channel("cardiac"), pc) >= 0.9
        assert phase_subspace_corr(lat.Z[1:3], pr) >= 0.9
        assert band_energy_fraction(lat.channel("cardiac"), fs, 0.05, 0.7) <= 0.10
        for ch in ("resp1", "resp2"):
            assert band_energy_fraction(lat.channel(ch), fs, 0.05, 0.7) >= 0.80

    def test_larger_lambda_reduces_band_leakage(self, sim_navigators):
        spec, ds, Y = sim_navigators
        fs = 1 / ds.frame_seconds
        leak = []
        for lam in (1e3, 2e3):
            cfg = LatentTrainConfig(lam=lam, iters=800, seed=0, restarts=1, log_every=0)
            _, lat, hist = train_autoencoder(Y, fs, cfg, ds.frame_times)
            leak.append(hist["band_penalty"][-1])
        assert leak[1] <= leak[0] * 1.05

    def test_latent_series_validation(self):
        with pytest.raises(ValueError):
            LatentSeries(np.zeros((2, 10)), np.arange(10))
        with pytest.raises(ValueError):
            LatentSeries(np.full((3, 10), np.nan), np.arange(10))
