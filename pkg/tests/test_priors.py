import numpy as np
import pytest

from distillab import diffusion, imaging, priors


@pytest.fixture(scope="module")
def sched():
    return diffusion.make_schedule()


def _views(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return [np.clip(rng.uniform(0.2, 0.8, size=(size, size, 3))
                    + 0.1 * rng.standard_normal((size, size, 3)), 0, 1)
            for _ in range(n)]


class TestOracleConfig:
    def test_defaults(self):
        cfg = priors.OracleConfig()
        assert cfg.inconsistency_amplitude == 0.05
        assert cfg.max_blur_radius == 6.0

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            priors.OracleConfig(inconsistency_amplitude=-0.1)
        with pytest.raises(ValueError):
            priors.OracleConfig(guidance_calibration=0.0)


class TestOracleTargets:
    def test_uncond_target_is_mean_image(self, sched):
        views = _views()
        den = priors.OracleDenoiser(priors.OracleConfig(), views, sched)
        assert np.allclose(den.target(None, 16, 16), np.mean(views, axis=0))

    def test_cond_target_perturbation_rms(self, sched):
        views = _views()
        amp = 0.05
        den = priors.OracleDenoiser(priors.OracleConfig(inconsistency_amplitude=amp), views, sched)
        diff = den.target(1, 16, 16) - views[1]
        # clipping at [0,1] can only shrink the perturbation
        rms = float(np.sqrt(np.mean(diff**2)))
        assert 0.3 * amp < rms <= amp + 1e-12

    def test_perturbation_is_smooth(self, sched):
        views = _views(size=32)
        den = priors.OracleDenoiser(priors.OracleConfig(), views, sched)
        eta = den.target(0, 32, 32) - views[0]
        lo, hi = imaging.split_bands(eta, sigma=2.0)
        assert np.mean(hi**2) < 0.25 * np.mean(eta**2)

    def test_zero_amplitude_targets_equal_gt(self, sched):
        views = _views()
        den = priors.OracleDenoiser(priors.OracleConfig(inconsistency_amplitude=0.0), views, sched)
        for v in range(len(views)):
            assert np.allclose(den.target(v, 16, 16), views[v])

    def test_targets_deterministic_per_view(self, sched):
        views = _views()
        a = priors.OracleDenoiser(priors.OracleConfig(), views, sched)
        b = priors.OracleDenoiser(priors.OracleConfig(), views, sched)
        assert np.array_equal(a.target(2, 16, 16), b.target(2, 16, 16))
        assert not np.array_equal(a.target(1, 16, 16) - views[1],
                                  a.target(2, 16, 16) - views[2])


class TestOraclePredict:
    def test_high_noise_x0_approaches_target(self, sched):
        # at t = T the trust weight is near 1, so x0-hat ~ target
        views = _views()
        den = priors.OracleDenoiser(priors.OracleConfig(), views, sched)
        rng = np.random.default_rng(1)
        eps = rng.standard_normal((16, 16, 3))
        z = diffusion.q_sample(views[0], 1000, eps, sched)
        x0 = den.predict_x0(z, 1000, 0)
        w = sched.noise_to_signal(1000) / (sched.noise_to_signal(1000) + 1)
        assert w > 0.99
        assert np.mean(np.abs(x0 - den.target(0, 16, 16))) < 0.2

    def test_low_noise_x0_approaches_blurred_input(self, sched):
        views = _views()
        den = priors.OracleDenoiser(priors.OracleConfig(), views, sched)
        t = 10
        rho = sched.noise_to_signal(t)
        assert rho < 0.1
        rng = np.random.default_rng(2)
        z = diffusion.q_sample(views[0], t, rng.standard_normal((16, 16, 3)), sched)
        x_in = imaging.gaussian_blur(z / sched.sqrt_ab(t), den.cfg.max_blur_radius * rho)
        x0 = den.predict_x0(z, t, 0)
        w = rho / (rho + 1)
        assert np.allclose(x0, w * den.target(0, 16, 16) + (1 - w) * x_in, atol=1e-12)

    def test_blur_radius_saturates(self, sched):
        # above rho = 1 the input blur stops growing
        views = _views()
        den = priors.OracleDenoiser(priors.OracleConfig(), views, sched)
        z = np.full((16, 16, 3), 0.5)
        t_hi = 900
        assert sched.noise_to_signal(t_hi) > 1
        x_in_expect = imaging.gaussian_blur(z / sched.sqrt_ab(t_hi), den.cfg.max_blur_radius)
        w = sched.noise_to_signal(t_hi) / (sched.noise_to_signal(t_hi) + 1)
        want = w * den.target(0, 16, 16) + (1 - w) * x_in_expect
        assert np.allclose(den.predict_x0(z, t_hi, 0), want, atol=1e-12)

    def test_eps_x0_consistency(self, sched):
        views = _views()
        den = priors.OracleDenoiser(priors.OracleConfig(), views, sched)
        rng = np.random.default_rng(3)
        z = diffusion.q_sample(views[2], 400, rng.standard_normal((16, 16, 3)), sched)
        eps_hat = den.predict_eps(z, 400, 2)
        assert np.allclose(diffusion.eps_to_x0(z, eps_hat, 400, sched),
                           den.predict_x0(z, 400, 2), atol=1e-10)

    def test_rejects_t_zero(self, sched):
        den = priors.OracleDenoiser(priors.OracleConfig(), _views(), sched)
        with pytest.raises(ValueError):
            den.predict_x0(np.zeros((16, 16, 3)), 0, 0)

    def test_resolution_mismatch_resamples_target(self, sched):
        views = _views(size=16)
        den = priors.OracleDenoiser(priors.OracleConfig(inconsistency_amplitude=0.0), views, sched)
        tgt8 = den.target(0, 8, 8)
        assert tgt8.shape == (8, 8, 3)
        assert np.allclose(tgt8, imaging.resample(views[0], 8, 8), atol=1e-12)


class TestConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 6, 3))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        assert np.allclose(priors._conv3x3(x, w, np.zeros(3)), x)

    def test_matches_scipy(self):
        from scipy.ndimage import correlate
        rng = np.random.default_rng(5)
        x = rng.standard_normal((7, 5, 2))
        w = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        out = priors._conv3x3(x, w, b)
        for co in range(4):
            want = b[co]
            want = sum(correlate(x[:, :, ci], w[co, ci], mode="nearest") for ci in range(2)) + b[co]
            assert np.allclose(out[:, :, co], want, atol=1e-12)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((5, 4, 2))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        gout = rng.standard_normal((5, 4, 3))
        gx, gw, gb = priors._conv3x3_grad(x, w, gout)
        eps = 1e-6

        def loss(xx, ww, bb):
            return float(np.sum(priors._conv3x3(xx, ww, bb) * gout))

        for arr, g, idx in ((x, gx, (2, 1, 0)), (w, gw, (1, 0, 2, 2)), (b, gb, (2,))):
            ap = arr.copy(); ap[idx] += eps
            am = arr.copy(); am[idx] -= eps
            args_p = [ap if a is arr else a for a in (x, w, b)]
            args_m = [am if a is arr else a for a in (x, w, b)]
            fd = (loss(*args_p) - loss(*args_m)) / (2 * eps)
            assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestToyDenoiser:
    def test_view_embedding_changes_output(self, sched):
        net = priors.ToyDenoiser(n_views=3, seed=0)
        net.params["wv"] += np.random.default_rng(0).standard_normal(net.params["wv"].shape)
        z = np.random.default_rng(1).standard_normal((8, 8, 3))
        a = net.predict_eps(z, 100, 0)
        b = net.predict_eps(z, 100, 1)
        c = net.predict_eps(z, 100, None)
        assert not np.allclose(a, b)
        assert not np.allclose(a, c)

    def test_t_embedding_changes_output(self):
        net = priors.ToyDenoiser(n_views=2, seed=0)
        z = np.random.default_rng(2).standard_normal((8, 8, 3))
        assert not np.allclose(net.predict_eps(z, 50, 0), net.predict_eps(z, 800, 0))

    def test_backward_matches_finite_differences(self):
        net = priors.ToyDenoiser(n_views=2, seed=1)
        rng = np.random.default_rng(3)
        net.params["wv"] += 0.1 * rng.standard_normal(net.params["wv"].shape)
        z = rng.standard_normal((6, 6, 3))
        gout = rng.standard_normal((6, 6, 3))
        out, cache = net._forward(z, 123, 1)
        grads = {k: np.zeros_like(v) for k, v in net.params.items()}
        net._backward(cache, gout, grads)
        eps = 1e-6
        for name, idx in (("w1", (2, 1, 0, 2)), ("b2", (3,)), ("w3", (1, 4, 1, 1)),
                          ("wt", (2, 5)), ("wv", (1, 3))):
            orig = net.params[name][idx]
            net.params[name][idx] = orig + eps
            lp = float(np.sum(net._forward(z, 123, 1)[0] * gout))
            net.params[name][idx] = orig - eps
            lm = float(np.sum(net._forward(z, 123, 1)[0] * gout))
            net.params[name][idx] = orig
            assert grads[name][idx] == pytest.approx((lp - lm) / (2 * eps), rel=1e-4, abs=1e-7)

    def test_null_view_gradient_isolated(self):
        net = priors.ToyDenoiser(n_views=2, seed=0)
        rng = np.random.default_rng(4)
        z = rng.standard_normal((6, 6, 3))
        _, cache = net._forward(z, 10, None)
        grads = {k: np.zeros_like(v) for k, v in net.params.items()}
        net._backward(cache, rng.standard_normal((6, 6, 3)), grads)
        assert np.all(grads["wv"][:2] == 0)
        assert np.any(grads["wv"][2] != 0)

    def test_save_load_roundtrip(self, tmp_path):
        net = priors.ToyDenoiser(n_views=3, seed=5)
        rng = np.random.default_rng(5)
        for k in net.params:
            net.params[k] = net.params[k] + 0.01 * rng.standard_normal(net.params[k].shape)
        p = tmp_path / "toy.bin"
        net.save(p)
        back = priors.ToyDenoiser.load(p)
        assert back.n_views == 3
        z = rng.standard_normal((8, 8, 3))
        assert np.allclose(back.predict_eps(z, 77, 1), net.predict_eps(z, 77, 1), atol=1e-5)

    def test_rejects_t_zero(self):
        net = priors.ToyDenoiser(n_views=1)
        with pytest.raises(ValueError):
            net.predict_eps(np.zeros((4, 4, 3)), 0, 0)


class TestSmoothTrace:
    def test_constant_trace(self):
        assert np.allclose(priors.smooth_trace([2.0] * 10, window=3), 2.0)

    def test_trailing_average_oracle(self):
        trace = [4.0, 2.0, 6.0, 0.0]
        out = priors.smooth_trace(trace, window=2)
        assert np.allclose(out, [4.0, 3.0, 4.0, 3.0])

    def test_empty(self):
        assert priors.smooth_trace([]).size == 0


class TestToyTrain:
    def test_loss_decreases(self, sched):
        rng = np.random.default_rng(7)
        data = [(v, np.clip(rng.uniform(0, 1, size=(8, 8, 3)), 0, 1)) for v in range(4)]
        net = priors.ToyDenoiser(n_views=4, seed=0)
        net, trace = priors.toy_train(net, data, sched, steps=300, seed=0)
        sm = priors.smooth_trace(trace, window=50)
        assert sm[-1] < 0.7 * sm[49]

    def test_deterministic(self, sched):
        rng = np.random.default_rng(8)
        data = [(0, rng.uniform(0, 1, size=(8, 8, 3)))]
        n1, t1 = priors.toy_train(priors.ToyDenoiser(1, seed=0), data, sched, steps=20, seed=3)
        n2, t2 = priors.toy_train(priors.ToyDenoiser(1, seed=0), data, sched, steps=20, seed=3)
        assert np.array_equal(t1, t2)
        for k in n1.params:
            assert np.array_equal(n1.params[k], n2.params[k])

    def test_empty_dataset_rejected(self, sched):
        with pytest.raises(ValueError):
            priors.toy_train(priors.ToyDenoiser(1), [], sched, steps=1)
