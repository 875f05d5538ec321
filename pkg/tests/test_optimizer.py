import numpy as np
import pytest

from rgcl import optimizer
from rgcl.datasynth import gen_longtail_clusters
from rgcl.encoder import encode, init_encoder_params
from rgcl.loss import RgclConfig, ViewPairs, _anchor_h_rows, exact_grad_tau, g_value
from rgcl.numerics import RandomStream
from rgcl.optimizer import (
    AnchorState,
    grad_tau_estimator,
    grad_w_estimator,
    init_bimodal_optimizer_state,
    init_optimizer_state,
    load_optimizer_state,
    project_tau,
    sample_batch,
    save_optimizer_state,
    step_bimodal,
    step_sogclr_baseline,
    step_unimodal,
    update_s,
)
from rgcl.oracle import full_batch_reference


def exact_s_values(params, views, taus, cfg):
    ya = encode(params, views.views_a).embeddings
    yb = encode(params, views.views_b).embeddings
    hmat, _ = _anchor_h_rows(ya, yb)
    return np.array([g_value(hmat[i], taus[i], cfg.log_epsilon) for i in range(views.n)])


class TestSampleBatch:
    def test_full_batch_covers_all(self):
        idx, na, nb = sample_batch(RandomStream(0, ("b",)), 10, 10, 4)
        assert idx.tolist() == list(range(10))
        assert na.shape == (10, 4) and nb.shape == (10, 4)
        assert np.any(na != nb)

    def test_deterministic(self):
        a = sample_batch(RandomStream(1, ("b",)), 50, 8, 3)
        b = sample_batch(RandomStream(1, ("b",)), 50, 8, 3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_index_frequencies_uniform(self):
        n, b, draws = 10, 2, 10000
        counts = np.zeros(n)
        for t in range(draws):
            idx, _, _ = sample_batch(RandomStream(2, ("f", str(t))), n, b, 1)
            counts[idx] += 1
        expect = draws * b / n
        sigma = np.sqrt(draws * (b / n) * (1 - b / n))
        assert np.all(np.abs(counts - expect) <= 3 * sigma)

    def test_size_validation(self):
        with pytest.raises(ValueError):
            sample_batch(RandomStream(0), 10, 1, 2)
        with pytest.raises(ValueError):
            sample_batch(RandomStream(0), 10, 11, 2)


class TestUpdateS:
    def test_first_touch_takes_batch_value(self):
        state = AnchorState(s=1.0, u=0.0, tau=0.5, initialized=False)
        assert update_s(state, 3.7, beta0=0.1) == 3.7

    def test_arithmetic(self):
        state = AnchorState(s=1.0, u=0.0, tau=0.5, initialized=True)
        assert update_s(state, 3.0, beta0=0.5) == 2.0

    def test_geometric_convergence(self):
        state = AnchorState(s=10.0, u=0.0, tau=0.5, initialized=True)
        g, beta0 = 2.0, 0.25
        gap = state.s - g
        for _ in range(5):
            state.s = update_s(state, g, beta0)
            gap *= 1.0 - beta0
            assert state.s - g == pytest.approx(gap, abs=1e-12)

    def test_nonpositive_rejected(self):
        state = AnchorState(s=1.0, u=0.0, tau=0.5, initialized=True)
        with pytest.raises(ValueError):
            update_s(state, 0.0, beta0=0.5)


class TestGradTauEstimator:
    def test_constant_hardness(self):
        c, tau = 0.4, 0.5
        state = AnchorState(s=float(np.exp(c / tau)), u=0.0, tau=tau, initialized=True)
        got = grad_tau_estimator(state, np.full(6, c), rho=0.7, n=20, tau_grad_scale=5.0)
        assert got == pytest.approx(0.7 * 5.0 / 20, abs=1e-12)

    def test_full_batch_equals_exact(self):
        h = np.clip(RandomStream(3).normal(8), -2, 2)
        tau = 0.45
        state = AnchorState(s=g_value(h, tau), u=0.0, tau=tau, initialized=True)
        got = grad_tau_estimator(state, h, rho=0.3, n=4, tau_grad_scale=1.0)
        want = exact_grad_tau(h, tau, 0.3, n=4)
        assert abs(got - want) <= 1e-12

    def test_scale_linearity(self):
        h = np.clip(RandomStream(4).normal(5), -2, 2)
        state = AnchorState(s=1.3, u=0.0, tau=0.6, initialized=True)
        one = grad_tau_estimator(state, h, rho=0.3, n=7, tau_grad_scale=1.0)
        seven = grad_tau_estimator(state, h, rho=0.3, n=7, tau_grad_scale=7.0)
        assert seven == pytest.approx(7.0 * one, rel=1e-12)

    def test_uninitialized_rejected(self):
        state = AnchorState(s=1.0, u=0.0, tau=0.5, initialized=False)
        with pytest.raises(ValueError):
            grad_tau_estimator(state, np.zeros(3), rho=0.3, n=5, tau_grad_scale=1.0)


class TestGradWEstimator:
    def test_full_batch_with_exact_s_matches_reference(self):
        stream = RandomStream(5, ("gw",))
        params = init_encoder_params(4, 5, 3, "tanh", stream.split("enc"))
        views = ViewPairs(stream.split("a").normal(6, 4), stream.split("b").normal(6, 4))
        cfg = RgclConfig(rho=0.4, tau0=0.05, tau_init=0.6)
        taus = 0.2 + 0.5 * stream.split("tau").uniform(6)
        s = exact_s_values(params, views, taus, cfg)
        got = grad_w_estimator(params, views.views_a, views.views_b, taus, s)
        _, want, _ = full_batch_reference(params, views, taus, cfg)
        rel = np.linalg.norm(got - want) / np.linalg.norm(want)
        assert rel <= 1e-10

    def test_duplicated_anchor_symmetry(self):
        # two identical samples in the batch must contribute identically,
        # which shows up as equal hardness rows and equal weights
        stream = RandomStream(6, ("dup",))
        params = init_encoder_params(3, 4, 2, "tanh", stream.split("enc"))
        row_a = stream.split("ra").normal(1, 3)
        row_b = stream.split("rb").normal(1, 3)
        other = stream.split("o").normal(1, 3)
        va = np.vstack([row_a, row_a, other])
        vb = np.vstack([row_b, row_b, other + 0.1])
        ya = encode(params, va).embeddings
        yb = encode(params, vb).embeddings
        hmat, _ = _anchor_h_rows(ya, yb)
        np.testing.assert_allclose(np.sort(hmat[0]), np.sort(hmat[1]), atol=1e-14)

    def test_state_length_validated(self):
        stream = RandomStream(7, ("val",))
        params = init_encoder_params(3, 4, 2, "tanh", stream.split("enc"))
        v = stream.split("v").normal(4, 3)
        with pytest.raises(ValueError):
            grad_w_estimator(params, v, v, np.full(3, 0.5), np.ones(3))
        with pytest.raises(ValueError):
            grad_w_estimator(params, v, v, np.full(4, 0.5), np.zeros(4))


class TestProjectTau:
    def test_below_floor(self):
        cfg = RgclConfig(rho=0.3, tau0=0.005, tau_init=0.05)
        assert project_tau(0.001, cfg) == 0.005

    def test_interior_unchanged(self):
        cfg = RgclConfig(rho=0.3, tau0=0.05, tau_init=0.5)
        assert project_tau(0.5, cfg) == 0.5

    def test_above_ceiling(self):
        cfg = RgclConfig(rho=0.3, tau0=0.05, tau_init=0.5)
        assert project_tau(1e6, cfg) == pytest.approx(0.05 + 2.0 / 0.3)
        assert cfg.tau_max == pytest.approx(6.7167, abs=1e-4)


def training_setup(seed, n=24, d=5, beta0=0.9, beta1=0.9, eta_w=0.05, eta_tau=0.02,
                   tau_grad_scale=None, mode="momentum"):
    data = gen_longtail_clusters(3, n, 5.0, d, 0.3, seed)
    cfg = RgclConfig(rho=0.5, tau0=0.05, tau_init=0.6, beta0=beta0, beta1=beta1,
                     eta_w=eta_w, eta_tau=eta_tau, tau_grad_scale=tau_grad_scale)
    params = init_encoder_params(d, 6, 4, "tanh", RandomStream(seed, ("enc",)))
    opt = init_optimizer_state(n, params.n_params, cfg, seed, mode)
    return data, cfg, params, opt


class TestStepUnimodal:
    def test_exact_degeneration(self):
        # full batch, beta0 = beta1 = 1, scale 1, zero augmentation: every
        # step is exact gradient descent; recover the per-step gradients
        # from the parameter and temperature deltas
        n = 12
        data, _, params, _ = training_setup(0, n=n)
        cfg = RgclConfig(rho=0.5, tau0=0.05, tau_init=0.6, beta0=1.0, beta1=1.0,
                         eta_w=0.05, eta_tau=0.02, tau_grad_scale=1.0)
        opt = init_optimizer_state(n, params.n_params, cfg, seed=0)
        views = ViewPairs(data.inputs, data.inputs)
        for _ in range(5):
            _, ref_gw, ref_gt = full_batch_reference(params, views, opt.tau, cfg)
            before_w = params.flatten()
            before_tau = opt.tau.copy()
            params = step_unimodal(opt, params, data.inputs, cfg, n, 0.0)
            step_gw = (before_w - params.flatten()) / cfg.eta_w
            step_gt = (before_tau - opt.tau) / cfg.eta_tau
            assert np.linalg.norm(step_gw - ref_gw) / np.linalg.norm(ref_gw) <= 1e-10
            assert np.linalg.norm(step_gt - ref_gt) / np.linalg.norm(ref_gt) <= 1e-10
            # no clamping happened, otherwise the delta is not the gradient
            assert opt.tau.min() > cfg.tau0 and opt.tau.max() < cfg.tau_max

    def test_zero_learning_rates_freeze_model(self):
        data, _, params, _ = training_setup(1)
        cfg = RgclConfig(rho=0.5, tau0=0.05, tau_init=0.6, eta_w=0.0, eta_tau=0.0)
        opt = init_optimizer_state(24, params.n_params, cfg, seed=1)
        new_params = step_unimodal(opt, params, data.inputs, cfg, 8, 0.3)
        np.testing.assert_array_equal(new_params.flatten(), params.flatten())
        np.testing.assert_array_equal(opt.tau, np.full(24, 0.6))
        assert np.any(opt.initialized)  # bookkeeping still ran

    def test_deterministic_trajectory(self):
        runs = []
        for _ in range(2):
            data, cfg, params, opt = training_setup(2)
            for _ in range(10):
                params = step_unimodal(opt, params, data.inputs, cfg, 8, 0.3)
            runs.append((params.flatten(), opt.tau.copy(), opt.s.copy()))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        np.testing.assert_array_equal(runs[0][1], runs[1][1])
        np.testing.assert_array_equal(runs[0][2], runs[1][2])

    def test_tau_stays_in_box(self):
        data, _, params, _ = training_setup(3)
        # oversized temperature step: the projection must still contain tau
        cfg = RgclConfig(rho=0.5, tau0=0.05, tau_init=0.6, eta_tau=5.0, eta_w=0.05)
        opt = init_optimizer_state(24, params.n_params, cfg, seed=3)
        for _ in range(8):
            params = step_unimodal(opt, params, data.inputs, cfg, 8, 0.3)
        assert opt.min_tau_seen >= cfg.tau0 - 1e-15
        assert opt.max_tau_seen <= cfg.tau_max + 1e-15

    def test_projection_fault_injection(self):
        data, _, params, _ = training_setup(3)
        cfg = RgclConfig(rho=0.5, tau0=0.05, tau_init=0.6, eta_tau=5.0, eta_w=0.05)
        opt = init_optimizer_state(24, params.n_params, cfg, seed=3)
        opt._disable_tau_projection = True
        for _ in range(8):
            params = step_unimodal(opt, params, data.inputs, cfg, 8, 0.3)
        assert opt.min_tau_seen < cfg.tau0 or opt.max_tau_seen > cfg.tau_max

    def test_adam_mode_runs_and_differs(self):
        data, cfg, params, opt = training_setup(4, mode="adam")
        data2, cfg2, params2, opt2 = training_setup(4, mode="momentum")
        p1 = step_unimodal(opt, params, data.inputs, cfg, 8, 0.3)
        p2 = step_unimodal(opt2, params2, data2.inputs, cfg2, 8, 0.3)
        assert np.any(p1.flatten() != p2.flatten())


class TestBaseline:
    def test_eta_tau_zero_matches_baseline_bitwise(self):
        data, cfg0, params_a, _ = training_setup(5)
        cfg_zero = RgclConfig(rho=cfg0.rho, tau0=cfg0.tau0, tau_init=cfg0.tau_init,
                              beta0=cfg0.beta0, beta1=cfg0.beta1,
                              eta_w=cfg0.eta_w, eta_tau=0.0)
        opt_a = init_optimizer_state(24, params_a.n_params, cfg_zero, seed=5)
        params_b = params_a.copy()
        opt_b = init_optimizer_state(24, params_b.n_params, cfg0, seed=5)
        for _ in range(10):
            params_a = step_unimodal(opt_a, params_a, data.inputs, cfg_zero, 8, 0.3)
            params_b = step_sogclr_baseline(opt_b, params_b, data.inputs, cfg0, 8, 0.3)
            np.testing.assert_array_equal(params_a.flatten(), params_b.flatten())
            np.testing.assert_array_equal(opt_a.tau, opt_b.tau)
            np.testing.assert_array_equal(opt_a.s, opt_b.s)

    def test_tau_variance_zero(self):
        data, cfg, params, opt = training_setup(6)
        for _ in range(10):
            params = step_sogclr_baseline(opt, params, data.inputs, cfg, 8, 0.3)
        assert float(np.var(opt.tau)) == 0.0
        assert np.all(opt.tau == cfg.tau_init)


class TestStepBimodal:
    def mirrored_setup(self, seed, n=20, d=4):
        stream = RandomStream(seed, ("bi",))
        images = stream.split("x").normal(n, d)
        texts = images.copy()
        cfg = RgclConfig(rho=0.5, tau0=0.05, tau_init=0.6, eta_w=0.05, eta_tau=0.02)
        p_img = init_encoder_params(d, 6, 4, "tanh", stream.split("enc"))
        p_txt = p_img.copy()
        opt = init_bimodal_optimizer_state(n, p_img.n_params, p_txt.n_params, cfg, seed)
        return images, texts, cfg, p_img, p_txt, opt

    def test_mirrored_temperatures_identical_per_step(self):
        images, texts, cfg, p_img, p_txt, opt = self.mirrored_setup(7)
        for _ in range(6):
            p_img, p_txt = step_bimodal(opt, p_img, p_txt, images, texts, cfg, 8)
            np.testing.assert_array_equal(opt.tau_v, opt.tau_t)
            np.testing.assert_array_equal(opt.s_v, opt.s_t)
            np.testing.assert_array_equal(p_img.flatten(), p_txt.flatten())

    def test_deterministic(self):
        results = []
        for _ in range(2):
            images, texts, cfg, p_img, p_txt, opt = self.mirrored_setup(8)
            for _ in range(5):
                p_img, p_txt = step_bimodal(opt, p_img, p_txt, images, texts, cfg, 8)
            results.append((p_img.flatten(), opt.tau_v.copy()))
        np.testing.assert_array_equal(results[0][0], results[1][0])
        np.testing.assert_array_equal(results[0][1], results[1][1])

    def test_batch_size_validation(self):
        images, texts, cfg, p_img, p_txt, opt = self.mirrored_setup(9)
        with pytest.raises(ValueError):
            step_bimodal(opt, p_img, p_txt, images, texts, cfg, 1)


class TestCheckpoint:
    def test_round_trip_unimodal(self, tmp_path):
        data, cfg, params, opt = training_setup(10)
        for _ in range(6):
            params = step_unimodal(opt, params, data.inputs, cfg, 8, 0.3)
        path = str(tmp_path / "opt.ckpt")
        save_optimizer_state(opt, path)
        loaded = load_optimizer_state(path)
        assert loaded.mode == opt.mode and loaded.t == opt.t and loaded.seed == opt.seed
        np.testing.assert_array_equal(loaded.s, opt.s)
        np.testing.assert_array_equal(loaded.u, opt.u)
        np.testing.assert_array_equal(loaded.tau, opt.tau)
        np.testing.assert_array_equal(loaded.v, opt.v)
        np.testing.assert_array_equal(loaded.initialized, opt.initialized)
        assert loaded.min_g_seen == opt.min_g_seen
        assert loaded.max_tau_seen == opt.max_tau_seen

    def test_resume_is_bit_identical(self, tmp_path):
        # one 12-step run vs 6 steps, checkpoint, reload, 6 more steps
        data, cfg, params, opt = training_setup(11)
        straight = params.copy()
        opt_straight = init_optimizer_state(24, params.n_params, cfg, seed=11)
        for _ in range(12):
            straight = step_unimodal(opt_straight, straight, data.inputs, cfg, 8, 0.3)

        resumed = params.copy()
        for _ in range(6):
            resumed = step_unimodal(opt, resumed, data.inputs, cfg, 8, 0.3)
        path = str(tmp_path / "mid.ckpt")
        save_optimizer_state(opt, path)
        opt2 = load_optimizer_state(path)
        for _ in range(6):
            resumed = step_unimodal(opt2, resumed, data.inputs, cfg, 8, 0.3)
        np.testing.assert_array_equal(resumed.flatten(), straight.flatten())
        np.testing.assert_array_equal(opt2.tau, opt_straight.tau)
        np.testing.assert_array_equal(opt2.s, opt_straight.s)

    def test_round_trip_bimodal(self, tmp_path):
        n = 20
        cfg = RgclConfig(rho=0.5, tau0=0.05, tau_init=0.6)
        opt = init_bimodal_optimizer_state(n, 30, 40, cfg, seed=12)
        opt.tau_v[:] = 0.3
        opt.s_t[:] = 1.7
        path = str(tmp_path / "bi.ckpt")
        save_optimizer_state(opt, path)
        loaded = load_optimizer_state(path)
        np.testing.assert_array_equal(loaded.tau_v, opt.tau_v)
        np.testing.assert_array_equal(loaded.s_t, opt.s_t)
        assert loaded.v.shape == (70,)

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 100)
        with pytest.raises(ValueError):
            load_optimizer_state(str(path))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            init_optimizer_state(4, 10, RgclConfig(), 0, mode="sgd")
