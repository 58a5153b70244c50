"""Tests for super-resolution recovery: operator, sparse solvers, peak
localization, the unrolled network and the detection metrics."""

import dataclasses

import numpy as np
import pytest
from scipy.signal import convolve2d, fftconvolve

from echokit import nn, sim, ulm
from echokit.core import ConfigError, DataError, NumericalError


@pytest.fixture(scope="module")
def small_op():
    rng = np.random.default_rng(7)
    psf = np.abs(rng.normal(size=(5, 5))) + 0.1
    return ulm.build_operator(psf, (8, 8), factor=2)


# ---------------------------------------------------------------------------
# measurement operator


def test_forward_matches_direct_convolution(small_op):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(16, 16))
    want = convolve2d(x, small_op.psf, mode="same")[1::2, 1::2]
    np.testing.assert_allclose(small_op.forward(x), want, atol=1e-12)


def test_adjoint_identity(small_op):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
    y = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    lhs = np.vdot(y, small_op.forward(x))
    rhs = np.vdot(small_op.adjoint(y), x)
    assert abs(lhs - rhs) < 1e-10 * max(abs(lhs), 1.0)


def test_delta_psf_factor_one_is_identity():
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    op = ulm.build_operator(delta, (6, 6), factor=1)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 6))
    np.testing.assert_allclose(op.forward(x), x, atol=1e-12)
    np.testing.assert_allclose(op.adjoint(x), x, atol=1e-12)
    assert op.mu_max == pytest.approx(1.0, rel=1e-8)


def test_spike_reproduces_shifted_psf():
    psf = sim.make_psf(1.0, 1.0)
    op = ulm.build_operator(psf, (20, 20), factor=1)
    x = np.zeros((20, 20))
    x[12, 7] = 1.0
    out = op.forward(x)
    hw = psf.shape[0] // 2
    np.testing.assert_allclose(
        out[12 - hw:12 + hw + 1, 7 - hw:7 + hw + 1], psf, atol=1e-12)


def test_mu_max_matches_dense_svd(small_op):
    rows = []
    for k in range(16 * 16):
        e = np.zeros(16 * 16)
        e[k] = 1.0
        rows.append(small_op.forward(e.reshape(16, 16)).ravel())
    dense = np.array(rows).T
    top = np.linalg.svd(dense, compute_uv=False)[0]
    assert small_op.mu_max == pytest.approx(top, rel=1e-6)


def test_operator_accepts_image_grid():
    psf = sim.make_psf(1.0, 1.0)
    g = sim.ImageGrid(8, 8, upscale=4)
    op = ulm.build_operator(psf, g)
    assert op.factor == 4
    assert op.hr_shape == (32, 32)
    assert op.offset == 2


def test_operator_validations():
    psf = sim.make_psf(1.0, 1.0)
    with pytest.raises(ConfigError):
        ulm.build_operator(psf, (8, 8))          # factor missing
    with pytest.raises(ConfigError):
        ulm.build_operator(psf, (8, 8), factor=0)
    with pytest.raises(ConfigError):
        ulm.build_operator(np.ones((4, 5)), (8, 8), factor=2)
    with pytest.raises(ConfigError):
        ulm.build_operator(np.ones((33, 33)), (8, 8), factor=2)
    bad = psf.copy()
    bad[0, 0] = np.nan
    with pytest.raises(DataError):
        ulm.build_operator(bad, (8, 8), factor=2)
    with pytest.raises(ConfigError):
        ulm.build_operator(psf, (8, 8), factor=2).forward(np.zeros((8, 8)))
    with pytest.raises(ConfigError):
        ulm.build_operator(psf, (8, 8), factor=2).adjoint(np.zeros((16, 16)))


# ---------------------------------------------------------------------------
# sparse recovery


def identity_op(n=12):
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    return ulm.build_operator(delta, (n, n), factor=1)


def test_single_step_is_shrinkage():
    op = identity_op()
    rng = np.random.default_rng(4)
    y = rng.normal(size=(12, 12))
    x, obj = ulm.ista_recover(y, op, lam=0.3, mu=1.0, n_iters=1)
    np.testing.assert_allclose(x, np.maximum(y - 0.3, 0.0), atol=1e-12)
    assert len(obj) == 1


def test_lambda_above_lambda_max_recovers_zero(small_op):
    rng = np.random.default_rng(5)
    y = rng.normal(size=(8, 8))
    lam = 1.001 * ulm.lambda_max(small_op, y)
    x, _ = ulm.ista_recover(y, small_op, lam, n_iters=40)
    assert np.all(x == 0.0)


def test_ista_objective_monotone(small_op):
    rng = np.random.default_rng(6)
    y = rng.normal(size=(8, 8))
    lam = 0.05 * ulm.lambda_max(small_op, y)
    _, obj = ulm.ista_recover(y, small_op, lam, n_iters=60, variant="ista")
    assert np.all(np.diff(obj) <= 1e-12)


def test_fista_accelerates_over_ista(small_op):
    rng = np.random.default_rng(8)
    y = rng.normal(size=(8, 8))
    lam = 0.05 * ulm.lambda_max(small_op, y)
    _, obj_f = ulm.ista_recover(y, small_op, lam, n_iters=100, variant="fista")
    _, obj_i = ulm.ista_recover(y, small_op, lam, n_iters=100, variant="ista")
    for k in (9, 29, 99):
        assert obj_f[k] <= obj_i[k] + 1e-9


def test_fista_matches_ten_times_longer_ista():
    psf = sim.make_psf(1.5, 1.5)
    op = ulm.build_operator(psf, (16, 16), factor=2)
    rng = np.random.default_rng(8)
    x = np.zeros((32, 32))
    x[rng.integers(0, 32, 6), rng.integers(0, 32, 6)] = rng.uniform(1, 3, 6)
    y = op.forward(x) + 0.01 * rng.normal(size=(16, 16))
    lam = 0.05 * ulm.lambda_max(op, y)
    _, obj_f = ulm.ista_recover(y, op, lam, n_iters=100, variant="fista")
    _, obj_i = ulm.ista_recover(y, op, lam, n_iters=1000, variant="ista")
    assert obj_f[-1] <= obj_i[-1]


def test_noiseless_spike_recovered_on_exact_pixel():
    psf = sim.make_psf(1.5, 1.5)
    op = ulm.build_operator(psf, (16, 16), factor=2)
    x_true = np.zeros((32, 32))
    x_true[13, 19] = 2.0
    y = op.forward(x_true)
    lam = 1e-4 * ulm.lambda_max(op, y)
    x, _ = ulm.ista_recover(y, op, lam, n_iters=800, variant="fista")
    assert np.unravel_index(np.argmax(x), x.shape) == (13, 19)
    assert x[13, 19] == pytest.approx(2.0, rel=0.05)


def test_divergent_step_raises(small_op):
    rng = np.random.default_rng(9)
    y = rng.normal(size=(8, 8))
    # lie about the operator norm so the default step is far too large
    fake = dataclasses.replace(small_op, mu_max=small_op.mu_max / 100.0)
    with pytest.raises(NumericalError, match="mu"):
        ulm.ista_recover(y, fake, lam=0.01, n_iters=400)


def test_ista_validations(small_op):
    y = np.zeros((8, 8))
    with pytest.raises(ConfigError):
        ulm.ista_recover(y, small_op, lam=-1.0)
    with pytest.raises(ConfigError):
        ulm.ista_recover(y, small_op, lam=0.1, variant="nesterov")
    with pytest.raises(ConfigError):
        ulm.ista_recover(y, small_op, lam=0.1, mu=10.0)
    with pytest.raises(ConfigError):
        ulm.ista_recover(y, small_op, lam=0.1, n_iters=0)
    with pytest.raises(ConfigError):
        ulm.ista_recover(np.zeros((5, 5)), small_op, lam=0.1)


# ---------------------------------------------------------------------------
# classic localization


def test_single_bubble_localized_to_subpixel():
    psf = sim.make_psf(4.8, 4.8)
    g = sim.ImageGrid(16, 16, upscale=8)
    fr = sim.simulate_ulm_frames(g, psf, 1, 1, 0.0, 17)[0]
    truth = np.argwhere(fr.x_true > 0)[0]
    env = np.abs(fr.y)
    loc = ulm.classic_ulm(fr.y, 0.5 * env.max(), 2.0, factor=8)
    assert len(loc) == 1
    err = np.sqrt(((loc.positions[0] - truth) ** 2).sum())
    assert err < 0.1 * 8      # a tenth of a low-res pixel, in high-res units


def test_empty_frame_yields_no_detections():
    loc = ulm.classic_ulm(np.zeros((10, 10)), 0.5)
    assert len(loc) == 0
    assert loc.positions.shape == (0, 2)


def test_unresolved_pair_merges_into_one_detection():
    frame = np.zeros((40, 40))
    frame[20, 18] = 1.0
    frame[20, 22] = 1.0
    blurred = fftconvolve(frame, sim.make_psf(3.0, 3.0), mode="same")
    loc = ulm.classic_ulm(blurred, 0.3 * blurred.max(), 2.0)
    assert len(loc) == 1
    assert abs(loc.positions[0][1] - 20.0) < 0.5   # centroid lands between them


def test_min_separation_keeps_strongest():
    frame = np.zeros((20, 20))
    frame[5, 5] = 1.0
    frame[5, 8] = 0.6
    frame[14, 14] = 0.8
    loc = ulm.classic_ulm(frame, 0.1, min_separation=5.0)
    assert len(loc) == 2
    assert loc.intensities[0] in (1.0, 0.8)
    assert 0.6 not in loc.intensities


def test_positions_fold_in_decimation_offset():
    frame = np.zeros((16, 16))
    frame[6, 9] = 1.0
    loc = ulm.classic_ulm(frame, 0.5, factor=4)
    np.testing.assert_allclose(loc.positions[0], [6 * 4 + 2, 9 * 4 + 2])


def test_stack_input_gives_per_frame_sets():
    stack = np.zeros((3, 10, 10))
    stack[1, 4, 4] = 1.0
    out = ulm.classic_ulm(stack, 0.5)
    assert isinstance(out, list) and len(out) == 3
    assert [len(s) for s in out] == [0, 1, 0]


def test_classic_rejects_higher_rank_input():
    with pytest.raises(ConfigError):
        ulm.classic_ulm(np.zeros((2, 2, 2, 2)), 0.5)


def test_localization_set_validations():
    with pytest.raises(ConfigError):
        ulm.LocalizationSet(np.zeros((2, 3)), np.ones(2), (10, 10))
    with pytest.raises(ConfigError):
        ulm.LocalizationSet(np.zeros((2, 2)), np.ones(3), (10, 10))
    with pytest.raises(DataError):
        ulm.LocalizationSet(np.zeros((1, 2)), np.zeros(1), (10, 10))
    with pytest.raises(DataError):
        ulm.LocalizationSet(np.array([[20.0, 5.0]]), np.ones(1), (10, 10))


# ---------------------------------------------------------------------------
# accumulation


def test_accumulate_single_frame_is_identity():
    rng = np.random.default_rng(10)
    f = rng.normal(size=(6, 6))
    np.testing.assert_array_equal(ulm.accumulate([f]), f)


def test_accumulate_two_frames_order_invariant():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(2, 6, 6))
    np.testing.assert_array_equal(ulm.accumulate([a, b]), ulm.accumulate([b, a]))


def test_accumulate_many_frames_matches_sum():
    rng = np.random.default_rng(12)
    frames = list(rng.normal(size=(5, 4, 4)))
    np.testing.assert_allclose(ulm.accumulate(frames), np.sum(frames, axis=0),
                               atol=1e-12)


def test_accumulate_bins_localizations():
    a = ulm.LocalizationSet(np.array([[2.2, 3.6], [0.0, 0.0]]),
                            np.array([1.0, 2.0]), (6, 6))
    b = ulm.LocalizationSet(np.array([[2.0, 4.0]]), np.array([0.5]), (6, 6))
    img = ulm.accumulate([a, b])
    assert img[2, 4] == pytest.approx(1.5)    # 2.2,3.6 rounds onto 2,4
    assert img[0, 0] == pytest.approx(2.0)
    assert img.sum() == pytest.approx(3.5)


def test_accumulate_validations():
    with pytest.raises(ConfigError):
        ulm.accumulate([])
    with pytest.raises(ConfigError):
        ulm.accumulate([np.zeros((3, 3)), np.zeros((4, 4))])
    a = ulm.LocalizationSet(np.zeros((0, 2)), np.zeros(0), (6, 6))
    b = ulm.LocalizationSet(np.zeros((0, 2)), np.zeros(0), (8, 8))
    with pytest.raises(ConfigError):
        ulm.accumulate([a, b])


# ---------------------------------------------------------------------------
# unfolded network


def test_default_parameter_count():
    params = ulm.init_unfolded_ulm()
    assert params.param_count() == 510
    assert params.k_layers == 10


def test_zero_input_gives_zero_output():
    params = ulm.init_unfolded_ulm(k_layers=3, seed=1)
    out = ulm.unfolded_ulm_forward(np.zeros((8, 8)), params)
    np.testing.assert_array_equal(out, np.zeros((64, 64)))


def test_forward_matches_autodiff_graph():
    params = ulm.init_unfolded_ulm(k_layers=3, seed=2, factor=4)
    rng = np.random.default_rng(13)
    y = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
    fast = ulm.unfolded_ulm_forward(y, params)
    pvars = ulm._vars_from_unfolded(params)
    u = ulm._upsampled_input(y, params)[None]    # channel axis
    graph = ulm._unfolded_graph(nn.as_var(u), pvars, params.k_layers,
                                params.beta)
    np.testing.assert_allclose(fast, graph.value[0], atol=1e-12)


def test_unfolded_mimics_ista_on_identity_problem():
    # delta psf at factor 1 with unit step: both reduce to one-sided
    # shrinkage of y itself, so the unrolled net must reproduce ista
    # up to the (steep) sigmoid gate.
    rng = np.random.default_rng(14)
    y = rng.uniform(0.5, 1.5, size=(12, 12))
    y[rng.random(size=(12, 12)) < 0.3] = 0.0
    delta = np.zeros((5, 5))
    delta[2, 2] = 1.0
    params = ulm.unfolded_from_ista(delta, mu=1.0, lam=1e-9, k_layers=4,
                                    factor=1, beta=50.0)
    out = ulm.unfolded_ulm_forward(y, params)
    op = ulm.build_operator(delta, (12, 12), factor=1)
    want, _ = ulm.ista_recover(y, op, lam=1e-9, mu=1.0, n_iters=4)
    np.testing.assert_allclose(out, want, atol=1e-9)


def test_checkpoint_roundtrip(tmp_path):
    params = ulm.init_unfolded_ulm(k_layers=2, seed=3)
    path = tmp_path / "net.npz"
    nn.save_checkpoint(path, params.to_values())
    back = ulm.UnfoldedUlmParams.from_values(nn.load_checkpoint(path))
    assert back.k_layers == 2
    assert back.beta == params.beta
    assert back.factor == params.factor
    rng = np.random.default_rng(15)
    y = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(ulm.unfolded_ulm_forward(y, params),
                                  ulm.unfolded_ulm_forward(y, back))


def test_params_validations():
    k = np.zeros((1, 1, 5, 5))
    with pytest.raises(ConfigError):
        ulm.UnfoldedUlmParams((k,), (k, k), np.zeros(1), 20.0, 8)
    with pytest.raises(ConfigError):
        ulm.UnfoldedUlmParams((k,), (k,), np.zeros(2), 20.0, 8)
    with pytest.raises(ConfigError):
        ulm.UnfoldedUlmParams((np.zeros((5, 5)),), (k,), np.zeros(1), 20.0, 8)
    with pytest.raises(ConfigError):
        ulm.UnfoldedUlmParams((k,), (k,), np.zeros(1), -1.0, 8)
    with pytest.raises(ConfigError):
        ulm.UnfoldedUlmParams.from_values({"beta": 20.0, "factor": 8})


def test_forward_rejects_non_frame_input():
    params = ulm.init_unfolded_ulm(k_layers=2, seed=4)
    with pytest.raises(ConfigError):
        ulm.unfolded_ulm_forward(np.zeros(16), params)


def smoke_training_data():
    psf = sim.make_psf(2.0, 2.0)
    g = sim.ImageGrid(8, 8, upscale=8)
    train = sim.simulate_ulm_frames(g, psf, 12, 2, 0.01, 42)
    val = sim.simulate_ulm_frames(g, psf, 4, 2, 0.01, 43)
    crop = ulm._center_crop(psf, 5)
    delta = np.zeros((5, 5))
    delta[2, 2] = 1.0
    init = ulm.UnfoldedUlmParams(
        tuple((0.05 * crop)[None, None].copy() for _ in range(3)),
        tuple(delta[None, None].copy() for _ in range(3)),
        np.full(3, 0.01), 20.0, 8)
    return train, val, init


def test_training_reduces_validation_loss():
    train, val, init = smoke_training_data()
    params, hist = ulm.unfolded_ulm_train(train, init, sigma_g=1.5,
                                          gamma=1e-4, epochs=3, lr=3e-3,
                                          batch_size=4, seed=0, val_data=val)
    vals = [h[2] for h in hist]
    assert len(hist) == 3
    assert min(vals) < vals[0]
    assert params.k_layers == 3
    # thresholds stay in their admissible range under the clamp
    assert np.all(params.lam >= 0.0)


def test_training_rejects_bad_config():
    train, val, init = smoke_training_data()
    with pytest.raises(ConfigError):
        ulm.unfolded_ulm_train([], init)
    with pytest.raises(ConfigError):
        ulm.unfolded_ulm_train(train, init, gamma=-1.0)
    with pytest.raises(ConfigError):
        ulm.unfolded_ulm_train(train, init, sigma_g=0.0)
    with pytest.raises(ConfigError):
        ulm.unfolded_ulm_train([object()], init)


def test_training_aborts_on_nan_input():
    train, val, init = smoke_training_data()
    bad = sim.GroundTruthFrame(y=np.full((8, 8), np.nan + 0j),
                               x_true=train[0].x_true, psf=train[0].psf)
    with pytest.raises(nn.TrainingDiverged):
        ulm.unfolded_ulm_train([bad] * 4, init, epochs=1)


# ---------------------------------------------------------------------------
# detection metrics


def loc(positions, intensities, shape=(64, 64)):
    return ulm.LocalizationSet(np.asarray(positions, dtype=float),
                               np.asarray(intensities, dtype=float), shape)


def test_perfect_match_scores_unity():
    a = loc([[10, 10], [20, 30]], [1.0, 2.0])
    m = ulm.ulm_metrics(a, a)
    assert m.precision == 1.0
    assert m.recall == 1.0
    assert m.loc_rmse == 0.0
    assert m.n_matched == 2


def test_hand_worked_mixed_case():
    est = loc([[10, 11], [30, 31.5], [50, 50]], [3.0, 2.0, 1.0])
    truth = loc([[10, 10], [30, 30]], [1.0, 1.0])
    m = ulm.ulm_metrics(est, truth, match_radius=2.0)
    assert m.precision == pytest.approx(2 / 3)
    assert m.recall == 1.0
    assert m.loc_rmse == pytest.approx(np.sqrt((1.0 + 1.5 ** 2) / 2))


def test_greedy_matching_prefers_brighter_estimate():
    est = loc([[10, 10], [10, 11]], [1.0, 5.0])
    truth = loc([[10, 10]], [1.0])
    m = ulm.ulm_metrics(est, truth, match_radius=3.0)
    assert m.n_matched == 1
    assert m.loc_rmse == pytest.approx(1.0)   # brighter but farther wins the greedy pass


def test_each_truth_matched_once():
    est = loc([[10, 10], [10, 10.5]], [1.0, 1.0])
    truth = loc([[10, 10]], [1.0])
    m = ulm.ulm_metrics(est, truth, match_radius=2.0)
    assert m.n_matched == 1
    assert m.precision == 0.5


def test_empty_estimates_flag_nan_precision():
    est = loc(np.zeros((0, 2)), np.zeros(0))
    truth = loc([[5, 5]], [1.0])
    m = ulm.ulm_metrics(est, truth)
    assert np.isnan(m.precision)
    assert m.recall == 0.0
    assert np.isnan(m.loc_rmse)


def test_empty_truth_flags_nan_recall():
    est = loc([[5, 5]], [1.0])
    truth = loc(np.zeros((0, 2)), np.zeros(0))
    m = ulm.ulm_metrics(est, truth)
    assert np.isnan(m.recall)
    assert m.precision == 0.0


def test_metrics_accept_truth_frames():
    frame = np.zeros((64, 64))
    frame[10, 10] = 1.0
    est = loc([[10, 10]], [1.0])
    m = ulm.ulm_metrics(est, frame)
    assert m.recall == 1.0 and m.precision == 1.0


def test_metrics_validations():
    est = loc([[5, 5]], [1.0])
    with pytest.raises(ConfigError):
        ulm.ulm_metrics(est, est, match_radius=0.0)
    with pytest.raises(ConfigError):
        ulm.ulm_metrics(est, np.zeros(5))
