import numpy as np
import pytest

from echokit import core, nn


def rnd(seed, *shape, cplx=False):
    g = core.rng(seed)
    x = g.standard_normal(shape)
    if cplx:
        x = x + 1j * g.standard_normal(shape)
    return x


# ---------------------------------------------------------------------------
# anti-rectifier

def test_anti_rectifier_two_point():
    out = nn.anti_rectifier(np.array([1.0, -1.0])).value
    s = 1 / np.sqrt(2)
    assert np.allclose(out, [s, 0, 0, s], atol=1e-10)


def test_anti_rectifier_constant_input_is_zero():
    out = nn.anti_rectifier(np.full(7, 3.25)).value
    assert np.all(out == 0)


def test_anti_rectifier_reconstruction_and_norm():
    x = rnd(3, 40)
    out = nn.anti_rectifier(x).value
    assert np.all(out >= 0)
    pos, negp = out[:40], out[40:]
    c = x - x.mean()
    c = c / np.sqrt((c ** 2).sum() + 1e-24)
    assert np.allclose(pos - negp, c, atol=1e-12)
    assert np.linalg.norm(out) <= 1 + 1e-9


def test_anti_rectifier_batched_is_per_sample():
    x = rnd(4, 5, 16)
    out = nn.anti_rectifier(x).value
    assert out.shape == (5, 32)
    for i in range(5):
        row = nn.anti_rectifier(x[i]).value
        assert np.allclose(out[i], row, atol=1e-14)
        assert np.linalg.norm(out[i]) <= 1 + 1e-9


# ---------------------------------------------------------------------------
# msle

def test_msle_zero_on_equal():
    y = rnd(5, 12)
    assert float(nn.msle_loss(y, y).value) == 0.0


def test_msle_sign_flip_positive():
    y = np.abs(rnd(6, 8)) + 0.1
    yhat = y.copy()
    yhat[3] = -yhat[3]
    assert float(nn.msle_loss(yhat, y).value) > 0


def test_msle_gradient_matches_fd():
    g = core.rng(7)
    vals = (0.5 + g.random(10)) * np.where(g.random(10) < 0.5, -1.0, 1.0)
    target = (0.5 + g.random(10)) * np.where(g.random(10) < 0.5, -1.0, 1.0)
    p = nn.parameter(vals)
    worst = nn.gradcheck(lambda: nn.msle_loss(p, target), {"p": p}, h=1e-6, n_directions=5)
    assert worst < 1e-5


# ---------------------------------------------------------------------------
# smooth threshold

def test_sigmoid_soft_threshold_examples():
    f = lambda x: float(nn.sigmoid_soft_threshold(np.array(x), 0.5, beta=50.0).value)
    assert f(0.0) == 0.0
    assert 1.19 < f(1.2) < 1.20
    assert f(0.1) < 1e-8


def test_sigmoid_soft_threshold_odd():
    x = rnd(9, 20)
    a = nn.sigmoid_soft_threshold(x, 0.3, beta=20.0).value
    b = nn.sigmoid_soft_threshold(-x, 0.3, beta=20.0).value
    assert np.allclose(a, -b, atol=1e-14)


def test_sigmoid_soft_threshold_bounded_and_hard_limit():
    x = rnd(10, 50)
    out = nn.sigmoid_soft_threshold(x, 0.4, beta=20.0).value
    assert np.all(np.abs(out) <= np.abs(x) + 1e-15)
    hard = nn.sigmoid_soft_threshold(x, 0.4, beta=5e4).value
    gate = np.where(np.abs(x) > 0.4, x, 0.0)
    assert np.max(np.abs(hard - gate)) < 1e-6


# ---------------------------------------------------------------------------
# conv2d

def conv_six_loops(x, k):
    O, C, kh, kw = k.shape
    H, W = x.shape[-2:]
    out = np.zeros((O, H, W), dtype=np.result_type(x.dtype, k.dtype))
    for o in range(O):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    for u in range(kh):
                        for v in range(kw):
                            ii, jj = i + u - kh // 2, j + v - kw // 2
                            if 0 <= ii < H and 0 <= jj < W:
                                out[o, i, j] += k[o, c, u, v] * x[c, ii, jj]
    return out


def test_conv2d_identity_kernel():
    x = rnd(11, 3, 9, 8)
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    assert np.allclose(nn.conv2d(x, k).value, x, atol=1e-15)


def test_conv2d_box_on_constant():
    x = np.full((1, 6, 6), 2.0)
    k = np.ones((1, 1, 3, 3))
    out = nn.conv2d(x, k).value
    assert np.allclose(out[0, 1:-1, 1:-1], 18.0, atol=1e-12)
    assert np.isclose(out[0, 0, 0], 8.0)  # corner sees 4 pixels


def test_conv2d_matches_six_loop_oracle():
    x = rnd(12, 3, 8, 7)
    k = rnd(13, 2, 3, 5, 5)
    assert np.max(np.abs(nn.conv2d(x, k).value - conv_six_loops(x, k))) < 1e-12
    xc = rnd(14, 2, 6, 6, cplx=True)
    kc = rnd(15, 3, 2, 3, 3, cplx=True)
    assert np.max(np.abs(nn.conv2d(xc, kc).value - conv_six_loops(xc, kc))) < 1e-12


def test_conv2d_batched_matches_unbatched():
    x = rnd(16, 4, 2, 6, 5)
    k = rnd(17, 3, 2, 3, 3)
    out = nn.conv2d(x, k).value
    for b in range(4):
        assert np.allclose(out[b], nn.conv2d(x[b], k).value, atol=1e-14)


def test_conv2d_linear_in_both_arguments():
    a, b = rnd(18, 2, 7, 7), rnd(19, 2, 7, 7)
    k1, k2 = rnd(20, 2, 2, 3, 3), rnd(21, 2, 2, 3, 3)
    lhs = nn.conv2d(a + b, k1).value
    rhs = nn.conv2d(a, k1).value + nn.conv2d(b, k1).value
    assert np.max(np.abs(lhs - rhs)) < 1e-12
    lhs = nn.conv2d(a, k1 + k2).value
    rhs = nn.conv2d(a, k1).value + nn.conv2d(a, k2).value
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_conv2d_even_kernel_rejected():
    with pytest.raises(core.ConfigError):
        nn.conv2d(rnd(22, 1, 4, 4), np.ones((1, 1, 2, 2)))
    with pytest.raises(core.ConfigError):
        nn.conv2d(rnd(23, 2, 4, 4), np.ones((1, 1, 3, 3)))  # channel mismatch


# ---------------------------------------------------------------------------
# backward

def test_backward_sum_of_squares():
    x = nn.parameter(rnd(24, 6))
    nn.backward(nn.vsum(nn.abs2(x)))
    assert np.allclose(x.grad, 2 * x.value, atol=1e-14)


def test_backward_accumulates_until_cleared():
    x = nn.parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        nn.backward(nn.vsum(nn.abs2(x)))
    assert np.allclose(x.grad, 4 * x.value)
    x.zero_grad()
    nn.backward(nn.vsum(nn.abs2(x)))
    assert np.allclose(x.grad, 2 * x.value)


def test_backward_conv_chain_matches_fd():
    x = rnd(25, 2, 6, 6)
    k1 = nn.parameter(rnd(26, 3, 2, 3, 3) * 0.5)
    k2 = nn.parameter(rnd(27, 1, 3, 3, 3) * 0.5)

    def loss():
        h = nn.relu(nn.conv2d(x, k1))
        return nn.vsum(nn.abs2(nn.conv2d(h, k2)))

    worst = nn.gradcheck(loss, {"k1": k1, "k2": k2}, h=1e-6)
    assert worst < 1e-4


def test_backward_disconnected_parameter_gets_zero_grad():
    x = nn.parameter(np.array([3.0]))
    unused = nn.parameter(np.array([[1.0, 2.0]]))
    nn.backward(nn.vsum(nn.abs2(x)), params=[x, unused])
    assert unused.grad is not None and np.all(unused.grad == 0)


def test_backward_rejects_unregistered_op():
    x = nn.parameter(np.array([1.0]))
    bogus = nn.Var(x.value * 2, "warp_drive", ((x, lambda gr: gr),))
    with pytest.raises(core.ConfigError):
        nn.backward(nn.vsum(nn.abs2(bogus)))


def test_backward_complex_parameter_descends():
    # gradient convention: w -= lr * grad reduces a real loss of a complex w
    w = nn.parameter(np.array([1.0 + 2.0j]))
    target = np.array([-0.5 + 0.25j])
    for _ in range(200):
        w.zero_grad()
        nn.backward(nn.vsum(nn.abs2(nn.sub(w, target))))
        w.value = w.value - 0.1 * w.grad
    assert np.abs(w.value - target).max() < 1e-8


# ---------------------------------------------------------------------------
# per-op randomized gradient checks

def _scalarize(v, seed):
    w = rnd(seed, *v.shape, cplx=np.iscomplexobj(v.value))
    return nn.vsum(nn.abs2(nn.mul(v, w)))


OP_CASES = {}


def op_case(name):
    def deco(fn):
        OP_CASES[name] = fn
        return fn
    return deco


@op_case("add")
def _(p):
    return _scalarize(nn.add(p["a"], p["b"]), 100)


@op_case("neg")
def _(p):
    return _scalarize(nn.neg(p["a"]), 101)


@op_case("mul")
def _(p):
    return _scalarize(nn.mul(p["a"], p["b"]), 102)


@op_case("matmul")
def _(p):
    return _scalarize(nn.matmul(p["m1"], p["m2"]), 103)


@op_case("conj")
def _(p):
    return _scalarize(nn.conj(p["c"]), 104)


@op_case("real")
def _(p):
    return _scalarize(nn.real(p["c"]), 105)


@op_case("abs2")
def _(p):
    return _scalarize(nn.abs2(p["c"]), 106)


@op_case("log")
def _(p):
    return _scalarize(nn.log(nn.add(nn.abs2(p["a"]), 0.5)), 107)


@op_case("sqrt")
def _(p):
    return _scalarize(nn.sqrt(nn.add(nn.abs2(p["a"]), 0.5)), 108)


@op_case("reciprocal")
def _(p):
    return _scalarize(nn._reciprocal(nn.add(nn.abs2(p["a"]), 0.5)), 109)


@op_case("relu")
def _(p):
    return _scalarize(nn.relu(nn.add(p["a"], 3.0)), 110)  # shifted off the kink


@op_case("sigmoid")
def _(p):
    return _scalarize(nn.sigmoid(p["a"]), 111)


@op_case("sum")
def _(p):
    return _scalarize(nn.vsum(p["m1"], axis=0), 112)


@op_case("mean")
def _(p):
    return _scalarize(nn.vmean(p["m1"], axis=1, keepdims=True), 113)


@op_case("reshape")
def _(p):
    return _scalarize(nn.reshape(p["m1"], (p["m1"].value.size,)), 114)


@op_case("concat")
def _(p):
    return _scalarize(nn.concat([p["a"], p["b"]], axis=0), 115)


@op_case("transpose")
def _(p):
    return _scalarize(nn.transpose(p["m2"], (1, 0)), 130)


@op_case("downsample")
def _(p):
    return _scalarize(nn.downsample(p["img"], 2), 116)


@op_case("upsample_zeros")
def _(p):
    return _scalarize(nn.upsample_zeros(p["img"], 2), 117)


@op_case("dropout")
def _(p):
    return _scalarize(nn.dropout(p["img"], 0.4, core.rng(55)), 118)


@op_case("conv2d")
def _(p):
    return _scalarize(nn.conv2d(p["img"], p["ker"]), 119)


@op_case("soft_threshold")
def _(p):
    return _scalarize(nn.soft_threshold(p["c"], p["alpha"]), 120)


@op_case("mixed_l12_threshold")
def _(p):
    return _scalarize(nn.mixed_l12_threshold(p["c"], p["alpha"]), 121)


@op_case("svt")
def _(p):
    return _scalarize(nn.svt(p["mat"], p["alpha_svt"]), 122)


@op_case("sigmoid_soft_threshold")
def _(p):
    return _scalarize(nn.sigmoid_soft_threshold(p["a"], p["alpha"], beta=8.0), 123)


@op_case("anti_rectifier")
def _(p):
    return _scalarize(nn.anti_rectifier(p["a"]), 124)


@op_case("msle")
def _(p):
    return nn.msle_loss(nn.add(p["a"], 4.0), np.full(p["a"].shape, 3.5))


def _gradcheck_params():
    p = {
        "a": nn.parameter(rnd(200, 6) + 0.05),
        "b": nn.parameter(rnd(201, 6)),
        "c": nn.parameter(rnd(202, 6, cplx=True) * 1.5),
        "m1": nn.parameter(rnd(203, 4, 3)),
        "m2": nn.parameter(rnd(204, 3, 5, cplx=True)),
        "img": nn.parameter(rnd(205, 2, 6, 6)),
        "ker": nn.parameter(rnd(206, 3, 2, 3, 3) * 0.5),
        "mat": nn.parameter(rnd(207, 6, 5, cplx=True)),
        "alpha": nn.parameter(np.array(0.7)),
        "alpha_svt": None,  # filled below, placed between singular values
    }
    s = np.linalg.svd(p["mat"].value, compute_uv=False)
    p["alpha_svt"] = nn.parameter(np.array((s[2] + s[3]) / 2))
    assert np.min(np.abs(s - p["alpha_svt"].value)) > 0.05  # away from the kink
    # keep |c| away from the soft-threshold kink at alpha
    mag = np.abs(p["c"].value)
    assert np.min(np.abs(mag - p["alpha"].value)) > 2e-2
    return p


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_registered_op_gradient_check(op):
    params = _gradcheck_params()
    loss = OP_CASES[op]
    active = {k: v for k, v in params.items() if isinstance(v, nn.Var)}
    tol = 1e-3 if op == "svt" else 1e-4
    worst = nn.gradcheck(lambda: loss(params), active, h=1e-6, n_directions=3)
    assert worst < tol, f"{op}: rel err {worst:.3e}"


def test_every_registered_op_has_a_gradcheck_case():
    missing = set(nn.REGISTERED_OPS) - set(OP_CASES) - {"msle"} | ({"msle"} - set(nn.REGISTERED_OPS))
    assert set(OP_CASES) >= set(nn.REGISTERED_OPS) - {"msle"}, missing


def test_conv2d_gradient_with_batched_complex_input():
    x = nn.parameter(rnd(212, 3, 2, 5, 5, cplx=True))
    k = nn.parameter(rnd(213, 2, 2, 3, 3, cplx=True) * 0.5)
    worst = nn.gradcheck(lambda: nn.vsum(nn.abs2(nn.conv2d(x, k))),
                         {"x": x, "k": k}, h=1e-6)
    assert worst < 1e-4


def test_svt_gradient_with_real_matrix():
    m = nn.parameter(rnd(210, 5, 4))
    s = np.linalg.svd(m.value, compute_uv=False)
    a = float((s[1] + s[2]) / 2)
    worst = nn.gradcheck(lambda: _scalarize(nn.svt(m, a), 211), {"m": m}, h=1e-6)
    assert worst < 1e-3


# ---------------------------------------------------------------------------
# trainer

def test_train_linear_regression_recovers_slope():
    g = core.rng(31)
    xs = g.standard_normal(64)
    data = [(x, 2.0 * x) for x in xs]
    w = nn.parameter(np.array(0.0))

    def loss(batch, rng):
        tot = None
        for x, y in batch:
            t = nn.abs2(nn.sub(nn.mul(w, x), y))
            tot = t if tot is None else nn.add(tot, t)
        return nn.mul(tot, 1.0 / len(batch))

    best, hist = nn.train({"w": w}, loss, data, val_data=data[:16],
                          epochs=60, batch_size=16, lr=0.1, seed=0)
    assert abs(float(best["w"]) - 2.0) < 1e-3
    assert hist[-1][1] < hist[0][1]


def test_train_fixed_seed_reproduces_history():
    g = core.rng(32)
    xs = g.standard_normal(32)
    data = [(x, 1.5 * x + 0.2) for x in xs]

    def run():
        w = nn.parameter(np.array(0.3))
        b = nn.parameter(np.array(0.0))

        def loss(batch, rng):
            tot = None
            for x, y in batch:
                pred = nn.add(nn.mul(w, x), b)
                pred = nn.dropout(pred, 0.1, rng)
                t = nn.abs2(nn.sub(pred, y))
                tot = t if tot is None else nn.add(tot, t)
            return nn.mul(tot, 1.0 / len(batch))

        _, hist = nn.train({"w": w, "b": b}, loss, data, val_data=data[:8],
                           epochs=5, batch_size=8, lr=0.05, seed=9)
        return hist

    h1, h2 = run(), run()
    assert h1 == h2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_aborts_on_nonfinite_loss_with_history():
    w = nn.parameter(np.array(1.0))
    data = [(1.0, 1.0)] * 4

    def loss(batch, rng):
        # minimizing +log(w) drives w negative at this step size, then NaN
        return nn.log(w)

    with pytest.raises(nn.TrainingDiverged) as exc:
        nn.train({"w": w}, loss, data, epochs=50, batch_size=4, lr=50.0, seed=0)
    assert isinstance(exc.value.history, list)


def test_train_returns_best_validation_params():
    # high learning rate makes validation non-monotone; best must match the min
    g = core.rng(33)
    xs = g.standard_normal(16)
    data = [(x, 2.0 * x) for x in xs]
    w = nn.parameter(np.array(10.0))

    def loss(batch, rng):
        tot = None
        for x, y in batch:
            t = nn.abs2(nn.sub(nn.mul(w, x), y))
            tot = t if tot is None else nn.add(tot, t)
        return nn.mul(tot, 1.0 / len(batch))

    best, hist = nn.train({"w": w}, loss, data, val_data=data, epochs=8,
                          batch_size=16, lr=2.0, seed=1)
    vals = [h[2] for h in hist]
    w.value = best["w"]
    refit = float(loss(data, None).value)
    assert refit <= min(vals) + 1e-12


def test_train_clamp_keeps_parameter_in_range():
    w = nn.parameter(np.array(0.5))
    data = [(1.0, 10.0)] * 4

    def loss(batch, rng):
        return nn.abs2(nn.sub(nn.mul(w, 1.0), 10.0))

    best, _ = nn.train({"w": w}, loss, data, epochs=20, batch_size=4, lr=1.0,
                       seed=0, clamp={"w": (0.0, 1.0)})
    assert 0.0 <= float(w.value) <= 1.0


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_and_order(tmp_path):
    vals = {
        "layer0/weight": rnd(40, 3, 4),
        "layer0/thresh": np.array(0.25),
        "layer1/weight": rnd(41, 2, 2, cplx=True),
    }
    d = tmp_path / "ckpt"
    nn.save_checkpoint(str(d), vals)
    back = nn.load_checkpoint(str(d))
    assert list(back) == list(vals)
    for k in vals:
        assert back[k].dtype == np.asarray(vals[k]).dtype
        assert np.array_equal(back[k], vals[k])


def test_checkpoint_bit_stable(tmp_path):
    vals = {"w": rnd(42, 5, 5, cplx=True), "lam": np.array(0.125)}
    d1, d2 = tmp_path / "a", tmp_path / "b"
    nn.save_checkpoint(str(d1), vals)
    nn.save_checkpoint(str(d2), vals)
    for name in ("w.ust", "lam.ust", "manifest.txt"):
        b1 = (d1 / name).read_bytes()
        b2 = (d2 / name).read_bytes()
        assert b1 == b2


def test_checkpoint_missing_manifest_rejected(tmp_path):
    with pytest.raises(core.DataError):
        nn.load_checkpoint(str(tmp_path))


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    d = tmp_path / "ckpt"
    nn.save_checkpoint(str(d), {"w": np.zeros((2, 3))})
    core.write_tensor(str(d / "w.ust"), np.zeros((3, 2)))
    with pytest.raises(core.DataError):
        nn.load_checkpoint(str(d))
