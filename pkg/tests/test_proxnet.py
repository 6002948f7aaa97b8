import numpy as np
import pytest

from lpqsm.dipole import Orientation, PadSpec, dipole_kernel
from lpqsm.phantom import AcqTemplate, PhantomFamily, make_dataset
from lpqsm.proxnet import (
    ArchSpec,
    LearnedProx,
    ProxParams,
    TrainConfig,
    WeightFileError,
    init_params,
    load_params,
    loss_and_grads,
    prox_apply,
    save_params,
    train,
    unrolled_reconstruct,
    zero_params,
)
from lpqsm.proxnet import autodiff as ad
from lpqsm.proxnet.io import dumps_params, loads_params
from lpqsm.solver import DataTerm, DivergenceError, ReconConfig, pgd_reconstruct
from lpqsm.volcore import GridSpec


def random_params(arch, seed, shared=True, k=1, scale=0.3):
    """Every tensor random, including the zero-initialized ones."""
    rng = np.random.default_rng(seed)
    p = init_params(arch, rng, shared, k)
    for w in p.weights:
        w += scale * rng.uniform(-1, 1, w.shape)
    return p


def central_fd(f, x, eps=1e-4):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# --- forward behaviour -------------------------------------------------------------------


def test_arch_validation():
    for bad in [dict(blocks=0), dict(width=0), dict(kernel=2), dict(activation="tanh"), dict(dropout_rate=1.0)]:
        with pytest.raises(ValueError):
            ArchSpec(**bad)
    arch = ArchSpec(blocks=2, width=3)
    assert len(arch.tensor_shapes()) == len(arch.tensor_names()) == 4 + 4 * 2


def test_zero_and_fresh_weights_are_identity():
    z = np.random.default_rng(0).standard_normal((6, 7, 5))
    np.testing.assert_array_equal(prox_apply(zero_params(ArchSpec(blocks=2, width=4)), z), z)
    np.testing.assert_array_equal(prox_apply(init_params(ArchSpec(blocks=2, width=4), 0), z), z)


def test_laplacian_stencil_oracle():
    arch = ArchSpec(blocks=1, width=1, activation="linear")
    p = zero_params(arch)
    p.weights[0][0, 0, 1, 1, 1] = 1.0  # stem = delta
    lap = np.zeros((3, 3, 3))
    lap[1, 1, 1] = -6.0
    for a in range(3):
        idx = [1, 1, 1]
        for s in (0, 2):
            idx[a] = s
            lap[tuple(idx)] = 1.0
    p.weights[-2][0, 0] = lap
    z = np.random.default_rng(1).standard_normal((7, 6, 5))
    zp = np.pad(z, 1)
    c = zp[1:-1, 1:-1, 1:-1]
    stencil = (zp[2:, 1:-1, 1:-1] + zp[:-2, 1:-1, 1:-1] + zp[1:-1, 2:, 1:-1] + zp[1:-1, :-2, 1:-1]
               + zp[1:-1, 1:-1, 2:] + zp[1:-1, 1:-1, :-2] - 6 * c)
    assert np.max(np.abs(prox_apply(p, z) - (z + stencil))) <= 1e-12


def test_translation_equivariance_on_interior():
    arch = ArchSpec(blocks=2, width=3)
    p = random_params(arch, 2)
    z = np.random.default_rng(3).standard_normal((16, 16, 16))
    big = np.zeros((32, 32, 32))
    big[8:24, 8:24, 8:24] = z
    small_out = prox_apply(p, z)
    big_out = prox_apply(p, big)[8:24, 8:24, 8:24]
    r = 1 + 2 * arch.blocks + 1  # receptive-field radius for 3^3 kernels
    inner = (slice(r, 16 - r),) * 3
    assert np.max(np.abs(small_out[inner] - big_out[inner])) <= 1e-6
    # border effects are real, so the comparison is not vacuous
    assert np.max(np.abs(small_out - big_out)) > 1e-6


def test_prox_rejects_bad_input():
    p = zero_params(ArchSpec(blocks=1, width=1))
    with pytest.raises(ValueError):
        prox_apply(p, np.zeros((4, 4)))
    bad = np.zeros((4, 4, 4))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        prox_apply(p, bad)


def test_nonfinite_activation_reports_layer():
    arch = ArchSpec(blocks=1, width=1, activation="linear")
    p = zero_params(arch)
    p.weights[0][:] = 1e200
    with pytest.raises(FloatingPointError, match="layer 0"):
        prox_apply(p, np.full((4, 4, 4), 1e200))


# --- primitive gradients -----------------------------------------------------------------


def check_primitive(build, leaves, seed=0, tol=1e-4):
    """Compare reverse-mode and central FD for ``sum(R * build(*leaves))``."""
    out = build(*leaves)
    R = np.random.default_rng(seed).standard_normal(out.value.shape)
    ad.backward(out, R)

    def f():
        return float(np.sum(R * build(*[ad.leaf(v.value) for v in leaves]).value))

    for v in leaves:
        assert rel_err(v.grad, central_fd(f, v.value)) <= tol, v.name


def test_grad_conv3d():
    rng = np.random.default_rng(0)
    x = ad.leaf(rng.standard_normal((2, 5, 4, 6)), "x")
    w = ad.leaf(rng.standard_normal((3, 2, 3, 3, 3)), "w")
    b = ad.leaf(rng.standard_normal(3), "b")
    check_primitive(ad.conv3d, [x, w, b])


def test_grad_conv3d_kernel5_and_1():
    rng = np.random.default_rng(1)
    for k in (1, 5):
        x = ad.leaf(rng.standard_normal((1, 6, 6, 6)), "x")
        w = ad.leaf(rng.standard_normal((2, 1, k, k, k)), "w")
        b = ad.leaf(rng.standard_normal(2), "b")
        check_primitive(ad.conv3d, [x, w, b])


def test_conv3d_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 5, 3))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 5, 3))
    for o in range(3):
        for i, j, k in np.ndindex(4, 5, 3):
            ref[o, i, j, k] = np.sum(w[o] * xp[:, i:i + 3, j:j + 3, k:k + 3])
    np.testing.assert_allclose(ad.conv3d_same(x, w), ref, atol=1e-12)


def away_from_zero(shape, seed):
    v = np.random.default_rng(seed).standard_normal(shape)
    return v + 0.1 * np.sign(v)


@pytest.mark.parametrize("fn", [ad.leaky_relu, ad.elu, ad.ACTIVATIONS["relu"]])
def test_grad_activations(fn):
    check_primitive(fn, [ad.leaf(away_from_zero((1, 4, 4, 4), 3), "x")])


def test_grad_add_and_loss():
    rng = np.random.default_rng(4)
    a = ad.leaf(rng.standard_normal((1, 3, 3, 3)), "a")
    b = ad.leaf(rng.standard_normal((1, 3, 3, 3)), "b")
    check_primitive(ad.add, [a, b])
    target = rng.standard_normal((1, 3, 3, 3))
    check_primitive(lambda p: ad.sq_error(p, target), [ad.leaf(rng.standard_normal((1, 3, 3, 3)), "p")])


def test_grad_dropout_fixed_mask():
    x = ad.leaf(np.random.default_rng(5).standard_normal((2, 3, 3, 3)), "x")
    check_primitive(lambda v: ad.dropout(v, 0.5, np.random.default_rng(9)), [x])


def padded_term(seed, L=2, full=16, patch=8):
    rng = np.random.default_rng(seed)
    g = GridSpec((full,) * 3)
    ops = [dipole_kernel(g, Orientation.from_tilt(t, "x")) for t in (10, -25, 40)[:L]]
    pad = PadSpec((patch,) * 3, (3, 4, 5), g.dims)
    ys = [rng.standard_normal((patch,) * 3) for _ in ops]
    return DataTerm(ops, ys, pad)


def test_grad_dc_step_and_backproject():
    term = padded_term(6)
    rng = np.random.default_rng(7)
    x = ad.leaf(rng.standard_normal((1, 8, 8, 8)), "x")
    rhs = ad.leaf(rng.standard_normal((1, 8, 8, 8)), "rhs")
    check_primitive(lambda a, b: ad.dc_step(a, b, term, 0.8), [x, rhs])
    ys = [ad.leaf(y[None], f"y{i}") for i, y in enumerate(term.ys)]
    check_primitive(lambda *v: ad.backproject(list(v), term), ys)


def test_backward_requires_scalar_or_seed():
    v = ad.leaf(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.backward(v)
    with pytest.raises(ValueError):
        ad.backward(v, np.ones(3))


# --- unrolled pipeline gradients ----------------------------------------------------------


def test_full_pipeline_gradient_k2():
    # elu keeps the loss smooth so FD is not polluted by activation kinks
    arch = ArchSpec(blocks=3, width=2, activation="elu")
    params = random_params(arch, 8)
    term = padded_term(9)
    target = np.random.default_rng(10).standard_normal((8, 8, 8))
    g = loss_and_grads(params, term, target, alpha=0.9, k=2)

    def f():
        pred = unrolled_reconstruct(params, term, alpha=0.9, k=2)
        return float(np.sum((pred - target) ** 2))

    assert f() == pytest.approx(g.loss, rel=1e-14)
    for name, w, gw in zip(arch.tensor_names(), params.weights, g.weights):
        assert rel_err(gw, central_fd(f, w)) <= 1e-4, name
    # gradient with respect to each measurement
    for i, y in enumerate(term.ys):
        assert rel_err(g.inputs[i], central_fd(f, y)) <= 1e-4, f"y{i}"


def test_pipeline_gradient_per_iteration_weights_leaky():
    arch = ArchSpec(blocks=1, width=2)
    params = random_params(arch, 11, shared=False, k=2)
    term = padded_term(12, L=1)
    target = np.random.default_rng(13).standard_normal((8, 8, 8))
    g = loss_and_grads(params, term, target, k=2)

    def f():
        return float(np.sum((unrolled_reconstruct(params, term, k=2) - target) ** 2))

    for i in (0, len(params.weights) // 2, len(params.weights) - 2):
        assert rel_err(g.weights[i], central_fd(f, params.weights[i])) <= 1e-4
    with pytest.raises(ValueError):
        loss_and_grads(params, term, target, k=3)


def test_zero_loss_zero_gradients():
    arch = ArchSpec(blocks=2, width=2)
    params = random_params(arch, 14)
    term = padded_term(15)
    target = unrolled_reconstruct(params, term, k=2)
    g = loss_and_grads(params, term, target, k=2)
    assert g.loss == 0.0
    assert all(np.all(w == 0) for w in g.weights)
    assert all(np.all(y == 0) for y in g.inputs)


def test_linear_network_input_gradient_dense_oracle():
    arch = ArchSpec(blocks=1, width=2, activation="linear")
    params = random_params(arch, 16)
    g4 = GridSpec((4, 4, 4))
    op = dipole_kernel(g4, Orientation.from_tilt(30, "y"))
    rng = np.random.default_rng(17)
    y = rng.standard_normal(g4.dims)
    target = rng.standard_normal(g4.dims)

    def run(v):
        return unrolled_reconstruct(params, DataTerm([op], [v]), alpha=1.0, k=2).ravel()

    # affine map x_k = A y + c, assembled column by column
    c = run(np.zeros(g4.dims))
    A = np.stack([run(e.reshape(g4.dims)) - c for e in np.eye(g4.size)], axis=1)
    residual = A @ y.ravel() + c - target.ravel()
    expected = 2 * A.T @ residual
    g = loss_and_grads(params, DataTerm([op], [y]), target, alpha=1.0, k=2)
    assert np.max(np.abs(g.inputs[0].ravel() - expected)) <= 1e-10 * np.max(np.abs(expected))


# --- solver / trainer agreement ----------------------------------------------------------


@pytest.mark.parametrize("shared", [True, False])
def test_unrolled_matches_solver(shared):
    arch = ArchSpec(blocks=1, width=3)
    params = random_params(arch, 18, shared=shared, k=3, scale=0.1)
    g = GridSpec((8, 8, 8))
    rng = np.random.default_rng(19)
    ops = [dipole_kernel(g, Orientation.from_tilt(t, "x")) for t in (0, 20)]
    ys = [rng.standard_normal(g.dims) for _ in ops]
    a, _ = pgd_reconstruct(ops, ys, LearnedProx(params), ReconConfig(alpha=0.7, iterations=3))
    b = unrolled_reconstruct(params, DataTerm(ops, ys), alpha=0.7, k=3)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_per_iteration_weights_are_used():
    arch = ArchSpec(blocks=1, width=2)
    params = random_params(arch, 20, shared=False, k=2)
    prox = LearnedProx(params)
    z = np.random.default_rng(21).standard_normal((6, 6, 6))
    assert not np.allclose(prox.for_iteration(0)(z), prox.for_iteration(1)(z))
    with pytest.raises(ValueError):
        prox.for_iteration(2)(z)
    with pytest.raises(ValueError):
        ProxParams(arch, params.weights, shared_across_iterations=True, sets=2)


def test_zero_weight_pipeline_equals_landweber():
    term = padded_term(22)
    x = unrolled_reconstruct(zero_params(ArchSpec(blocks=2, width=2)), term, alpha=1.0, k=3)
    ref = np.zeros(term.shape)
    for _ in range(3):
        ref = term.step(ref, 1.0)
    assert np.max(np.abs(x - ref)) <= 1e-12


# --- training -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_dataset():
    fam = PhantomFamily(GridSpec((8, 8, 8)), n_shapes=(1, 3), radius_mm=(1.0, 2.0))
    return make_dataset(3, fam, AcqTemplate(noise_sigma=0.0), seed=0)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=2, learning_rate=1e-3, patch_dims=None, unroll_k=2,
                arch=ArchSpec(blocks=1, width=2))
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_validation_and_schedule():
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_ratio=0.0)
    with pytest.raises(ValueError):
        TrainConfig(unroll_k=0)
    cfg = TrainConfig()
    assert (cfg.unroll_k, cfg.epochs, cfg.batch_size) == (3, 100, 2)
    assert cfg.learning_rate == 1e-4 and cfg.weight_decay == 5e-4
    assert cfg.lr_at(24) == 1e-4 and cfg.lr_at(25) == pytest.approx(0.8e-4) and cfg.lr_at(50) == pytest.approx(0.64e-4)
    assert TrainConfig(arch={"blocks": 1, "width": 2}).arch == ArchSpec(blocks=1, width=2)


def test_training_deterministic(tiny_dataset):
    a, ha = train(tiny_dataset, tiny_cfg(), seed=5)
    b, hb = train(tiny_dataset, tiny_cfg(), seed=5)
    assert ha == hb and len(ha) == 2
    assert all(np.array_equal(u, v) for u, v in zip(a.weights, b.weights))
    _, hc = train(tiny_dataset, tiny_cfg(patch_dims=(6, 6, 6)), seed=6)
    assert hc != ha


def test_lr_zero_keeps_initialization(tiny_dataset):
    init = random_params(ArchSpec(blocks=1, width=2), 23)
    out, hist = train(tiny_dataset, tiny_cfg(learning_rate=0.0), init=init)
    assert all(np.array_equal(u, v) for u, v in zip(out.weights, init.weights))
    # constant parameters, no dropout, full volumes: every epoch sees the same losses
    assert hist[0] == pytest.approx(hist[1], rel=1e-12)


def test_zero_epochs_returns_init(tiny_dataset):
    out, hist = train(tiny_dataset, tiny_cfg(epochs=0), seed=1)
    ref = init_params(ArchSpec(blocks=1, width=2), np.random.default_rng(1))
    assert hist == []
    assert all(np.array_equal(u, v) for u, v in zip(out.weights, ref.weights))


def test_training_reduces_loss_on_tiny_problem(tiny_dataset):
    _, hist = train(tiny_dataset, tiny_cfg(epochs=8, learning_rate=3e-3), seed=0)
    assert hist[-1] < hist[0]


def test_training_divergence_abort(tiny_dataset):
    bad = [tiny_dataset[0]]
    bad[0] = type(bad[0])(y=1e300 * np.random.default_rng(0).standard_normal((8, 8, 8)), op=bad[0].op, x_c=bad[0].x_c, seed=0)
    with pytest.raises(DivergenceError, match="epoch 1, step 1"):
        train(bad, tiny_cfg(epochs=1))


def test_training_rejects_bad_datasets(tiny_dataset):
    with pytest.raises(ValueError):
        train([], tiny_cfg())
    with pytest.raises(ValueError):
        train(tiny_dataset, tiny_cfg(patch_dims=(9, 9, 9)))


# --- weight container ---------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    params = random_params(ArchSpec(blocks=2, width=3), 24, shared=False, k=3)
    params.meta["note"] = "x"
    path = tmp_path / "w.lpcnn"
    save_params(params, path)
    back = load_params(path)
    assert back.arch == params.arch and back.sets == 3 and not back.shared_across_iterations
    assert back.meta == {"note": "x"}
    assert all(np.array_equal(u, v) for u, v in zip(back.weights, params.weights))
    z = np.random.default_rng(25).standard_normal((6, 6, 6))
    np.testing.assert_array_equal(prox_apply(back, z, 1), prox_apply(params, z, 1))


def test_load_errors(tmp_path):
    params = random_params(ArchSpec(blocks=1, width=2), 26)
    blob = dumps_params(params)
    with pytest.raises(WeightFileError, match="architecture mismatch"):
        loads_params(blob, expected_arch=ArchSpec(blocks=2, width=2))
    with pytest.raises(WeightFileError):
        loads_params(b"LPCNNW2" + blob[7:])
    with pytest.raises(WeightFileError):
        loads_params(blob[:-5])
    with pytest.raises(WeightFileError):
        loads_params(blob[:12] + b"\xff" * 8 + blob[20:])
    assert loads_params(blob, expected_arch=params.arch).arch == params.arch
