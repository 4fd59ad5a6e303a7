import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpcpd import _kernels
from fpcpd.blocks import build_plan, run_block_parallel
from fpcpd.solvers import (
    DivergenceError,
    SolverConfig,
    TraceRecord,
    als_fit,
    corcondia,
    epochs_to_target,
    fpcpd_fit,
    make_entry_update,
    mode_gradient,
    psgd_fit,
    read_trace_csv,
    run_solver,
    sals_fit,
    select_rank,
    sgd_fit,
    write_trace_csv,
)
from fpcpd.tensor import DenseTensor3, FactorModel, loss

from conftest import exact_tensor, random_model


def fd_gradient(X, f, mode, h=1e-6):
    """Central finite differences of 0.5 * loss with respect to one factor."""
    M = f.factors[mode - 1]
    out = np.zeros_like(M)
    for idx in np.ndindex(M.shape):
        old = M[idx]
        M[idx] = old + h
        up = 0.5 * loss(X, f)
        M[idx] = old - h
        down = 0.5 * loss(X, f)
        M[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


# --------------------------------------------------------------------------- mode_gradient


def test_gradient_zero_at_exact_fit(rng):
    t, f = exact_tensor(rng, (3, 4, 2), 2)
    for mode in (1, 2, 3):
        np.testing.assert_allclose(mode_gradient(t, f, mode), 0, atol=1e-12)


@pytest.mark.parametrize("mode", [1, 2, 3])
def test_gradient_matches_finite_differences_2x2x2(rng, mode):
    X = DenseTensor3(rng.standard_normal((2, 2, 2)))
    f = random_model(rng, (2, 2, 2), 2)
    num = fd_gradient(X, f, mode)
    np.testing.assert_allclose(-mode_gradient(X, f, mode), num, rtol=1e-5, atol=1e-8)


def test_restricted_gradient_single_entry_touches_one_row(rng):
    X = DenseTensor3(rng.standard_normal((4, 3, 5)))
    f = random_model(rng, X.dims, 2)
    g = mode_gradient(X, f, 1, restriction=np.array([[2, 1, 3]]))
    assert np.all(np.delete(g, 2, axis=0) == 0)
    e = X.data[2, 1, 3] - np.sum(f.A[2] * f.B[1] * f.C[3])
    np.testing.assert_allclose(g[2], e * f.B[1] * f.C[3])


def test_block_gradients_sum_to_full_gradient(rng):
    X = DenseTensor3(rng.standard_normal((3, 5, 4)))
    f = random_model(rng, X.dims, 3)
    plan = build_plan(X.dims)
    for mode in (1, 2, 3):
        total = sum(mode_gradient(X, f, mode, restriction=blk) for blk in plan.blocks)
        np.testing.assert_allclose(total, mode_gradient(X, f, mode), atol=1e-10)


def test_gradient_rejects_mismatch(rng):
    with pytest.raises(ValueError):
        mode_gradient(DenseTensor3(np.zeros((2, 2, 2))), FactorModel.zeros((2, 2, 3), 1), 1)
    with pytest.raises(ValueError):
        mode_gradient(DenseTensor3(np.zeros((2, 2, 2))), FactorModel.zeros((2, 2, 2), 1), 4)


# --------------------------------------------------------------------------- ALS


def test_als_rank1_exact_recovery():
    rng = np.random.default_rng(7)
    t, _ = exact_tensor(rng, (6, 5, 4), 1)
    fit = als_fit(t, SolverConfig(rank=1, epochs=10, tol=0))
    assert fit.trace[-1].rmse < 1e-8


def test_als_zero_tensor():
    t = DenseTensor3(np.zeros((3, 3, 3)))
    fit = als_fit(t, SolverConfig(rank=2, epochs=5))
    assert fit.trace[0].loss < 1e-20
    assert len(fit.trace) == 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_als_loss_non_increasing(seed, rank):
    rng = np.random.default_rng(seed)
    t = DenseTensor3(rng.random(tuple(rng.integers(2, 7, size=3))))
    fit = als_fit(t, SolverConfig(rank=rank, epochs=25, tol=0, seed=seed))
    L = [r.loss for r in fit.trace]
    for a, b in zip(L, L[1:]):
        assert b <= a + 1e-9 * max(a, 1e-300)


def test_trace_seconds_non_decreasing(rng):
    t = DenseTensor3(rng.random((4, 4, 4)))
    for name in ("als", "sals", "fpcpd"):
        tr = run_solver(name, t, SolverConfig(rank=2, eta=0.01, epochs=8, tol=0)).trace
        assert all(b.seconds >= a.seconds for a, b in zip(tr, tr[1:]))
        assert [r.epoch for r in tr] == list(range(1, 9))


# --------------------------------------------------------------------------- SALS


def test_sals_full_batch_equals_one_als_iteration(rng):
    t = DenseTensor3(rng.random((5, 4, 6)))
    cfg = SolverConfig(rank=3, epochs=1, batch_fraction=1.0)
    a = als_fit(t, cfg)
    s = sals_fit(t, cfg)
    assert abs(a.trace[0].loss - s.trace[0].loss) < 1e-8
    np.testing.assert_allclose(s.model.C, a.model.C, atol=1e-8)


def test_sals_rank1_converges():
    rng = np.random.default_rng(2)
    t, _ = exact_tensor(rng, (8, 7, 6), 1)
    fit = sals_fit(t, SolverConfig(rank=1, epochs=200, tol=0, batch_fraction=0.3))
    assert fit.trace[-1].rmse < 1e-6


def test_sals_sampling_is_seeded(rng):
    t = DenseTensor3(rng.random((5, 5, 5)))
    cfg = SolverConfig(rank=2, epochs=4, tol=0, seed=3)
    a, b = sals_fit(t, cfg), sals_fit(t, cfg)
    np.testing.assert_array_equal(a.model.A, b.model.A)


# --------------------------------------------------------------------------- SGD family


def _unit_problem(x=2.0):
    t = DenseTensor3(np.full((1, 1, 1), x))
    init = FactorModel(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)))
    return t, init


def test_single_entry_reduces_to_plain_sgd_step():
    t, init = _unit_problem()
    cfg = SolverConfig(rank=1, eta=0.1, gamma=0.0, noise=0.0, beta=0.0, epochs=1)
    f = fpcpd_fit(t, cfg, init=init).model
    # residual 2 - 1 = 1, direction e * b * c = 1
    for m in f.factors:
        assert m[0, 0] == pytest.approx(1.1, abs=1e-15)
    g = sgd_fit(t, cfg, init=init).model
    np.testing.assert_array_equal(f.A, g.A)


def test_momentum_and_l1_single_step_by_hand():
    t, init = _unit_problem()
    cfg = SolverConfig(rank=1, eta=0.1, gamma=0.5, noise=0.0, beta=0.2, epochs=1)
    f = fpcpd_fit(t, cfg, init=init).model
    # v = 0.5 * 0 + 0.5 * 1; A = 1 + 0.1 * 0.5 - 0.1 * 0.2 * sign(1)
    assert f.A[0, 0] == pytest.approx(1.03, abs=1e-15)
    assert f.velA[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_lookahead_second_step_by_hand():
    t, init = _unit_problem()
    cfg = SolverConfig(rank=1, eta=0.1, gamma=0.5, noise=0.0, epochs=2, tol=0)
    f = fpcpd_fit(t, cfg, init=init).model
    # step 1: v = 0.5, w = 1.05. step 2 evaluates at w + 0.5 * v = 1.3
    la = 1.3
    e = 2.0 - la**3
    v = 0.5 * 0.5 + 0.5 * e * la * la
    assert f.velA[0, 0] == pytest.approx(v, rel=1e-14)
    assert f.A[0, 0] == pytest.approx(1.05 + 0.1 * v, rel=1e-14)
    g = fpcpd_fit(t, cfg.replace(nag_lookahead=False), init=init).model
    e0 = 2.0 - 1.05**3
    assert g.velA[0, 0] == pytest.approx(0.25 + 0.5 * e0 * 1.05**2, rel=1e-14)


def test_kernel_matches_python_reference_epoch(rng):
    X = DenseTensor3(rng.random((4, 3, 5)))
    plan = build_plan(X.dims)
    cfg = SolverConfig(rank=3, eta=0.05, gamma=0.8, noise=0.01, beta=0.001, epochs=1)
    init = FactorModel.random(X.dims, 3, rng)
    fast = fpcpd_fit(X, cfg, plan=plan, init=init).model
    ref = init.copy()
    update = make_entry_update(X, ref, plan, cfg, epoch=1)
    for blk in plan.blocks:
        run_block_parallel(blk, update)
    for a, b in zip(fast.factors + (fast.velA,), ref.factors + (ref.velA,)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_deterministic_runs_are_bitwise_identical(rng):
    X = DenseTensor3(rng.random((6, 5, 4)))
    cfg = SolverConfig(rank=3, eta=0.05, noise=1e-3, epochs=5, tol=0, seed=11)
    a, b = fpcpd_fit(X, cfg), fpcpd_fit(X, cfg)
    assert [(r.rmse, r.loss) for r in a.trace] == [(r.rmse, r.loss) for r in b.trace]
    np.testing.assert_array_equal(a.model.A, b.model.A)
    c = fpcpd_fit(X, cfg.replace(seed=12))
    assert not np.array_equal(a.model.A, c.model.A)


def test_thread_count_does_not_change_result(rng):
    X = DenseTensor3(rng.random((8, 8, 8)))
    cfg = SolverConfig(rank=3, eta=0.05, noise=1e-3, beta=1e-4, epochs=3, tol=0)
    base = fpcpd_fit(X, cfg).model
    for th in (2, 5):
        other = fpcpd_fit(X, cfg.replace(threads=th)).model
        for a, b in zip(base.factors, other.factors):
            np.testing.assert_array_equal(a, b)


def test_thread_count_above_pool_is_rejected(rng):
    X = DenseTensor3(rng.random((3, 3, 3)))
    with pytest.raises(ValueError, match="pool size"):
        fpcpd_fit(X, SolverConfig(rank=1, epochs=1, threads=_kernels.max_threads() + 1))


def test_shuffled_block_order_still_converges(rng):
    t, _ = exact_tensor(np.random.default_rng(5), (6, 6, 6), 2)
    t = DenseTensor3(np.abs(t.data))
    cfg = SolverConfig(rank=2, eta=0.02, epochs=40, tol=0, deterministic=False)
    fit = fpcpd_fit(t, cfg)
    assert fit.trace[-1].rmse < fit.trace[0].rmse


def test_divergence_is_reported():
    rng = np.random.default_rng(0)
    X = DenseTensor3(rng.random((5, 5, 5)) * 10)
    cfg = SolverConfig(rank=3, eta=5.0, epochs=20)
    with pytest.raises(DivergenceError) as info:
        fpcpd_fit(X, cfg)
    assert info.value.epoch >= 1
    assert info.value.eta == 5.0
    assert "epoch" in str(info.value)


def test_psgd_without_noise_equals_plain_sgd(rng):
    X = DenseTensor3(rng.random((5, 4, 3)))
    cfg = SolverConfig(rank=2, eta=0.05, noise=0.0, epochs=4, tol=0)
    np.testing.assert_array_equal(psgd_fit(X, cfg).model.B, sgd_fit(X, cfg).model.B)


def test_perturbation_statistics():
    # zero data and zero factors: the gradient stays negligible, so each
    # coordinate performs a random walk of 1000 steps of size eta * noise
    t = DenseTensor3(np.zeros((1, 1, 1)))
    eta, noise, steps = 1e-3, 1e-3, 1000
    cfg = SolverConfig(rank=200, eta=eta, noise=noise, epochs=steps, tol=0)
    f = psgd_fit(t, cfg, init=FactorModel.zeros((1, 1, 1), 200)).model
    v = np.concatenate([m.ravel() for m in f.factors])
    per_step = v / math.sqrt(steps)
    assert abs(per_step.mean()) < 0.15 * eta * noise
    assert per_step.std() == pytest.approx(eta * noise, rel=0.1)


def test_gaussian_draws_are_standard_normal():
    z = np.concatenate([_kernels.gaussian_draws(np.uint64(4), np.int64(1), np.int64(p), 9) for p in range(4000)])
    assert abs(z.mean()) < 0.03
    assert z.std() == pytest.approx(1.0, abs=0.03)
    again = _kernels.gaussian_draws(np.uint64(4), np.int64(1), np.int64(17), 9)
    np.testing.assert_array_equal(again, z[17 * 9:18 * 9])


def test_step_decay_schedule():
    cfg = SolverConfig(eta=0.1, eta_decay=0.5)
    assert cfg.step_size(0) == 0.1
    assert cfg.step_size(2) == pytest.approx(0.05)


# --------------------------------------------------------------------------- config and trace I/O


def test_config_validation():
    for bad in ({"rank": 0}, {"eta": 0}, {"gamma": 1.0}, {"noise": -1}, {"epochs": 0}, {"tol": -1},
                {"threads": 0}, {"batch_fraction": 0}):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


def test_config_file_round_trip(tmp_path):
    cfg = SolverConfig(rank=7, eta=0.02, gamma=0.5, noise=0.0, beta=1e-3, epochs=9, tol=0,
                       seed=4, threads=2, deterministic=False)
    p = tmp_path / "solver.cfg"
    cfg.to_file(p)
    text = p.read_text()
    for key in ("rank", "eta", "gamma", "noise", "beta", "epochs", "tol", "seed", "threads", "deterministic"):
        assert f"{key} = " in text
    assert SolverConfig.from_file(p) == cfg


def test_config_file_errors(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("rank = 3\nlearning = 2\n")
    with pytest.raises(ValueError, match="unknown config key"):
        SolverConfig.from_file(p)
    p.write_text("deterministic = maybe\n")
    with pytest.raises(ValueError, match="boolean"):
        SolverConfig.from_file(p)
    p.write_text("rank 3\n")
    with pytest.raises(ValueError, match=":1:"):
        SolverConfig.from_file(p)


def test_trace_csv_round_trip(tmp_path):
    trace = [TraceRecord(1, 0.5, 0.25, 12.5), TraceRecord(2, 0.75, 0.125, 3.125)]
    p = tmp_path / "trace.csv"
    write_trace_csv(p, trace)
    assert p.read_text().splitlines()[0] == "epoch,seconds,rmse,loss"
    assert read_trace_csv(p) == trace
    assert epochs_to_target(trace, 0.2) == 2
    assert math.isinf(epochs_to_target(trace, 0.1))


# --------------------------------------------------------------------------- CORCONDIA


def test_corcondia_exact_factors(rng):
    t, f = exact_tensor(rng, (6, 5, 7), 3)
    assert corcondia(t, f) == pytest.approx(100.0, abs=1e-6)


def test_corcondia_rank1_and_overfit():
    rng = np.random.default_rng(1)
    t, _ = exact_tensor(rng, (6, 6, 6), 1)
    one = als_fit(t, SolverConfig(rank=1, epochs=50))
    three = als_fit(t, SolverConfig(rank=3, epochs=50))
    assert corcondia(t, one.model) == pytest.approx(100.0, abs=1e-6)
    assert corcondia(t, three.model) < 100.0


def test_corcondia_zero_tensor_is_finite_and_flagged():
    t = DenseTensor3(np.zeros((3, 3, 3)))
    res = corcondia(t, FactorModel.zeros((3, 3, 3), 2), return_info=True)
    assert math.isfinite(res.value) and res.damped


def test_select_rank_finds_true_rank():
    t, _ = exact_tensor(np.random.default_rng(8), (8, 8, 8), 2)
    best, scores = select_rank(t, [1, 2, 4], SolverConfig(epochs=200))
    assert best == 2
    assert scores[4] < 80
