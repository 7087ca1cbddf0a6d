import numpy as np
import pytest

from pntk.envs import Data, LinearDims, TaskDims, gen_multitask_trials, gen_single_task_trials, gen_smg
from pntk.errors import ConfigError, DegenerateInputError, UnsupportedArchitecture
from pntk.kernel import (
    DecomposedAccumulator,
    PNTKAccumulator,
    delta_w_from_pntk,
    load_kernel_snapshot,
    ntk,
    ntk_all,
    ntk_decomposed,
    ntk_jacobian,
    ntk_one_step_predict,
    pntk_identity_check,
    pntk_step,
    save_kernel_snapshot,
    weighted_kernel,
)
from pntk.model import LinearNet, TaskNet, init_linear, init_standard, jacobian, predict, sgd_train

SMALL = TaskDims(g1=3, g2=2, m=2, hidden=7)


def rand_task(rng, dims=SMALL):
    return TaskNet(
        rng.standard_normal((dims.n_stim, dims.hidden)),
        rng.standard_normal((dims.n_tasks, dims.hidden)),
        rng.standard_normal((dims.hidden, dims.n_out)),
        rng.standard_normal((dims.n_tasks, dims.n_out)),
    )


def rand_linear(rng):
    return LinearNet(rng.standard_normal((4, 3)), rng.standard_normal((3, 5)))


# ---------------------------------------------------------------- NTK


@pytest.mark.parametrize("arch", ["linear", "task"])
def test_structured_kernels_match_jacobian_route(arch):
    rng = np.random.default_rng(0)
    if arch == "linear":
        net, xa, xb = rand_linear(rng), rng.standard_normal((5, 4)), rng.standard_normal((7, 4))
        err = rng.standard_normal((7, 5))
    else:
        net = rand_task(rng)
        xa = gen_multitask_trials(0, 5, SMALL).inputs
        xb = gen_multitask_trials(1, 7, SMALL).inputs
        err = rng.standard_normal((7, SMALL.n_out))
    full = ntk_jacobian(net, xa, xb)
    np.testing.assert_allclose(ntk_all(net, xa, xb), np.einsum("ooab->oab", full), atol=1e-12)
    np.testing.assert_allclose(weighted_kernel(net, xa, xb, err),
                               np.einsum("oqab,bq->oab", full, err), atol=1e-12)


def test_two_parameter_linear_kernel_by_hand():
    # y = x * w1 * w2 with scalars: dy/dw1 = x w2, dy/dw2 = x w1
    net = LinearNet(np.array([[2.0]]), np.array([[3.0]]))
    x = np.array([[1.0], [-2.0], [0.5]])
    expect = np.outer(x[:, 0], x[:, 0]) * (3.0**2 + 2.0**2)
    np.testing.assert_allclose(ntk(net, x).entries, expect, rtol=1e-15)


def test_self_kernel_is_symmetric_psd():
    rng = np.random.default_rng(1)
    tr = gen_single_task_trials(0, 40, SMALL)
    for k in ntk_all(rand_task(rng), tr.inputs):
        assert np.max(np.abs(k - k.T)) <= 1e-10
        lam = np.linalg.eigvalsh(k)
        assert lam[0] >= -1e-9 * lam[-1]


def test_duplicate_sample_gives_duplicate_rows():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 4))
    x[3] = x[1]
    k = ntk(rand_linear(rng), x, output_unit=2).entries
    np.testing.assert_array_equal(k[1], k[3])
    np.testing.assert_array_equal(k[:, 1], k[:, 3])


def test_per_output_kernels_sum_to_scalarised_trace():
    rng = np.random.default_rng(3)
    net = rand_task(rng)
    tr = gen_multitask_trials(2, 6, SMALL)
    j = jacobian(net, tr.inputs)
    trace = np.einsum("aop,bop->ab", j, j)
    np.testing.assert_allclose(ntk_all(net, tr.inputs).sum(axis=0), trace, rtol=1e-12)


def test_unsupported_kernel_network():
    with pytest.raises(UnsupportedArchitecture):
        ntk_all(object(), np.zeros((2, 2)))


# ---------------------------------------------------------------- one-step prediction


def test_one_step_prediction_ratio_at_tiny_lr():
    smg = gen_smg(0, n=30)
    net = init_linear(seed=0, scale=0.5)
    lr = 1e-6
    pred = ntk_one_step_predict(net, smg, smg.x_test, lr)
    actual = predict(sgd_train(net, smg, lr, 1).final, smg.x_test) - predict(net, smg.x_test)
    assert np.max(np.abs(pred - actual)) <= 1e-3 * np.max(np.abs(actual))


def test_one_step_discrepancy_is_second_order():
    smg = gen_smg(1, n=30)
    net = init_linear(seed=1, scale=0.5)
    gaps = []
    for lr in (1e-3, 5e-4):
        pred = ntk_one_step_predict(net, smg, smg.x_test, lr)
        actual = predict(sgd_train(net, smg, lr, 1).final, smg.x_test) - predict(net, smg.x_test)
        gaps.append(np.max(np.abs(pred - actual)))
    assert gaps[0] / gaps[1] == pytest.approx(4.0, rel=0.02)


def test_task_net_one_step_prediction():
    tr = gen_single_task_trials(0, 30, SMALL)
    net = init_standard(SMALL, 0)
    lr = 1e-4
    pred = ntk_one_step_predict(net, tr, tr.inputs, lr)
    actual = predict(sgd_train(net, tr, lr, 1).final, tr.inputs) - predict(net, tr.inputs)
    np.testing.assert_allclose(pred, actual, rtol=1e-3, atol=1e-12)


def test_perfect_fit_predicts_no_change():
    rng = np.random.default_rng(4)
    net = rand_linear(rng)
    x = rng.standard_normal((6, 4))
    data = Data(x, predict(net, x))
    assert np.all(ntk_one_step_predict(net, data, x, 0.1) == 0)


# ---------------------------------------------------------------- accumulation


def test_zero_error_step_leaves_accumulator_at_zero():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((5, 4))
    acc = PNTKAccumulator(x, x, lr=0.1)
    pntk_step(acc, rand_linear(rng), np.zeros((5, 5)), 0.1)
    assert np.all(acc.entries == 0) and acc.steps == 1


def test_scalar_step_by_hand():
    net = LinearNet(np.array([[2.0]]), np.array([[3.0]]))
    x = np.array([[1.0]])
    acc = PNTKAccumulator(x, x, lr=0.05)
    pntk_step(acc, net, np.array([[0.4]]), 0.05)
    # lr * (2 / (N D)) * err * K with K = x^2 (w1^2 + w2^2) = 13
    assert acc.entries[0, 0, 0] == pytest.approx(0.05 * 2 * 0.4 * 13.0, rel=1e-15)


def test_lr_mismatch_is_config_error():
    x = np.zeros((2, 4))
    acc = PNTKAccumulator(x, x, lr=0.1)
    with pytest.raises(ConfigError):
        pntk_step(acc, init_linear(), np.zeros((2, 5)), 0.2)
    with pytest.raises(ConfigError):
        PNTKAccumulator(x, x, lr=0.0)


def test_identity_check_zero_steps():
    smg = gen_smg(0, n=10)
    net = init_linear(seed=0)
    acc = PNTKAccumulator(smg.x_test, smg.x, lr=0.01)
    assert pntk_identity_check(acc, net, net) == 0.0


def _linear_identity_residual(lr, steps, seed=0):
    smg = gen_smg(seed, n=50)
    net = init_linear(seed=seed, scale=0.3)
    acc = PNTKAccumulator(smg.x_test, smg.x, lr=lr)
    tr = sgd_train(net, smg, lr, steps, hooks=[acc.hook])
    return pntk_identity_check(acc, net, tr.final)


def test_identity_residual_decays_linearly_in_lr():
    # fixed lr * steps keeps the trajectory, so the residual is pure discretisation error
    r = [_linear_identity_residual(lr, int(round(0.5 / lr))) for lr in (1e-2, 5e-3, 2.5e-3)]
    assert max(r) <= 0.02
    slopes = np.diff(np.log(r)) / np.diff(np.log([1e-2, 5e-3, 2.5e-3]))
    assert np.all((slopes >= 0.8) & (slopes <= 1.2))


def test_strided_accumulation_tracks_task_net():
    tr = gen_single_task_trials(1, 40, SMALL)
    net = init_standard(SMALL, 1)
    lr = 2.0
    acc = PNTKAccumulator(tr.inputs, tr.inputs, lr=lr, stride=5)
    run = sgd_train(net, tr, lr, 200, hooks=[acc.hook])
    assert acc.steps == 40
    assert pntk_identity_check(acc, net, run.final) < 0.05


# ---------------------------------------------------------------- decomposition


def test_decomposition_sums_to_weighted_kernel():
    rng = np.random.default_rng(6)
    net = rand_linear(rng)
    xj, xk, e = rng.standard_normal((8, 4)), rng.standard_normal((3, 4)), rng.standard_normal((8, 5))
    dec = ntk_decomposed(net, xj, xk, e)
    assert dec.shape == (4, 8, 3, 5)
    np.testing.assert_allclose(dec.sum(axis=0), weighted_kernel(net, xk, xj, e).transpose(2, 1, 0),
                               atol=1e-12)


def test_decomposition_single_input_dimension():
    rng = np.random.default_rng(7)
    net = rand_linear(rng)
    xk = np.zeros((1, 4))
    xk[0, 2] = 1.5
    dec = ntk_decomposed(net, rng.standard_normal((5, 4)), xk, rng.standard_normal((5, 5)))
    nonzero = [i for i in range(4) if np.any(dec[i] != 0)]
    assert nonzero == [2]


def test_decomposition_toy_by_hand():
    # 2 inputs, 1 hidden unit, 2 outputs; one training sample, one test sample
    w1 = np.array([[1.0], [2.0]])
    w2 = np.array([[3.0, -1.0]])
    net = LinearNet(w1, w2)
    xj, xk, e = np.array([[1.0, -1.0]]), np.array([[2.0, 0.5]]), np.array([[0.5, 2.0]])
    hj = xj @ w1  # [[-1]]
    dec = ntk_decomposed(net, xj, xk, e)
    for i in range(2):
        for l in range(2):
            w2e = w2[0] @ e[0]  # scalar because the hidden layer has one unit
            expect = xk[0, i] * (xj[0, i] * w2[0, l] * w2e + w1[i, 0] * hj[0, 0] * e[0, l])
            assert dec[i, 0, 0, l] == pytest.approx(expect, rel=1e-14)


def test_decomposition_rejects_task_net():
    with pytest.raises(UnsupportedArchitecture):
        ntk_decomposed(init_standard(SMALL, 0), None, None, None)


def test_delta_w_reconstruction():
    smg = gen_smg(2, n=100)
    net = init_linear(seed=2, scale=0.3)
    dec = DecomposedAccumulator(smg.x_test[:5], smg.x, lr=1e-3)
    assert np.all(delta_w_from_pntk(dec, smg.x_test[:5]) == 0)
    tr = sgd_train(net, smg, 1e-3, 300, hooks=[dec.hook])
    truth = tr.final.w_eff - net.w_eff
    est = delta_w_from_pntk(dec, smg.x_test[:5], k=0)
    assert np.linalg.norm(est - truth) <= 0.02 * np.linalg.norm(truth)
    other = delta_w_from_pntk(dec, smg.x_test[:5], k=3)
    assert np.max(np.abs(other - est)) <= 1e-6 * np.max(np.abs(est))


def test_delta_w_degenerate_test_point():
    x = np.array([[1.0, 0.0, 1.0, 1.0]])
    dec = np.ones((4, 2, 1, 5))
    with pytest.raises(DegenerateInputError):
        delta_w_from_pntk(dec, x, 0)


# ---------------------------------------------------------------- snapshots


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    km = ntk(rand_linear(rng), rng.standard_normal((6, 4)), output_unit=1, t=7)
    order = [5, 4, 3, 2, 1, 0]
    save_kernel_snapshot(tmp_path / "k.csv", km, order=order, sort_key="by_task")
    back, meta = load_kernel_snapshot(tmp_path / "k.csv")
    np.testing.assert_array_equal(back.entries, km.entries[np.ix_(order, order)])
    assert (meta.output_unit, meta.epoch, meta.sort_key, meta.order) == (1, 7, "by_task", order)
