"""Flow-layer tests: Jacobian sparsity via autodiff, analytic log-dets
against numerically assembled Jacobians, batch-norm flow algebra, BNAF
monotonicity, and MAF inversion round trips."""

import numpy as np
import pytest

from flowgrain import autodiff as ad
from flowgrain.errors import UnsupportedOperationError
from flowgrain.flows import (
    BatchNormFlow,
    BlockLayer,
    BnafFlow,
    FlowConfig,
    FlowModel,
    MafFlow,
    build_made_masks,
    ordering_degrees,
)

from helpers import assert_grad_close, logabsdet_numeric


def autodiff_jacobian(fn, x_arr):
    """(m, d) Jacobian of a batch-1 vector function via one backward pass
    per output unit."""
    d = x_arr.shape[0]
    probe = fn(ad.Tensor(x_arr[None, :]))
    m = probe.data.shape[1]
    jac = np.zeros((m, d))
    for j in range(m):
        x = ad.parameter(x_arr[None, :])
        onehot = np.zeros((1, m))
        onehot[0, j] = 1.0
        with ad.Tape() as tape:
            out = fn(x)
            loss = ad.reduce_sum(ad.mul(out, ad.constant(onehot)))
        ad.backward(tape, loss)
        jac[j] = x.grad[0]
    return jac


# ---------------------------------------------------------------------------
# MADE masks


def test_made_masks_strictly_lower_triangular_jacobian():
    rng = np.random.default_rng(0)
    d = 3
    flow = MafFlow(d, 8, ordering_degrees(d, "natural", 0), rng)
    x_arr = rng.normal(size=d)
    jac = autodiff_jacobian(lambda x: flow.net(x)[0], x_arr)
    for i in range(d):
        for j in range(d):
            if j >= i:
                assert abs(jac[i, j]) < 1e-12
    jac_alpha = autodiff_jacobian(lambda x: flow.net(x)[1], x_arr)
    assert np.max(np.abs(np.triu(jac_alpha))) < 1e-12


def test_made_masks_d1_unconditional():
    masks = build_made_masks(1, [4], np.array([1]))
    assert np.all(masks.hidden_masks[0] == 0.0)
    assert np.all(masks.output_mask == 1.0)
    rng = np.random.default_rng(1)
    flow = MafFlow(1, 4, np.array([1]), rng)
    jac = autodiff_jacobian(lambda x: flow.net(x)[0], rng.normal(size=1))
    assert abs(jac[0, 0]) < 1e-12


def test_made_masks_d2_reversed_ordering():
    rng = np.random.default_rng(2)
    flow = MafFlow(2, 6, np.array([2, 1]), rng)  # dim0 has degree 2, dim1 degree 1
    jac = autodiff_jacobian(lambda x: flow.net(x)[0], rng.normal(size=2))
    # output for dim 0 (degree 2) may depend on dim 1 (degree 1), not itself
    assert abs(jac[0, 0]) < 1e-12
    assert abs(jac[1, 0]) < 1e-12 and abs(jac[1, 1]) < 1e-12
    assert abs(jac[0, 1]) > 0


def test_made_hidden_degrees_cycle():
    masks = build_made_masks(4, [7], np.arange(1, 5))
    assert list(masks.degrees[1]) == [1, 2, 3, 1, 2, 3, 1]


# ---------------------------------------------------------------------------
# MAF flow


def test_maf_zero_weights_is_identity():
    rng = np.random.default_rng(3)
    flow = MafFlow(3, 8, ordering_degrees(3, "natural", 0), rng)
    for p in flow.parameters().values():
        p.data[...] = 0.0
    x = rng.normal(size=(4, 3))
    z, logdet = flow.forward(ad.Tensor(x))
    assert np.allclose(z.data, x, atol=1e-15)
    assert np.allclose(logdet.data, 0.0, atol=1e-15)


def test_maf_forced_affine_closed_form():
    rng = np.random.default_rng(4)
    flow = MafFlow(1, 4, np.array([1]), rng)
    for p in flow.parameters().values():
        p.data[...] = 0.0
    flow.b_mu.data[...] = 1.0
    # soft clamp: pick raw bias so 10*tanh(raw/10) = ln 2
    target = np.log(2.0)
    flow.b_alpha.data[...] = 10.0 * np.arctanh(target / 10.0)
    z, logdet = flow.forward(ad.Tensor(np.array([[3.0]])))
    assert abs(float(z.data.reshape(-1)[0]) - 1.0) < 1e-12
    assert abs(float(logdet.data.reshape(-1)[0]) + target) < 1e-12


def test_maf_logdet_matches_numerical_jacobian():
    rng = np.random.default_rng(5)
    flow = MafFlow(3, 10, ordering_degrees(3, "natural", 0), rng)
    for p in flow.parameters().values():
        p.data[...] = rng.normal(scale=0.5, size=p.data.shape)
    x_arr = rng.normal(size=3)

    def f(v):
        z, _ = flow.forward(ad.Tensor(v[None, :]))
        return z.data[0]

    _, logdet = flow.forward(ad.Tensor(x_arr[None, :]))
    ld_num = logabsdet_numeric(f, x_arr)
    assert abs(float(logdet.data.reshape(-1)[0]) - ld_num) / max(abs(ld_num), 1e-12) < 1e-4


# ---------------------------------------------------------------------------
# batch-norm flow


def test_batchnorm_identity_on_standardized_data():
    rng = np.random.default_rng(6)
    bn = BatchNormFlow(4, eps=1e-12)
    x = rng.normal(size=(512, 4))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    y, logdet = bn.forward(ad.Tensor(x), train=True)
    assert np.max(np.abs(y.data - x)) < 1e-6
    assert abs(float(logdet.data.reshape(-1)[0])) < 1e-6


def test_batchnorm_logdet_plugin():
    bn = BatchNormFlow(1, eps=1.0)
    bn.log_gamma.data[...] = np.log(2.0)
    bn.running_var[...] = 0.0
    y, logdet = bn.forward(ad.Tensor(np.array([[1.0], [2.0]])), train=False)
    assert abs(float(logdet.data.reshape(-1)[0]) - np.log(2.0)) < 1e-12


def test_batchnorm_eval_logdet_matches_diagonal_jacobian():
    rng = np.random.default_rng(7)
    bn = BatchNormFlow(3)
    bn.log_gamma.data[...] = rng.normal(size=3)
    bn.beta.data[...] = rng.normal(size=3)
    bn.running_mean[...] = rng.normal(size=3)
    bn.running_var[...] = rng.uniform(0.5, 2.0, size=3)
    x_arr = rng.normal(size=3)

    def f(v):
        y, _ = bn.forward(ad.Tensor(v[None, :]), train=False)
        return y.data[0]

    _, logdet = bn.forward(ad.Tensor(x_arr[None, :]), train=False)
    assert abs(float(logdet.data.reshape(-1)[0]) - logabsdet_numeric(f, x_arr)) < 1e-6


def test_batchnorm_batch_of_one_train_error():
    bn = BatchNormFlow(2)
    with pytest.raises(ValueError):
        bn.forward(ad.Tensor(np.zeros((1, 2))), train=True)


def test_batchnorm_running_stats_update_only_when_asked():
    rng = np.random.default_rng(8)
    bn = BatchNormFlow(2)
    x = rng.normal(size=(64, 2)) + 3.0
    before = bn.running_mean.copy()
    bn.forward(ad.Tensor(x), train=True, update_stats=False)
    assert np.array_equal(bn.running_mean, before)
    bn.forward(ad.Tensor(x), train=True, update_stats=True)
    assert not np.array_equal(bn.running_mean, before)


# ---------------------------------------------------------------------------
# BNAF


def test_block_layer_scalar_linear():
    rng = np.random.default_rng(9)
    layer = BlockLayer(1, 1, 1, rng)
    layer.w_diag.data[...] = 0.7
    layer.bias.data[...] = 0.0
    out = layer.apply(ad.Tensor(np.array([[2.0]])))
    assert abs(float(out.data[0, 0]) - np.exp(0.7) * 2.0) < 1e-12
    # the free diagonal parameter IS the log-derivative
    assert abs(float(layer.w_diag.data[0, 0]) - 0.7) < 1e-15


def test_block_layer_masks():
    layer = BlockLayer(3, 1, 2, np.random.default_rng(10))
    w = layer.effective_weight().data
    # block (i, j) is zero for i > j
    assert np.all(w[1, 0:2] == 0.0) and np.all(w[2, 0:4] == 0.0)
    # diagonal blocks strictly positive
    for i in range(3):
        assert np.all(w[i, 2 * i : 2 * i + 2] > 0.0)


def test_bnaf_monotone_in_own_dimension():
    rng = np.random.default_rng(11)
    flow = BnafFlow(3, 4, rng)
    probes = rng.normal(size=(100, 3))
    for i in range(3):
        lo = probes.copy()
        hi = probes.copy()
        hi[:, i] += 0.5
        zlo, _ = flow.forward(ad.Tensor(lo))
        zhi, _ = flow.forward(ad.Tensor(hi))
        assert np.all(zhi.data[:, i] > zlo.data[:, i])


def test_bnaf_logdet_matches_numerical_jacobian():
    rng = np.random.default_rng(12)
    flow = BnafFlow(3, 4, rng)
    x_arr = rng.normal(size=3)

    def f(v):
        z, _ = flow.forward(ad.Tensor(v[None, :]))
        return z.data[0]

    _, logdet = flow.forward(ad.Tensor(x_arr[None, :]))
    ld_num = logabsdet_numeric(f, x_arr)
    assert abs(float(logdet.data.reshape(-1)[0]) - ld_num) / max(abs(ld_num), 1e-12) < 1e-4


def test_bnaf_reversed_flow_logdet():
    rng = np.random.default_rng(13)
    flow = BnafFlow(3, 4, rng, reverse=True)
    x_arr = rng.normal(size=3)

    def f(v):
        z, _ = flow.forward(ad.Tensor(v[None, :]))
        return z.data[0]

    _, logdet = flow.forward(ad.Tensor(x_arr[None, :]))
    ld_num = logabsdet_numeric(f, x_arr)
    assert abs(float(logdet.data.reshape(-1)[0]) - ld_num) / max(abs(ld_num), 1e-12) < 1e-4


# ---------------------------------------------------------------------------
# composed model


def identity_maf(d, n_flows=2):
    cfg = FlowConfig(kind="maf", input_dim=d, n_flows=n_flows, hidden_width=6,
                     use_batchnorm=False)
    model = FlowModel(cfg, np.random.default_rng(14))
    for p in model.parameters().values():
        p.data[...] = 0.0
    return model


def test_log_prob_identity_model_origin_2d():
    model = identity_maf(2)
    lp = model.log_prob(np.zeros(2))
    assert abs(float(lp.reshape(-1)[0]) + np.log(2.0 * np.pi)) < 1e-12


def test_log_prob_identity_model_origin_reduced_regime():
    d = 11 * 11 * 3
    assert d == 363
    model = identity_maf(d, n_flows=1)
    lp = model.log_prob(np.zeros(d))
    assert abs(float(lp.reshape(-1)[0]) + 181.5 * np.log(2.0 * np.pi)) < 1e-9


def test_flow_jacobian_sparsity_both_kinds():
    # z_i must not depend on x_j for any j strictly later in the ordering
    for kind in ("maf", "bnaf"):
        for d in (1, 3, 8):
            cfg = FlowConfig(kind=kind, input_dim=d, n_flows=2,
                             hidden_width=4, use_batchnorm=False,
                             ordering="natural")
            model = FlowModel(cfg, np.random.default_rng(15))
            x_arr = np.random.default_rng(16).normal(size=d)

            def fn(x):
                z, _ = model.forward(x)
                return z

            jac = autodiff_jacobian(fn, x_arr)
            for i in range(d):
                for j in range(i + 1, d):
                    assert abs(jac[i, j]) < 1e-12, (kind, d, i, j)


def test_model_logdet_full_stack_vs_numerical():
    for kind in ("maf", "bnaf"):
        cfg = FlowConfig(kind=kind, input_dim=3, n_flows=3, hidden_width=5,
                         use_batchnorm=(kind == "maf"))
        model = FlowModel(cfg, np.random.default_rng(17))
        # give batch-norm flows non-trivial eval statistics
        for flow in model.flows:
            if isinstance(flow, BatchNormFlow):
                flow.running_mean[...] = 0.3
                flow.running_var[...] = 1.7
        rng = np.random.default_rng(18)
        x_arr = rng.normal(size=3)

        def f(v):
            z, _ = model.forward(ad.Tensor(v[None, :]))
            return z.data[0]

        _, logdet = model.forward(ad.Tensor(x_arr[None, :]))
        ld_num = logabsdet_numeric(f, x_arr)
        assert abs(float(logdet.data.reshape(-1)[0]) - ld_num) / max(abs(ld_num), 1e-12) < 1e-4, kind


def test_mean_nll_gradient_matches_finite_differences():
    for kind in ("maf", "bnaf"):
        cfg = FlowConfig(kind=kind, input_dim=3, n_flows=2, hidden_width=4,
                         use_batchnorm=(kind == "maf"))
        model = FlowModel(cfg, np.random.default_rng(19))
        x = np.random.default_rng(20).normal(size=(16, 3))
        params = model.parameters()
        ad.zero_grad(params.values())
        with ad.Tape() as tape:
            nll = model.mean_nll_t(ad.Tensor(x), train=True, update_stats=False)
        ad.backward(tape, nll)

        for name, p in params.items():
            saved = p.data.copy()

            def f(v, p=p, saved=saved):
                p.data[...] = v
                out = float(model.mean_nll_t(ad.Tensor(x), train=True,
                                             update_stats=False).data)
                p.data[...] = saved
                return out

            numeric = ad.finite_difference_gradient(f, saved)
            analytic = p.grad if p.grad is not None else np.zeros_like(saved)
            assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-6)


def test_invert_identity_model():
    model = identity_maf(2)
    z = np.random.default_rng(21).normal(size=(10, 2))
    assert np.max(np.abs(model.invert(z) - z)) < 1e-12


def test_invert_roundtrip_random_model():
    cfg = FlowConfig(kind="maf", input_dim=4, n_flows=3, hidden_width=8,
                     use_batchnorm=True)
    model = FlowModel(cfg, np.random.default_rng(22))
    rng = np.random.default_rng(23)
    for p in model.parameters().values():
        p.data[...] = rng.normal(scale=0.3, size=p.data.shape)
    for flow in model.flows:
        if isinstance(flow, BatchNormFlow):
            flow.running_mean[...] = rng.normal(size=4)
            flow.running_var[...] = rng.uniform(0.5, 2.0, size=4)
    z = rng.normal(size=(100, 4))
    x = model.invert(z)
    z2, _ = model.forward(ad.Tensor(x))
    assert np.max(np.abs(z2.data - z)) < 1e-8


def test_invert_unsupported_for_bnaf():
    cfg = FlowConfig(kind="bnaf", input_dim=2, n_flows=2, hidden_width=3,
                     use_batchnorm=False)
    model = FlowModel(cfg, np.random.default_rng(24))
    with pytest.raises(UnsupportedOperationError):
        model.invert(np.zeros((1, 2)))


def test_table_defaults():
    maf = FlowConfig.maf_default(100)
    assert (maf.n_flows, maf.hidden_width, maf.activation, maf.use_batchnorm) == \
        (5, 100, "relu", True)
    bnaf = FlowConfig.bnaf_default(100)
    assert (bnaf.n_flows, bnaf.hidden_width, bnaf.activation, bnaf.use_batchnorm) == \
        (6, 12, "tanh", False)
