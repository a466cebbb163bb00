import numpy as np
import pytest

from cda import attention as attn
from cda import autodiff as ad
from cda import model as M


def small_model(seed=0, **kw):
    defaults = dict(d_x=2, K=3, u_dim=0, d_h=5, d_k=4, d_out=4, d_disc=3, window=3)
    defaults.update(kw)
    return M.CdaModel(M.ModelConfig(seed=seed, **defaults))


def batch(rng, model, B=2, T=8):
    cfg = model.config
    return (
        rng.normal(size=(B, T, cfg.d_x)),
        rng.integers(0, cfg.K, size=(B, T)),
        rng.normal(size=(B, T)),
        rng.normal(size=(B, cfg.u_dim)) if cfg.u_dim else np.zeros((B, 0)),
    )


def test_encode_zero_everything_stays_zero():
    m = small_model()
    gen = m.gen_params("source")
    gen["enc.wx"].value[:] = 0.3
    gen["enc.b"].value[:] = 0.0
    X = np.zeros((1, 5, 2))
    Z = np.zeros((1, 5), dtype=int)
    Y = np.zeros((1, 5))
    # zero input columns: one-hot arm 0 is nonzero, so zero those columns too
    gen["enc.wx"].value[2, :] = 0.0
    H = M.encode(m, "source", X, Z, Y)
    assert np.array_equal(H.value, np.zeros((1, 5, m.config.d_h)))


def test_encode_causality_under_future_permutation():
    rng = np.random.default_rng(0)
    m = small_model()
    X, Z, Y, U = batch(rng, m, B=1, T=9)
    H1 = M.encode(m, "source", X, Z, Y).value
    t = 4
    Xp, Zp, Yp = X.copy(), Z.copy(), Y.copy()
    perm = rng.permutation(np.arange(t + 1, 9))
    Xp[:, t + 1 :] = X[:, perm]
    Zp[:, t + 1 :] = Z[:, perm]
    Yp[:, t + 1 :] = Y[:, perm]
    H2 = M.encode(m, "source", Xp, Zp, Yp).value
    assert np.array_equal(H1[:, : t + 1], H2[:, : t + 1])
    assert not np.allclose(H1[:, t + 1 :], H2[:, t + 1 :])


def test_encode_matches_manual_unroll():
    rng = np.random.default_rng(1)
    m = small_model()
    cfg = m.config
    X, Z, Y, _ = batch(rng, m, B=1, T=3)
    gen = {k: v.value for k, v in m.gen_params("source").items()}
    H = M.encode(m, "source", X, Z, Y).value[0]

    def sigmoid(v):
        return 1.0 / (1.0 + np.exp(-v))

    h = np.zeros(cfg.d_h)
    dh = cfg.d_h
    for t in range(3):
        x_t = np.concatenate([X[0, t], np.eye(cfg.K)[Z[0, t]], [Y[0, t]]])
        g = x_t @ gen["enc.wx"] + gen["enc.b"]
        r = sigmoid(g[:dh] + h @ gen["enc.wh"][:, :dh])
        u = sigmoid(g[dh : 2 * dh] + h @ gen["enc.wh"][:, dh : 2 * dh])
        c = np.tanh(g[2 * dh :] + (r * h) @ gen["enc.wh"][:, 2 * dh :])
        h = (1 - u) * h + u * c
        assert np.allclose(H[t], h, atol=1e-12)


def test_encode_shape_mismatch_error():
    m = small_model()
    with pytest.raises(M.ModelError, match="d_x"):
        M.encode(m, "source", np.zeros((1, 4, 7)), np.zeros((1, 4), dtype=int), np.zeros((1, 4)))


def test_shared_modules_identical_states_across_domains():
    rng = np.random.default_rng(2)
    m = small_model()
    X, Z, Y, U = batch(rng, m)
    fs = M.training_forward(m, "source", X, Z, Y)
    ft = M.training_forward(m, "target", X, Z, Y)
    assert np.array_equal(fs["H"].value, ft["H"].value)
    assert np.array_equal(fs["R"].value, ft["R"].value)
    assert np.array_equal(fs["alpha"].value, ft["alpha"].value)
    # outputs differ only through the outcome heads
    assert not np.allclose(fs["y_pred"].value, ft["y_pred"].value)


def test_separate_generators_config_flag():
    rng = np.random.default_rng(3)
    m = small_model(shared_modules=False)
    X, Z, Y, U = batch(rng, m)
    fs = M.training_forward(m, "source", X, Z, Y)
    ft = M.training_forward(m, "target", X, Z, Y)
    assert not np.allclose(fs["H"].value, ft["H"].value)
    names = {p.name for p in m.all_parameters()}
    assert any(n.startswith("gen_s.") for n in names)
    assert any(n.startswith("gen_t.") for n in names)


def test_markov_stepwise_consistency():
    # full-sequence teacher-forced outcomes equal the stepwise recursion
    rng = np.random.default_rng(4)
    m = small_model(u_dim=2)
    cfg = m.config
    X, Z, Y, U = batch(rng, m, B=1, T=7)
    y_full = M.predict_outcomes(m, "source", X, Z, Y, U)[0]

    gen = {k: v.value for k, v in m.gen_params("source").items()}
    out = {k: v.value for k, v in m.out_params("source").items()}
    T = 7
    oh = np.eye(cfg.K)[Z[0]]
    enc_in = np.concatenate([X[0], oh, Y[0][:, None], np.repeat(U, T, axis=0)], axis=1)
    from cda.kernels import pyops

    H = pyops.gru_forward(enc_in[None], gen["enc.wx"], gen["enc.wh"], gen["enc.b"],
                          np.zeros((1, cfg.d_h)))[0][0]
    h_prev = np.vstack([np.zeros(cfg.d_h), H[:-1]])
    z_prev = np.concatenate([[0], Z[0, :-1]])

    def mu(h, arm):
        o = np.eye(cfg.K)[arm]
        inter = (h[:, None, :] * o[:, :, None]).reshape(len(h), cfg.K * cfg.d_h)
        return inter @ gen["cate.w"] + o @ gen["cate.b"]

    keys = (mu(h_prev, z_prev) - mu(h_prev, np.zeros(T, dtype=int))) @ gen["attn.key_w"] + gen["attn.key_b"]
    answers = oh @ gen["attn.embed"]
    R = np.zeros((T, cfg.d_x))
    for t in range(T):
        lo = max(0, t - cfg.window + 1)
        scores = keys[lo : t + 1] @ answers[t] / np.sqrt(cfg.d_k)
        e = np.exp(scores - scores.max())
        R[t] = (e / e.sum()) @ X[0, lo : t + 1]
    encR_in = np.concatenate([R, oh, Y[0][:, None], np.repeat(U, T, axis=0)], axis=1)
    HR = pyops.gru_forward(encR_in[None], gen["enc.wx"], gen["enc.wh"], gen["enc.b"],
                           np.zeros((1, cfg.d_h)))[0][0]
    for t in range(T - 1):
        head_in = np.concatenate([HR[t], R[t + 1], oh[t]])
        hid = np.tanh(head_in @ out["w1"] + out["b1"])
        y_step = (hid @ out["w2"] + out["b2"]).item()
        assert abs(y_step - y_full[t]) < 1e-12


def test_predict_outcomes_unknown_domain():
    m = small_model()
    with pytest.raises(M.ModelError, match="domain"):
        M.predict_outcomes(m, "both", np.zeros((1, 3, 2)), np.zeros((1, 3), dtype=int),
                           np.zeros((1, 3)))


def test_forecast_empty_horizon():
    m = small_model()
    rng = np.random.default_rng(5)
    X, Z, Y, _ = batch(rng, m, B=1, T=6)
    fc = M.forecast(m, "source", X[0], Z[0], Y[0], np.zeros(0, dtype=int))
    assert fc.y_hat.shape == (0,)
    assert fc.x_hat.shape == (0, 2)


def test_forecast_first_step_is_effect_head_mean():
    rng = np.random.default_rng(6)
    m = small_model()
    cfg = m.config
    X, Z, Y, _ = batch(rng, m, B=1, T=6)
    fc = M.forecast(m, "source", X[0], Z[0], Y[0], np.array([1]))
    H = M.encode(m, "source", X, Z, Y).value
    mu = attn.cate_mu(
        m.gen_params("source")["cate.w"], m.gen_params("source")["cate.b"],
        ad.constant(H[:, -1:]), attn.one_hot(Z[:, -1:], cfg.K),
    ).value[0, 0]
    assert np.allclose(fc.x_hat[0], mu, atol=1e-12)


def test_forecasts_diverge_with_treatments_on_trained_weights():
    rng = np.random.default_rng(7)
    m = small_model()
    for p in m.all_parameters():
        p.value = rng.normal(size=p.value.shape) * 0.4
    X, Z, Y, _ = batch(rng, m, B=1, T=10)
    f1 = M.forecast(m, "source", X[0], Z[0], Y[0], np.full(4, 1))
    f2 = M.forecast(m, "source", X[0], Z[0], Y[0], np.full(4, 2))
    assert not np.allclose(f1.y_hat, f2.y_hat)


def test_zeroed_effect_head_gives_constant_bias_path():
    m = small_model()
    gen = m.gen_params("source")
    gen["cate.w"].value[:] = 0.0
    gen["cate.b"].value[:] = 0.7
    rng = np.random.default_rng(8)
    X, Z, Y, _ = batch(rng, m, B=1, T=6)
    fc = M.forecast(m, "source", X[0], Z[0], Y[0], np.array([1, 1, 1]))
    assert np.allclose(fc.x_hat, 0.7, atol=1e-12)


def _neutralize_treatment_pathways(m):
    cfg = m.config
    gen = m.gen_params("source")
    # encoder: zero the one-hot input columns
    gen["enc.wx"].value[cfg.d_x : cfg.d_x + cfg.K, :] = 0.0
    # effect head: same map and bias for every arm
    w = gen["cate.w"].value
    block = w[: cfg.d_h].copy()
    for k in range(cfg.K):
        w[k * cfg.d_h : (k + 1) * cfg.d_h] = block
    gen["cate.b"].value[:] = gen["cate.b"].value[0]
    # attention: identical answer embeddings
    gen["attn.embed"].value[:] = gen["attn.embed"].value[0]
    for dom in ("source", "target"):
        out = m.out_params(dom)
        out["w1"].value[cfg.d_h + cfg.d_x :, :] = 0.0


def test_treatments_enter_only_via_declared_pathways():
    rng = np.random.default_rng(9)
    m = small_model()
    for p in m.all_parameters():
        p.value = rng.normal(size=p.value.shape) * 0.3
    _neutralize_treatment_pathways(m)
    X, Z, Y, _ = batch(rng, m, B=1, T=10)
    f1 = M.forecast(m, "source", X[0], Z[0], Y[0], np.full(4, 1))
    f2 = M.forecast(m, "source", X[0], Z[0], Y[0], np.full(4, 2))
    assert np.allclose(f1.y_hat, f2.y_hat, atol=1e-12)
    assert np.allclose(f1.x_hat, f2.x_hat, atol=1e-12)


def test_discriminator_zero_final_layer_gives_half():
    m = small_model()
    m.params["disc.w2"].value[:] = 0.0
    m.params["disc.b2"].value[:] = 0.0
    p = M.discriminate(m, np.ones((4, 2)))
    assert np.array_equal(p.value, np.full((4, 1), 0.5))


def test_discriminator_label_swap_symmetry():
    from cda import objectives as obj

    rng = np.random.default_rng(10)
    m = small_model()
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    pa, pb = M.discriminate(m, a), M.discriminate(m, b)
    loss_fwd = obj.binary_cross_entropy(pa, 0.0).value + obj.binary_cross_entropy(pb, 1.0).value
    # swapping the domains with flipped labels gives the identical loss
    loss_swap = obj.binary_cross_entropy(pb, 1.0).value + obj.binary_cross_entropy(pa, 0.0).value
    assert loss_fwd.item() == loss_swap.item()


def test_checkpoint_restore_roundtrip(tmp_path):
    m = small_model(seed=11)
    path = tmp_path / "m.ckpt"
    m.save(path, extra={"note": "x"})
    back, extra = M.CdaModel.restore(path)
    assert extra["note"] == "x"
    for a, b in zip(m.all_parameters(), back.all_parameters()):
        assert np.array_equal(a.value, b.value)


def test_rollout_covariates_wrapper():
    rng = np.random.default_rng(12)
    m = small_model()
    X, Z, Y, _ = batch(rng, m, B=1, T=6)
    xh = M.rollout_covariates(m, "source", X[0], Z[0], Y[0], np.array([0, 1]))
    assert xh.shape == (2, 2)
