"""Executable property battery behind the ``check`` CLI subcommand.

Each property returns (ok, detail). These are the same contracts the test
suite pins down; the CLI exposes them so a user can verify an installation
without the test harness.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import attention as attn
from . import checkpoint
from . import evaluate
from . import model as cda_model
from . import objectives as obj
from . import scm


def _bool(ok, detail=""):
    return bool(ok), detail


def check_gradient_ops(seed=0, fast=False):
    """Every registered op agrees with central differences on random shapes."""
    rng = np.random.default_rng(seed)
    trials = 3 if fast else 6
    worst = 0.0
    for i in range(trials):
        B, T, d = rng.integers(1, 4), rng.integers(2, 5), rng.integers(1, 4)
        x = ad.parameter("x", rng.normal(size=(int(B), int(T), int(d))))
        w = ad.parameter("w", rng.normal(size=(int(d), 3)))
        b = ad.parameter("b", rng.normal(size=(3,)))
        mask = rng.normal(size=(int(B), int(T), 1))

        def f():
            y = ad.matmul(ad.tanh(x), w)
            y = ad.add(y, b)
            y = ad.mul(ad.sigmoid(y), ad.exp(ad.scale(y, 0.1)))
            y = ad.softmax(y, axis=-1)
            y = ad.mask_mul(y, mask)
            z = ad.concat([y, ad.square(y)], axis=-1)
            z = ad.narrow(z, 1, 0, max(1, int(T) - 1))
            s = ad.add(ad.sumsq(z), ad.mean_all(ad.log(ad.add_scalar(ad.square(z), 1.0))))
            reduced = ad.sum_axis(ad.mean_axis(ad.sub(ad.sqrt(ad.add_scalar(ad.square(y), 0.5)), y), 0), 0)
            return ad.add(s, ad.sum_all(reduced))

        rep = ad.grad_check(f, [x, w, b], step=1e-5, tolerance=1e-4)
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            return _bool(False, f"trial {i}: {rep}")
    return _bool(True, f"max rel err {worst:.2e} over {trials} random shapes")


def _toy_objective(seed=0):
    rng = np.random.default_rng(seed)
    cfg = cda_model.ModelConfig(d_x=3, K=3, u_dim=1, d_h=5, d_k=3, d_out=4, d_disc=3,
                                window=4, seed=seed)
    m = cda_model.CdaModel(cfg)
    B, T = 2, 8
    mk = lambda: (
        rng.normal(size=(B, T, 3)), rng.integers(0, 3, size=(B, T)),
        rng.normal(size=(B, T)), rng.normal(size=(B, 1)),
    )
    bs, bt = mk(), mk()

    def f():
        fs = cda_model.training_forward(m, "source", *bs)
        ft = cda_model.training_forward(m, "target", *bt)
        ls = obj.seq_loss_node(fs["y_pred"], bs[2][:, 1:, None], T - 4, 3)
        lt = obj.seq_loss_node(ft["y_pred"], bt[2][:, 1:, None], T - 4, 3)
        dl = obj.domain_loss(ad.constant(bs[0]), ad.constant(bt[0]), fs["R"], ft["R"],
                             bs[1], bt[1], gamma=0.3)
        p_s = cda_model.discriminate(m, fs["pooled"])
        p_t = cda_model.discriminate(m, ft["pooled"])
        bce = ad.add(obj.binary_cross_entropy(p_s, 0.0), obj.binary_cross_entropy(p_t, 1.0))
        total = ad.add(ad.add(ls, lt), ad.add(fs["aux"], ft["aux"]))
        return ad.add(total, ad.add(dl["l_dom"], bce))

    return f, m


def check_gradient_full_objective(seed=0, fast=False):
    """Composite two-episode objective passes finite differences at 1e-4."""
    f, m = _toy_objective(seed)
    rep = ad.grad_check(f, m.all_parameters(), step=1e-5, tolerance=1e-4)
    return _bool(rep.passed, f"max rel err {rep.max_rel_err:.2e}")


def check_relaxed_bound(seed=0, fast=False):
    """No violations of the relaxed CMMD bound on shifted Gaussians."""
    S, T, zs, zt = obj.shifted_gaussians(n_s=50, n_t=40, d=3, shift=1.0, seed=seed)
    trials = 20 if fast else 100
    bad = []
    for kernel in (obj.KernelSpec("linear"), obj.KernelSpec("rbf", bandwidth=1.5)):
        rep = obj.bound_check(S, T, zs, zt, kernel, n_trials=trials, seed=seed)
        if rep.violations:
            bad.append(f"{kernel.kind}: {rep.violations}/{rep.n_trials}")
    return _bool(not bad, "; ".join(bad) if bad else f"0 violations in {trials} trials x 2 kernels")


def check_domain_loss_identity(seed=0, fast=False):
    """Unified domain loss equals the sum of its four terms (+cross) to 1e-12."""
    import warnings

    rng = np.random.default_rng(seed)
    worst = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", obj.ConditionCoverageWarning)
        for _ in range(10 if fast else 50):
            B, T, d = int(rng.integers(1, 4)), int(rng.integers(3, 7)), int(rng.integers(1, 4))
            xs, xt = rng.normal(size=(B, T, d)), rng.normal(size=(B, T, d))
            rs, rt = rng.normal(size=(B, T, d)), rng.normal(size=(B, T, d))
            zs = rng.integers(0, 3, size=(B, T))
            zt = rng.integers(0, 3, size=(B, T))
            if not (zs > 0).any():
                zs[0, 0] = 1
            betas = tuple(rng.uniform(0.5, 2.0, size=4))
            gamma = float(rng.uniform(0.0, 1.0))
            parts = obj.domain_loss(ad.constant(xs), ad.constant(xt), ad.constant(rs),
                                    ad.constant(rt), zs, zt, betas, gamma)
            summed = float(parts["l_dom"].value)
            unified = obj.domain_loss_unified(xs, xt, rs, rt, zs, zt, betas, gamma)
            worst = max(worst, abs(summed - unified))
    return _bool(worst <= 1e-12, f"max |summed - unified| = {worst:.2e}")


def check_abduction(seed=0, fast=False):
    """Counterfactual under the factual arm reproduces the factual path bit-exactly."""
    spec = scm.default_spec(d_x=3, K=4, seed=seed, lag=0)
    eps = scm.simulate(spec, 20, 40, seed=seed + 1)
    rng = np.random.default_rng(seed)
    n = 200 if fast else 1000
    for _ in range(n):
        ep = eps[rng.integers(len(eps))]
        t = int(rng.integers(0, ep.length - 1))
        x_cf, y_cf = scm.counterfactual(spec, ep, t, int(ep.Z[t]))
        if not (np.array_equal(x_cf[0], ep.X[t + 1]) and y_cf[0] == ep.Y[t + 1]):
            return _bool(False, f"factual replay differs at t={t}")
    return _bool(True, f"{n} queries bit-exact")


def check_counterfactual_identity(seed=0, fast=False):
    """Linear world: X_cf - X = B[z] - B[Z_t] exactly (shared noise cancels)."""
    spec = scm.default_spec(d_x=3, K=4, seed=seed, lag=0)
    eps = scm.simulate(spec, 20, 40, seed=seed + 1)
    rng = np.random.default_rng(seed)
    worst = 0.0
    n = 200 if fast else 1000
    for _ in range(n):
        ep = eps[rng.integers(len(eps))]
        t = int(rng.integers(0, ep.length - 1))
        z = int(rng.integers(0, spec.K))
        x_cf, y_cf = scm.counterfactual(spec, ep, t, z)
        diff = x_cf[0] - ep.X[t + 1] - (spec.B[z] - spec.B[ep.Z[t]])
        ydiff = y_cf[0] - ep.Y[t + 1] - spec.c @ (spec.B[z] - spec.B[ep.Z[t]])
        worst = max(worst, float(np.max(np.abs(diff))), abs(float(ydiff)))
    return _bool(worst <= 1e-12, f"max deviation {worst:.2e} over {n} queries")


def check_oracle_cate(seed=0, fast=False):
    """Antisymmetry is exact; the linear-world contrast is history-free."""
    spec = scm.default_spec(d_x=3, K=4, seed=seed, lag=0)
    eps = scm.simulate(spec, 10, 30, seed=seed + 2)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(100):
        ep = eps[rng.integers(len(eps))]
        t = int(rng.integers(0, ep.length - 1))
        z, zr = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        fwd = scm.oracle_cate(spec, ep, t, z, zr)
        bwd = scm.oracle_cate(spec, ep, t, zr, z)
        if not np.array_equal(fwd, -bwd):
            return _bool(False, "antisymmetry broken")
        vals.append(scm.oracle_cate(spec, ep, t, 2, 0))
    stacked = np.asarray(vals)
    spread = float(np.max(stacked.max(axis=0) - stacked.min(axis=0)))
    variance = 0.0 if spread == 0.0 else float(np.max(np.var(stacked, axis=0)))
    ok = variance == 0.0 and np.allclose(vals[0], spec.B[2] - spec.B[0], atol=1e-15)
    return _bool(ok, f"oracle variance over (episode,t): {variance}")


def check_confounding_gap(seed=0, fast=False):
    """Outcome-driven logging biases the conditional mean; a uniform policy does not."""
    n = 3000 if fast else 10000
    base = scm.default_spec(d_x=2, K=2, seed=seed, lag=0, noise_scale=0.3, y_noise_scale=0.2)
    confounded = scm.ScmSpec(
        d_x=2, K=2, A=base.A, B=base.B, c=base.c,
        noise_scale=0.3, y_noise_scale=0.2, lag=0,
        policy=scm.LoggingPolicy([0.5, 0.5], outcome_sensitivity=[0.0, 3.0]),
    )

    def gap_pvalue(spec):
        ep = scm.simulate(spec, 1, n, seed=seed + 3)[0]
        sel = ep.Z[:-1] == 1
        do_means = ep.X[:-1] @ spec.A.T + spec.B[1] + 0.0  # intervene(t, 1) for all t
        observed = float(np.linalg.norm(do_means[sel].mean(axis=0) - do_means.mean(axis=0)))
        rng = np.random.default_rng(seed + 4)
        null = []
        for _ in range(200):
            fake = rng.permutation(sel)
            null.append(float(np.linalg.norm(do_means[fake].mean(axis=0) - do_means.mean(axis=0))))
        return float((np.sum(np.asarray(null) >= observed) + 1) / 201)

    p_conf = gap_pvalue(confounded)
    p_unif = gap_pvalue(base)
    ok = p_conf < 0.01 and p_unif > 0.01
    return _bool(ok, f"p(confounded)={p_conf:.4f}, p(uniform)={p_unif:.4f}")


def check_attention_contracts(seed=0, fast=False):
    """Row-stochastic, past-only, convex-hull and self-window identities."""
    rng = np.random.default_rng(seed)
    n = 100 if fast else 1000
    for i in range(n):
        B, T, dk, dx = 2, int(rng.integers(3, 9)), 3, 2
        w = int(rng.integers(1, 6))
        a = ad.constant(rng.normal(size=(B, T, dk)) * 3)
        k = ad.constant(rng.normal(size=(B, T, dk)) * 3)
        x = ad.constant(rng.normal(size=(B, T, dx)))
        alpha = attn.causal_score(a, k, w)
        r = attn.reconstruct(alpha, x, w)
        if np.max(np.abs(alpha.value.sum(axis=2) - 1.0)) > 1e-12:
            return _bool(False, f"rows not stochastic (trial {i})")
        if np.min(alpha.value) < 0:
            return _bool(False, "negative weight")
        pos = attn.window_positions(T, w)
        if np.any(alpha.value[:, pos < 0] != 0.0):
            return _bool(False, "weight on an invalid (future/pre-start) lane")
        for t in range(T):
            lo = max(0, t - w + 1)
            wins = x.value[:, lo : t + 1, :]
            if np.any(r.value[:, t, :] > wins.max(axis=1) + 1e-12) or np.any(
                r.value[:, t, :] < wins.min(axis=1) - 1e-12
            ):
                return _bool(False, f"hull violated at t={t}")
        alpha1 = attn.causal_score(a, k, 1)
        r1 = attn.reconstruct(alpha1, x, 1)
        if not np.array_equal(r1.value, x.value):
            return _bool(False, "w=1 self-window is not the identity")
    return _bool(True, f"{n} random batches")


def check_metric_identities(seed=0, fast=False):
    y = np.array([1.0, 2.0, 4.0, -1.0])
    m1 = evaluate.metrics(y, y)
    m2 = evaluate.metrics(y, np.full(4, y.mean()))
    m3 = evaluate.metrics([0.0, 0.0], [3.0, 4.0])
    ok = (
        m1.r2 == 1.0 and m1.rmse == 0.0 and m1.mae == 0.0
        and abs(m2.r2) < 1e-15
        and abs(m3.rmse - np.sqrt(12.5)) <= 1e-12
        and abs(m3.mae - 3.5) <= 1e-12
        and evaluate.metrics(np.ones(3), np.ones(3) * 2).r2 is None
    )
    return _bool(ok, "perfect fit, mean predictor, hand case, undefined marker")


def check_checkpoint_roundtrip(seed=0, fast=False, tmpdir=None):
    import tempfile

    rng = np.random.default_rng(seed)
    arrays = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,))}
    with tempfile.TemporaryDirectory(dir=tmpdir) as d:
        path = f"{d}/test.ckpt"
        checkpoint.save(path, arrays, {"note": 1})
        back, extra = checkpoint.load(path)
    ok = all(np.array_equal(arrays[k], back[k]) for k in arrays) and extra["note"] == 1
    return _bool(ok, "bit-exact array round trip")


def check_sgd_contract(seed=0, fast=False):
    p = ad.parameter("x", np.array([1.0]))
    p.grad = np.array([2.0])
    ad.sgd_step([p], 0.1)
    if p.value[0] != 0.8:
        return _bool(False, f"basic update gave {p.value[0]}")
    x = ad.parameter("x", np.array([1.0]))
    for _ in range(100):
        ad.zero_grad([x])
        ad.backward(ad.sumsq(x))
        ad.sgd_step([x], 0.1)
    return _bool(abs(float(x.value[0])) < 1e-8, f"|x| after 100 steps: {abs(float(x.value[0])):.2e}")


ALL_CHECKS = [
    ("gradient_ops", check_gradient_ops),
    ("gradient_full_objective", check_gradient_full_objective),
    ("relaxed_bound", check_relaxed_bound),
    ("domain_loss_identity", check_domain_loss_identity),
    ("simulator_abduction", check_abduction),
    ("simulator_counterfactual_identity", check_counterfactual_identity),
    ("simulator_oracle_cate", check_oracle_cate),
    ("simulator_confounding_gap", check_confounding_gap),
    ("attention_contracts", check_attention_contracts),
    ("metric_identities", check_metric_identities),
    ("checkpoint_roundtrip", check_checkpoint_roundtrip),
    ("sgd_contract", check_sgd_contract),
]


def run_checks(seed: int = 0, fast: bool = False, names=None):
    """Run the battery; returns list of (name, ok, detail)."""
    results = []
    for name, fn in ALL_CHECKS:
        if names and name not in names:
            continue
        try:
            ok, detail = fn(seed=seed, fast=fast)
        except Exception as exc:  # a crashed property is a failed property
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
