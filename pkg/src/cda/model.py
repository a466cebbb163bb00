"""The sequence forecaster: shared causal encoder, attention reconstruction,
domain-specific outcome heads and the domain discriminator.

Two code paths share the parameters: a differentiable teacher-forced graph
for training, and a plain-numpy autoregressive loop for inference (covariate
rollout feeds predicted covariates and outcomes back into the encoders).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import checkpoint, kernels
from .autodiff import Node


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_x: int
    K: int
    u_dim: int = 0
    d_h: int = 32
    d_k: int = 8
    d_out: int = 16
    d_disc: int = 16
    window: int = 12
    shared_modules: bool = True  # ablation flag: separate per-domain encoders when False
    seed: int = 0

    @property
    def d_in(self) -> int:
        return self.d_x + self.K + 1 + self.u_dim

    def to_dict(self):
        return {
            "d_x": self.d_x, "K": self.K, "u_dim": self.u_dim, "d_h": self.d_h,
            "d_k": self.d_k, "d_out": self.d_out, "d_disc": self.d_disc,
            "window": self.window, "shared_modules": self.shared_modules, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


GEN_KEYS = ("enc.wx", "enc.wh", "enc.b", "cate.w", "cate.b",
            "attn.embed", "attn.key_w", "attn.key_b")


def _uniform(rng, fan_in, shape):
    lim = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-lim, lim, size=shape)


class CdaModel:
    """Parameter bundle plus forward passes for both domains."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Node] = {}
        prefixes = ["gen"] if config.shared_modules else ["gen_s", "gen_t"]
        for pre in prefixes:
            self._init_generator(rng, pre)
        for dom in ("source", "target"):
            self._init_outcome_head(rng, dom)
        c = config
        self._add("disc.w1", _uniform(rng, c.d_x, (c.d_x, c.d_disc)))
        self._add("disc.b1", np.zeros(c.d_disc))
        self._add("disc.w2", _uniform(rng, c.d_disc, (c.d_disc, 1)))
        self._add("disc.b2", np.zeros(1))

    def _add(self, name, value):
        self.params[name] = ad.parameter(name, value)

    def _init_generator(self, rng, pre):
        c = self.config
        self._add(f"{pre}.enc.wx", _uniform(rng, c.d_in, (c.d_in, 3 * c.d_h)))
        self._add(f"{pre}.enc.wh", _uniform(rng, c.d_h, (c.d_h, 3 * c.d_h)))
        self._add(f"{pre}.enc.b", np.zeros(3 * c.d_h))
        self._add(f"{pre}.cate.w", _uniform(rng, c.d_h, (c.K * c.d_h, c.d_x)))
        self._add(f"{pre}.cate.b", np.zeros((c.K, c.d_x)))
        self._add(f"{pre}.attn.embed", _uniform(rng, c.d_k, (c.K, c.d_k)))
        self._add(f"{pre}.attn.key_w", _uniform(rng, c.d_x, (c.d_x, c.d_k)))
        self._add(f"{pre}.attn.key_b", np.zeros(c.d_k))

    def _init_outcome_head(self, rng, dom):
        c = self.config
        d_in = c.d_h + c.d_x + c.K
        self._add(f"out.{dom}.w1", _uniform(rng, d_in, (d_in, c.d_out)))
        self._add(f"out.{dom}.b1", np.zeros(c.d_out))
        self._add(f"out.{dom}.w2", _uniform(rng, c.d_out, (c.d_out, 1)))
        self._add(f"out.{dom}.b2", np.zeros(1))

    # ---- parameter views -------------------------------------------------

    def _gen_prefix(self, domain: str) -> str:
        if domain not in ("source", "target"):
            raise ModelError(f"unknown domain tag {domain!r}")
        if self.config.shared_modules:
            return "gen"
        return "gen_s" if domain == "source" else "gen_t"

    def gen_params(self, domain: str) -> dict[str, Node]:
        pre = self._gen_prefix(domain)
        return {key: self.params[f"{pre}.{key}"] for key in GEN_KEYS}

    def out_params(self, domain: str) -> dict[str, Node]:
        if domain not in ("source", "target"):
            raise ModelError(f"unknown domain tag {domain!r}")
        return {k: self.params[f"out.{domain}.{k}"] for k in ("w1", "b1", "w2", "b2")}

    def generator_parameters(self) -> list[Node]:
        return [p for n, p in self.params.items() if not n.startswith("disc.")]

    def discriminator_parameters(self) -> list[Node]:
        return [p for n, p in self.params.items() if n.startswith("disc.")]

    def all_parameters(self) -> list[Node]:
        return list(self.params.values())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        for n, p in self.params.items():
            if n not in arrays:
                raise ModelError(f"checkpoint misses parameter '{n}'")
            if tuple(arrays[n].shape) != p.value.shape:
                raise ModelError(f"parameter '{n}': shape {arrays[n].shape} != {p.value.shape}")
            p.value = np.ascontiguousarray(arrays[n], dtype=np.float64)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"model_config": self.config.to_dict()}
        meta.update(extra or {})
        checkpoint.save(path, self.param_arrays(), meta)

    @classmethod
    def restore(cls, path):
        arrays, extra = checkpoint.load(path)
        model = cls(ModelConfig.from_dict(extra["model_config"]))
        model.load_arrays(arrays)
        return model, extra


# ---- shared wiring helpers ------------------------------------------------


def _encoder_input(X, Z_onehot, Y, U) -> np.ndarray:
    B, T = Y.shape
    parts = [X, Z_onehot, Y[:, :, None]]
    if U is not None and U.shape[-1]:
        parts.append(np.repeat(U[:, None, :], T, axis=1))
    return np.concatenate(parts, axis=2)


def gru_sequence(gen: dict, x: Node) -> Node:
    """Whole-sequence recurrent pass as one graph op (fused kernel)."""
    wx, wh, b = gen["enc.wx"], gen["enc.wh"], gen["enc.b"]
    B = x.value.shape[0]
    h0 = np.zeros((B, wh.value.shape[0]))
    H, R, U, C = kernels.gru_forward(x.value, wx.value, wh.value, b.value, h0)

    def vjp(g):
        dx, dwx, dwh, db, _ = kernels.gru_backward(
            x.value, wx.value, wh.value, h0, H, R, U, C, np.ascontiguousarray(g)
        )
        return dx, dwx, dwh, db

    return ad.custom(H, (x, wx, wh, b), vjp, "gru_sequence")


def _shifted_state(H: Node) -> Node:
    """Per-position previous state: zeros at t=0, H[t-1] afterwards."""
    B, T, dh = H.value.shape
    zero = ad.constant(np.zeros((B, 1, dh)))
    return ad.concat([zero, ad.narrow(H, 1, 0, T - 1)], axis=1)


def _shift_right(Z: np.ndarray) -> np.ndarray:
    out = np.zeros_like(Z)
    out[:, 1:] = Z[:, :-1]
    return out


def encode(model: CdaModel, domain: str, X, Z, Y, U=None) -> Node:
    """Recurrent summary of (covariates, one-hot treatments, outcome, static)."""
    X, Z, Y = np.atleast_3d(X), np.atleast_2d(Z), np.atleast_2d(Y)
    if X.shape[2] != model.config.d_x:
        raise ModelError(f"encode: d_x {X.shape[2]} != model {model.config.d_x}")
    Z_onehot = attn.one_hot(Z, model.config.K)
    enc_in = _encoder_input(X, Z_onehot, Y, U)
    if enc_in.shape[2] != model.config.d_in:
        raise ModelError(f"encode: input dim {enc_in.shape[2]} != model {model.config.d_in}")
    return gru_sequence(model.gen_params(domain), ad.constant(enc_in))


def effect_forward(model: CdaModel, domain: str, X, Z, Y, U=None):
    """Encoder + effect head only: states, next-covariate means and the
    one-step regression loss that trains the effect estimator."""
    cfg = model.config
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.int64)
    Y = np.asarray(Y, dtype=np.float64)
    T = Y.shape[1]
    gen = model.gen_params(domain)
    Z_onehot = attn.one_hot(Z, cfg.K)
    enc_in = _encoder_input(X, Z_onehot, Y, U)
    if enc_in.shape[2] != cfg.d_in:
        raise ModelError(
            f"input dim {enc_in.shape[2]} != model {cfg.d_in}; "
            f"check covariate width and static features"
        )
    H = gru_sequence(gen, ad.constant(enc_in))
    mu = attn.cate_mu(gen["cate.w"], gen["cate.b"], H, Z_onehot)
    aux = ad.scale(
        ad.sumsq(ad.sub(ad.narrow(mu, 1, 0, T - 1), ad.constant(X[:, 1:]))), 1.0 / (T - 1)
    )
    return {"H": H, "mu": mu, "aux": aux, "Z_onehot": Z_onehot}


def training_forward(model: CdaModel, domain: str, X, Z, Y, U=None):
    """Teacher-forced pass over a batch: states, effect head, reconstruction,
    outcome predictions and the mean-pooled representation.

    Returns a dict of graph nodes; ``y_pred`` covers steps 1..T-1.
    """
    cfg = model.config
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.int64)
    Y = np.asarray(Y, dtype=np.float64)
    B, T = Y.shape
    gen = model.gen_params(domain)
    base = effect_forward(model, domain, X, Z, Y, U)
    H, mu, aux, Z_onehot = base["H"], base["mu"], base["aux"], base["Z_onehot"]

    h_prev = _shifted_state(H)
    z_prev = _shift_right(Z)
    a = attn.answers(gen, Z, cfg.K)
    k = attn.keys(gen, h_prev, z_prev, cfg.K)
    alpha = attn.causal_score(a, k, cfg.window)
    R = attn.reconstruct(alpha, ad.constant(X), cfg.window)

    encR_in = ad.concat(
        [R, ad.constant(Z_onehot), ad.constant(Y[:, :, None])]
        + ([ad.constant(np.repeat(U[:, None, :], T, axis=1))] if U is not None and U.shape[-1] else []),
        axis=2,
    )
    HR = gru_sequence(gen, encR_in)

    out = model.out_params(domain)
    head_in = ad.concat(
        [ad.narrow(HR, 1, 0, T - 1), ad.narrow(R, 1, 1, T), ad.constant(Z_onehot[:, : T - 1])],
        axis=2,
    )
    hid = ad.tanh(ad.add(ad.matmul(head_in, out["w1"]), out["b1"]))
    y_pred = ad.add(ad.matmul(hid, out["w2"]), out["b2"])

    pooled = ad.mean_axis(R, 1)
    return {
        "H": H, "HR": HR, "mu": mu, "aux": aux, "alpha": alpha, "R": R,
        "y_pred": y_pred, "pooled": pooled,
    }


def predict_outcomes(model: CdaModel, domain: str, X, Z, Y, U=None) -> np.ndarray:
    """Teacher-forced outcome predictions for steps 1..T-1 (plain array)."""
    nodes = training_forward(model, domain, X, Z, Y, U)
    return nodes["y_pred"].value[:, :, 0]


def discriminate(model: CdaModel, pooled, reverse_strength: float | None = None) -> Node:
    """Domain probability from a mean-pooled reconstruction (logistic head)."""
    node = pooled if isinstance(pooled, Node) else ad.constant(np.atleast_2d(pooled))
    if reverse_strength is not None:
        node = ad.grad_reverse(node, reverse_strength)
    hid = ad.tanh(ad.add(ad.matmul(node, model.params["disc.w1"]), model.params["disc.b1"]))
    logit = ad.add(ad.matmul(hid, model.params["disc.w2"]), model.params["disc.b2"])
    return ad.sigmoid(logit)


# ---- autoregressive inference (numpy path) --------------------------------


@dataclass
class Forecast:
    y_hat: np.ndarray  # (tau,)
    x_hat: np.ndarray  # (tau, d_x)
    r_used: np.ndarray  # (tau, d_x)
    diagnostics: dict = field(default_factory=dict)


def _np_gen(model: CdaModel, domain: str):
    return {k: v.value for k, v in model.gen_params(domain).items()}


def _np_mu(gen, cfg, h, arm_onehot):
    inter = (h[..., None, :] * arm_onehot[..., :, None]).reshape(*h.shape[:-1], cfg.K * cfg.d_h)
    return inter @ gen["cate.w"] + arm_onehot @ gen["cate.b"]


def _np_keys(gen, cfg, h_prev, z_prev):
    oh = attn.one_hot(z_prev, cfg.K)
    oh0 = attn.one_hot(np.zeros_like(z_prev), cfg.K)
    effect = _np_mu(gen, cfg, h_prev, oh) - _np_mu(gen, cfg, h_prev, oh0)
    return effect @ gen["attn.key_w"] + gen["attn.key_b"]


def _np_gru_step(gen, h, x_row):
    H, _, _, _ = kernels.gru_forward(
        x_row[None, None, :], gen["enc.wx"], gen["enc.wh"], gen["enc.b"], h[None, :]
    )
    return H[0, 0]


def _np_outcome(model, domain, hr, r_next, z_onehot):
    out = model.out_params(domain)
    hid = np.tanh(np.concatenate([hr, r_next, z_onehot]) @ out["w1"].value + out["b1"].value)
    return (hid @ out["w2"].value + out["b2"].value).item()


def _softmax_row(scores):
    e = np.exp(scores - scores.max())
    return e / e.sum()


def forecast(model: CdaModel, domain: str, X_hist, Z_hist, Y_hist, z_future, U=None) -> Forecast:
    """Roll the generator forward for len(z_future) steps.

    ``z_future[s]`` is the treatment at history_length + s; outcome s is
    predicted from the previous step's treatment (the effect pairing used in
    training), the reconstruction at the new position and the reconstructed-
    history state. Predicted covariates and outcomes are fed back in.
    """
    cfg = model.config
    gen = _np_gen(model, domain)
    X_hist = np.atleast_2d(np.asarray(X_hist, dtype=np.float64))
    Z_hist = np.asarray(Z_hist, dtype=np.int64)
    Y_hist = np.asarray(Y_hist, dtype=np.float64)
    z_future = np.asarray(z_future, dtype=np.int64)
    tau = z_future.shape[0]
    th = X_hist.shape[0]
    if th < 1:
        raise ModelError("forecast: history must contain at least one step")
    U_row = np.asarray(U, dtype=np.float64).reshape(-1) if U is not None else np.zeros(0)
    if U_row.shape[0] != cfg.u_dim:
        raise ModelError(f"forecast: got {U_row.shape[0]} static features, model wants {cfg.u_dim}")
    u_part = U_row if cfg.u_dim else None
    if tau == 0:
        return Forecast(np.zeros(0), np.zeros((0, cfg.d_x)), np.zeros((0, cfg.d_x)))

    # encode the observed prefix in one batched pass
    Z_oh_hist = attn.one_hot(Z_hist, cfg.K)
    enc_in = _encoder_input(X_hist[None], Z_oh_hist[None], Y_hist[None],
                            U_row[None] if cfg.u_dim else None)
    H, _, _, _ = kernels.gru_forward(enc_in, gen["enc.wx"], gen["enc.wh"], gen["enc.b"],
                                     np.zeros((1, cfg.d_h)))
    H = H[0]
    h_prev_seq = np.vstack([np.zeros((1, cfg.d_h)), H[:-1]])
    z_prev_seq = np.concatenate([[0], Z_hist[:-1]])
    keys_buf = list(_np_keys(gen, cfg, h_prev_seq, z_prev_seq))
    x_buf = list(X_hist)

    # reconstructed-history encoder over the prefix
    answers_hist = Z_oh_hist @ gen["attn.embed"]
    scores = kernels.band_scores_fwd(answers_hist[None], np.asarray(keys_buf)[None], cfg.window)
    alpha = kernels.band_softmax_fwd(scores, cfg.window)
    R_hist = kernels.band_wsum_fwd(alpha, X_hist[None])[0]
    encR_in = _encoder_input(R_hist[None], Z_oh_hist[None], Y_hist[None],
                             U_row[None] if cfg.u_dim else None)
    HR, _, _, _ = kernels.gru_forward(encR_in, gen["enc.wx"], gen["enc.wh"], gen["enc.b"],
                                      np.zeros((1, cfg.d_h)))
    HR = HR[0]

    h = H[-1]
    hr = HR[-1]
    z_prev = int(Z_hist[-1])
    y_hat = np.empty(tau)
    x_hat = np.empty((tau, cfg.d_x))
    r_used = np.empty((tau, cfg.d_x))
    inv_sqrt = 1.0 / np.sqrt(cfg.d_k)
    for s in range(tau):
        oh_prev = attn.one_hot(np.array(z_prev), cfg.K)
        x_next = _np_mu(gen, cfg, h, oh_prev)
        k_next = _np_keys(gen, cfg, h[None, :], np.array([z_prev]))[0]
        x_buf.append(x_next)
        keys_buf.append(k_next)
        z_cur = int(z_future[s])
        a_cur = gen["attn.embed"][z_cur]
        lo = max(0, len(x_buf) - cfg.window)
        window_keys = np.asarray(keys_buf[lo:])
        scores_row = window_keys @ a_cur * inv_sqrt
        alpha_row = _softmax_row(scores_row)
        r_next = alpha_row @ np.asarray(x_buf[lo:])
        y_next = _np_outcome(model, domain, hr, r_next, oh_prev)

        oh_cur = attn.one_hot(np.array(z_cur), cfg.K)
        step_in = np.concatenate([x_next, oh_cur, [y_next]] + ([u_part] if u_part is not None else []))
        h = _np_gru_step(gen, h, step_in)
        stepR_in = np.concatenate([r_next, oh_cur, [y_next]] + ([u_part] if u_part is not None else []))
        hr = _np_gru_step(gen, hr, stepR_in)

        y_hat[s] = y_next
        x_hat[s] = x_next
        r_used[s] = r_next
        z_prev = z_cur
    return Forecast(y_hat=y_hat, x_hat=x_hat, r_used=r_used,
                    diagnostics={"history_len": th})


def rollout_covariates(model: CdaModel, domain: str, X_hist, Z_hist, Y_hist, z_future, U=None):
    """Autoregressive covariate path under the specified future treatments."""
    return forecast(model, domain, X_hist, Z_hist, Y_hist, z_future, U).x_hat
