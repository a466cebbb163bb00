"""Synthetic sequential treatment-outcome worlds with exact causal oracles.

Structural assignments (linear by default, optional tanh squashing of the
transition's systematic part, noise always additive outside it):

    X[t+1] = f(A @ X[t] + B[Z[t - lag]] + u_load @ U) + eps[t+1]
    Y[t]   = c @ X[t] + eta[t]
    Z[t]   ~ logging policy conditioned on Y[t-1]

Treatment index 0 means "no treatment" and is the reference arm. Noise draws
are stored per episode so counterfactual queries replay the exact exogenous
history (abduction by storage).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DomainDataset, Episode, NoiseTrace


class ScmError(ValueError):
    pass


@dataclass
class LoggingPolicy:
    """Treatment probabilities as a function of the previous outcome.

    p(Z=k | y_prev) = softmax(log base_probs_k + outcome_sensitivity_k * y_prev);
    zero sensitivity reproduces base_probs exactly.
    """

    base_probs: np.ndarray
    outcome_sensitivity: np.ndarray | None = None

    def __post_init__(self):
        self.base_probs = np.asarray(self.base_probs, dtype=np.float64)
        if np.any(self.base_probs < 0) or self.base_probs.sum() <= 0:
            raise ScmError("policy: base_probs must be nonnegative and sum > 0")
        self.base_probs = self.base_probs / self.base_probs.sum()
        if self.outcome_sensitivity is None:
            self.outcome_sensitivity = np.zeros_like(self.base_probs)
        else:
            self.outcome_sensitivity = np.asarray(self.outcome_sensitivity, dtype=np.float64)
        if self.outcome_sensitivity.shape != self.base_probs.shape:
            raise ScmError("policy: sensitivity shape differs from base_probs")

    @property
    def K(self) -> int:
        return self.base_probs.shape[0]

    def probs(self, y_prev: float) -> np.ndarray:
        if np.all(self.outcome_sensitivity == 0.0):
            return self.base_probs
        with np.errstate(divide="ignore"):
            logits = np.log(self.base_probs) + self.outcome_sensitivity * y_prev
        logits = logits - logits.max()
        p = np.exp(logits)
        return p / p.sum()

    def to_dict(self):
        return {
            "base_probs": self.base_probs.tolist(),
            "outcome_sensitivity": self.outcome_sensitivity.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["base_probs"]), np.asarray(d["outcome_sensitivity"]))


def uniform_policy(K: int) -> LoggingPolicy:
    return LoggingPolicy(np.full(K, 1.0 / K))


@dataclass
class ScmSpec:
    d_x: int
    K: int
    A: np.ndarray  # (d_x, d_x) covariate transition
    B: np.ndarray  # (K, d_x) per-treatment effect vectors, row 0 = no treatment
    c: np.ndarray  # (d_x,) outcome loading
    u_dim: int = 0
    u_load: np.ndarray | None = None  # (d_x, u_dim)
    noise_scale: np.ndarray | float = 0.1
    y_noise_scale: float = 0.1
    lag: int = 1
    policy: LoggingPolicy | None = None
    transition: str = "linear"  # linear | tanh
    x0: np.ndarray | None = None
    policy_names: list[str] | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64).reshape(self.d_x, self.d_x)
        self.B = np.asarray(self.B, dtype=np.float64).reshape(self.K, self.d_x)
        self.c = np.asarray(self.c, dtype=np.float64).reshape(self.d_x)
        if self.K < 2:
            raise ScmError("K must be >= 2 (index 0 is reserved for 'no treatment')")
        if self.lag < 0:
            raise ScmError("lag must be >= 0")
        rho = float(np.max(np.abs(np.linalg.eigvals(self.A))))
        if rho >= 1.0:
            raise ScmError(f"unstable spec: spectral radius of A is {rho:.4f} >= 1")
        if self.u_load is None:
            self.u_load = np.zeros((self.d_x, self.u_dim))
        self.u_load = np.asarray(self.u_load, dtype=np.float64).reshape(self.d_x, self.u_dim)
        self.noise_scale = np.broadcast_to(
            np.asarray(self.noise_scale, dtype=np.float64), (self.d_x,)
        ).copy()
        if self.policy is None:
            self.policy = uniform_policy(self.K)
        if self.policy.K != self.K:
            raise ScmError(f"policy has {self.policy.K} arms, spec has K={self.K}")
        if self.transition not in ("linear", "tanh"):
            raise ScmError(f"transition must be linear|tanh, got {self.transition!r}")
        if self.x0 is None:
            self.x0 = np.zeros(self.d_x)
        self.x0 = np.asarray(self.x0, dtype=np.float64).reshape(self.d_x)
        if self.policy_names is None:
            self.policy_names = ["none"] + [f"policy_{k}" for k in range(1, self.K)]
        if len(self.policy_names) != self.K or self.policy_names[0] != "none":
            raise ScmError("policy_names must have K entries starting with 'none'")

    def to_json(self) -> str:
        return json.dumps(
            {
                "d_x": self.d_x,
                "K": self.K,
                "A": self.A.tolist(),
                "B": self.B.tolist(),
                "c": self.c.tolist(),
                "u_dim": self.u_dim,
                "u_load": self.u_load.tolist(),
                "noise_scale": self.noise_scale.tolist(),
                "y_noise_scale": self.y_noise_scale,
                "lag": self.lag,
                "policy": self.policy.to_dict(),
                "transition": self.transition,
                "x0": self.x0.tolist(),
                "policy_names": self.policy_names,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "ScmSpec":
        d = json.loads(text)
        return cls(
            d_x=d["d_x"],
            K=d["K"],
            A=np.asarray(d["A"]),
            B=np.asarray(d["B"]),
            c=np.asarray(d["c"]),
            u_dim=d["u_dim"],
            u_load=np.asarray(d["u_load"]),
            noise_scale=np.asarray(d["noise_scale"]),
            y_noise_scale=d["y_noise_scale"],
            lag=d["lag"],
            policy=LoggingPolicy.from_dict(d["policy"]),
            transition=d["transition"],
            x0=np.asarray(d["x0"]),
            policy_names=d["policy_names"],
        )


def default_spec(d_x=4, K=4, seed=0, lag=1, noise_scale=0.1, y_noise_scale=0.1,
                 transition="linear", policy=None, u_dim=0, effect_scale=1.0) -> ScmSpec:
    """A stable random world: contracting A, distinct treatment effects."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d_x, d_x))
    A *= 0.7 / max(1e-12, np.max(np.abs(np.linalg.eigvals(A))))
    B = rng.normal(size=(K, d_x)) * effect_scale
    B[0] = 0.0
    c = rng.normal(size=d_x)
    c /= max(1e-12, np.linalg.norm(c))
    u_load = rng.normal(size=(d_x, u_dim)) * 0.3 if u_dim else None
    return ScmSpec(
        d_x=d_x, K=K, A=A, B=B, c=c, u_dim=u_dim, u_load=u_load,
        noise_scale=noise_scale, y_noise_scale=y_noise_scale, lag=lag,
        policy=policy, transition=transition,
    )


def _squash(spec: ScmSpec, v: np.ndarray) -> np.ndarray:
    return np.tanh(v) if spec.transition == "tanh" else v


def _transition_mean(spec: ScmSpec, x: np.ndarray, arm: int, u: np.ndarray) -> np.ndarray:
    return _squash(spec, spec.A @ x + spec.B[arm] + spec.u_load @ u)


def _effective_arm(Z: np.ndarray, t: int, lag: int) -> int:
    """Arm feeding the t -> t+1 transition (index 0 before the series starts)."""
    s = t - lag
    return int(Z[s]) if s >= 0 else 0


def simulate(spec: ScmSpec, n_episodes: int, T: int, seed: int = 0,
             id_prefix: str = "well", keep_trace: bool = True) -> list[Episode]:
    """Draw episodes; deterministic given the seed; noise traces retained."""
    if n_episodes < 1:
        raise ScmError("n_episodes must be >= 1")
    if T < 2:
        raise ScmError("T must be >= 2")
    rng = np.random.default_rng(seed)
    episodes = []
    for i in range(n_episodes):
        U = rng.standard_normal(spec.u_dim) if spec.u_dim else np.zeros(0)
        eps = rng.standard_normal((T, spec.d_x)) * spec.noise_scale
        eta = rng.standard_normal(T) * spec.y_noise_scale
        X = np.empty((T, spec.d_x))
        Y = np.empty(T)
        Z = np.empty(T, dtype=np.int64)
        X[0] = spec.x0 + eps[0]
        Y[0] = spec.c @ X[0] + eta[0]
        Z[0] = rng.choice(spec.K, p=spec.policy.probs(0.0))
        for t in range(T - 1):
            X[t + 1] = _transition_mean(spec, X[t], _effective_arm(Z, t, spec.lag), U) + eps[t + 1]
            Y[t + 1] = spec.c @ X[t + 1] + eta[t + 1]
            Z[t + 1] = rng.choice(spec.K, p=spec.policy.probs(Y[t]))
        episodes.append(
            Episode(
                id=f"{id_prefix}_{i}",
                X=X, Z=Z, Y=Y, U=U,
                noise_trace=NoiseTrace(eps=eps, eta=eta) if keep_trace else None,
            )
        )
    return episodes


def _check_t(episode: Episode, t: int) -> None:
    if not 0 <= t < episode.length - 1:
        raise ScmError(f"t={t} out of range for episode of length {episode.length}")


def intervene(spec: ScmSpec, episode: Episode, t: int, z: int) -> np.ndarray:
    """E[X[t+1] | history, do(z)] where z forces the treatment feeding the
    t -> t+1 transition (Z[t] when lag=0, Z[t-lag] in general)."""
    _check_t(episode, t)
    if not 0 <= z < spec.K:
        raise ScmError(f"treatment {z} outside 0..{spec.K - 1}")
    return _transition_mean(spec, episode.X[t], z, episode.U)


def counterfactual(spec: ScmSpec, episode: Episode, t: int, z: int, horizon: int = 1):
    """Replay the episode with Z[t] := z under the stored exogenous noise.

    Returns (X_cf, Y_cf) for steps t+1 .. t+horizon ("what would have
    happened"), exact because the factual noise is reused.
    """
    _check_t(episode, t)
    if episode.noise_trace is None:
        raise ScmError(
            "counterfactual queries need stored noise; simulate with keep_trace=True"
        )
    if not 0 <= z < spec.K:
        raise ScmError(f"treatment {z} outside 0..{spec.K - 1}")
    horizon = min(horizon, episode.length - 1 - t)
    eps, eta = episode.noise_trace.eps, episode.noise_trace.eta
    Z_cf = episode.Z.copy()
    Z_cf[t] = z
    X_cf = np.empty((horizon, spec.d_x))
    Y_cf = np.empty(horizon)
    for s in range(t, t + horizon):
        past = X_cf[s - t - 1] if s > t else episode.X[s]
        # identical arithmetic to simulate() so the factual arm replays bit-exactly
        nxt = _transition_mean(spec, past, _effective_arm(Z_cf, s, spec.lag), episode.U) + eps[s + 1]
        X_cf[s - t] = nxt
        Y_cf[s - t] = spec.c @ nxt + eta[s + 1]
    return X_cf, Y_cf


def counterfactual_path(spec: ScmSpec, episode: Episode, start: int, treatments) -> tuple:
    """Replay from ``start`` with Z[start:start+len] replaced wholesale."""
    treatments = np.asarray(treatments, dtype=np.int64)
    _check_t(episode, start)
    if episode.noise_trace is None:
        raise ScmError(
            "counterfactual queries need stored noise; simulate with keep_trace=True"
        )
    horizon = min(treatments.shape[0], episode.length - 1 - start)
    eps, eta = episode.noise_trace.eps, episode.noise_trace.eta
    Z_cf = episode.Z.copy()
    Z_cf[start : start + horizon] = treatments[:horizon]
    X_cf = np.empty((horizon, spec.d_x))
    Y_cf = np.empty(horizon)
    for s in range(start, start + horizon):
        past = X_cf[s - start - 1] if s > start else episode.X[s]
        nxt = _transition_mean(spec, past, _effective_arm(Z_cf, s, spec.lag), episode.U) + eps[s + 1]
        X_cf[s - start] = nxt
        Y_cf[s - start] = spec.c @ nxt + eta[s + 1]
    return X_cf, Y_cf


def oracle_cate(spec: ScmSpec, episode: Episode, t: int, z: int, z_ref: int = 0) -> np.ndarray:
    """do-vs-do contrast E[X[t+1]|H,do(z)] - E[X[t+1]|H,do(z_ref)].

    For the linear transition the shared history terms cancel analytically,
    leaving exactly B[z] - B[z_ref] for every history.
    """
    _check_t(episode, t)
    if not (0 <= z < spec.K and 0 <= z_ref < spec.K):
        raise ScmError(f"treatment outside 0..{spec.K - 1}")
    if spec.transition == "linear":
        return spec.B[z] - spec.B[z_ref]
    return intervene(spec, episode, t, z) - intervene(spec, episode, t, z_ref)


def oracle_cate_observational(spec: ScmSpec, episode: Episode, t: int, z: int) -> np.ndarray:
    """The literal do-minus-conditional contrast.

    The stored history blocks every backdoor path (treatments depend only on
    past outcomes), so conditioning on it makes the conditional one-step mean
    equal the interventional one and the contrast is identically zero. Kept
    as a queryable quantity; rankings use the do-vs-do contrast above.
    """
    return intervene(spec, episode, t, z) - _transition_mean(spec, episode.X[t], z, episode.U)


def stationary_stats(spec: ScmSpec, u: np.ndarray | None = None):
    """Closed-form stationary mean/long-run variance under arm 0, linear spec.

    Returns (mean_x, mean_y, longrun_var_of_mean_y_per_step), the oracle for
    checking empirical averages of long untreated runs.
    """
    if spec.transition != "linear":
        raise ScmError("closed-form stationary moments need the linear transition")
    u = np.zeros(spec.u_dim) if u is None else np.asarray(u, dtype=np.float64)
    eye = np.eye(spec.d_x)
    drive = spec.B[0] + spec.u_load @ u
    mean_x = np.linalg.solve(eye - spec.A, drive)
    mean_y = float(spec.c @ mean_x)
    # stationary covariance: S = A S A' + diag(noise^2), solved by iteration
    Q = np.diag(spec.noise_scale**2)
    S = Q.copy()
    for _ in range(10000):
        S_next = spec.A @ S @ spec.A.T + Q
        if np.max(np.abs(S_next - S)) < 1e-14:
            S = S_next
            break
        S = S_next
    # long-run variance of the sample mean of Y: sum over all lags of acov
    G = np.linalg.solve(eye - spec.A, spec.A)  # sum_{h>=1} A^h
    longrun = spec.c @ (S + G @ S + S @ G.T) @ spec.c + spec.y_noise_scale**2
    return mean_x, mean_y, float(longrun)


@dataclass
class DomainShift:
    """What may differ between source and target: the logging policy and/or
    treatment-effect availability. The shared causal structure (A, c, u_load)
    is not shiftable."""

    policy: LoggingPolicy | None = None
    param_overrides: dict = field(default_factory=dict)

    def apply(self, spec: ScmSpec) -> ScmSpec:
        forbidden = {"A", "c", "u_load"} & set(self.param_overrides)
        if forbidden:
            raise ScmError(
                f"causal structure must be shared: cannot shift {sorted(forbidden)}"
            )
        unknown = set(self.param_overrides) - {"B"}
        if unknown:
            raise ScmError(f"unsupported shift parameters: {sorted(unknown)}")
        out = spec
        if "B" in self.param_overrides:
            B = np.asarray(self.param_overrides["B"], dtype=np.float64)
            out = replace(out, B=B)
        if self.policy is not None:
            out = replace(out, policy=self.policy)
        return out


def make_domain_pair(spec: ScmSpec, shift: DomainShift, sizes: tuple, T: int, seed: int = 0):
    """Simulate a (source, target) dataset pair sharing the causal structure."""
    n_source, n_target = sizes
    target_spec = shift.apply(spec)
    source_eps = simulate(spec, n_source, T, seed=seed, id_prefix="src")
    target_eps = simulate(target_spec, n_target, T, seed=seed + 1, id_prefix="tgt")
    vocab = list(spec.policy_names)
    return (
        DomainDataset(tag="source", episodes=source_eps, policy_vocabulary=vocab),
        DomainDataset(tag="target", episodes=target_eps, policy_vocabulary=vocab),
    )


def to_dataset(episodes: list[Episode], spec: ScmSpec, tag: str = "source") -> DomainDataset:
    return DomainDataset(tag=tag, episodes=episodes, policy_vocabulary=list(spec.policy_names))
