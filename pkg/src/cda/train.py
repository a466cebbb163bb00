"""Adversarial training loop: alternating generator/discriminator updates,
seeded batching, JSON-lines step logs and exactly-resumable checkpoints.

Batch schedules are pure functions of (seed, epoch), so a run is bit-identical
for a given config and resuming from a checkpoint continues the original
trajectory exactly.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from . import model as cda_model
from . import objectives as obj
from .data import DomainDataset, stack_batch


class TrainError(RuntimeError):
    pass


class Divergence(TrainError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr_g: float = 0.02
    lr_b: float = 0.05
    momentum: float = 0.0
    lam: float = 1.0
    betas: tuple = (1.0, 1.0, 1.0, 1.0)
    gamma: float = 0.0
    horizon: int = 6
    seed: int = 0
    domain_loss_mode: str = "cmmd"  # cmmd | discriminator | both
    domain_sign: str = "descend"  # descend (+lam, training-loop literal) | ascend (-lam, minimax literal)
    cate_loss_weight: float = 1.0
    clip_norm: float = 5.0
    lambda_warmup_frac: float = 0.1
    patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.lr_g <= 0 or self.lr_b <= 0:
            raise TrainError("learning rates must be > 0")
        if self.lam < 0:
            raise TrainError("lambda must be >= 0")
        if self.domain_loss_mode not in ("cmmd", "discriminator", "both"):
            raise TrainError(f"unknown domain_loss_mode {self.domain_loss_mode!r}")
        if self.domain_sign not in ("descend", "ascend"):
            raise TrainError(f"unknown domain_sign {self.domain_sign!r}")
        self.betas = tuple(float(b) for b in self.betas)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (1.0, 1.0, 1.0, 1.0)))
        return cls(**d)


@dataclass
class TrainState:
    model: cda_model.CdaModel
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    step_in_epoch: int = 0
    loss_history: list = field(default_factory=list)
    momentum_g: dict = field(default_factory=dict)
    momentum_b: dict = field(default_factory=dict)
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)


def _epoch_rng(seed: int, epoch: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, salt])


def _steps_per_epoch(n_target: int, batch: int) -> int:
    return max(1, math.ceil(n_target / max(1, min(batch, n_target))))


def _batches_for(d: DomainDataset, idx) -> tuple:
    eps = [d.episodes[i] for i in idx]
    return stack_batch(eps)


def _domain_pass(model, domain, batch, horizon):
    X, Z, Y, U = batch
    nodes = cda_model.training_forward(model, domain, X, Z, Y, U)
    T = Y.shape[1]
    hor = min(horizon, T - 2)
    hist = (T - 1) - hor
    l_seq = obj.seq_loss_node(nodes["y_pred"], Y[:, 1:, None], hist, hor)
    return nodes, l_seq


def build_step_objective(model, batch_s, batch_t, config: TrainConfig, lam_eff: float):
    """Compose the per-step loss graph and its reportable breakdown.

    Returns (loss_node, breakdown, extras). The generator descends
    ``loss_node``; the discriminator improves through the gradient-reversed
    branch when the mode includes it.
    """
    ns, l_seq_s = _domain_pass(model, "source", batch_s, config.horizon)
    nt, l_seq_t = _domain_pass(model, "target", batch_t, config.horizon)
    loss = ad.add(l_seq_s, l_seq_t)
    if config.cate_loss_weight:
        loss = ad.add(loss, ad.scale(ad.add(ns["aux"], nt["aux"]), config.cate_loss_weight))

    z_s, z_t = batch_s[1], batch_t[1]
    use_cmmd_grad = config.domain_loss_mode in ("cmmd", "both") and lam_eff > 0
    if use_cmmd_grad:
        dl = obj.domain_loss(
            ad.constant(batch_s[0]), ad.constant(batch_t[0]), ns["R"], nt["R"],
            z_s, z_t, config.betas, config.gamma,
        )
        sign = 1.0 if config.domain_sign == "descend" else -1.0
        loss = ad.add(loss, ad.scale(dl["l_dom"], sign * lam_eff))
    else:
        # recorded but gradient-free: evaluated on detached copies
        dl = obj.domain_loss(
            ad.constant(batch_s[0]), ad.constant(batch_t[0]),
            ad.constant(ns["R"].value), ad.constant(nt["R"].value),
            z_s, z_t, config.betas, config.gamma,
        )

    l_disc = None
    if config.domain_loss_mode in ("discriminator", "both"):
        if lam_eff > 0:
            # adversarial branch on the shared graph: one backward realizes
            # the minimax via the gradient reversal
            p_s = cda_model.discriminate(model, ns["pooled"], reverse_strength=lam_eff)
            p_t = cda_model.discriminate(model, nt["pooled"], reverse_strength=lam_eff)
            bce = ad.scale(
                ad.add(obj.binary_cross_entropy(p_s, 0.0), obj.binary_cross_entropy(p_t, 1.0)), 0.5
            )
            loss = ad.add(loss, bce)
        else:
            # weight zero: the max player still trains, but on its own graph,
            # so the generator trajectory is bit-identical to a detached run
            p_s = cda_model.discriminate(model, ad.constant(ns["pooled"].value))
            p_t = cda_model.discriminate(model, ad.constant(nt["pooled"].value))
            bce = ad.scale(
                ad.add(obj.binary_cross_entropy(p_s, 0.0), obj.binary_cross_entropy(p_t, 1.0)), 0.5
            )
        l_disc = bce

    breakdown = obj.LossBreakdown(
        l_seq_source=l_seq_s.value.item(),
        l_seq_target=l_seq_t.value.item(),
        l1=dl["l1"].value.item(),
        l2=dl["l2"].value.item(),
        l3=dl["l3"].value.item(),
        l4=dl["l4"].value.item(),
        cross_term=dl["cross"].value.item() if dl["cross"] is not None else 0.0,
        l_dom=dl["l_dom"].value.item(),
        l_disc=l_disc.value.item() if l_disc is not None else None,
    )
    breakdown.total = obj.total_objective(breakdown, lam_eff, "generator")
    extras = {
        "aux_source": ns["aux"].value.item(),
        "aux_target": nt["aux"].value.item(),
        "lambda": lam_eff,
        "descent_loss": loss.value.item(),
    }
    detached_disc = l_disc if (l_disc is not None and lam_eff <= 0) else None
    return loss, breakdown, extras, detached_disc


def run_step(state: TrainState, batch_s, batch_t, lam_eff: float,
             update_g: bool = True, update_b: bool = True):
    """One alternating update on a fixed pair of batches."""
    model, config = state.model, state.config
    try:
        with warnings.catch_warnings():
            # mini-batches routinely miss arms on one side; coverage warnings
            # are meaningful for whole-domain calls, not per-step samples
            warnings.simplefilter("ignore", obj.ConditionCoverageWarning)
            loss, breakdown, extras, detached_disc = build_step_objective(
                model, batch_s, batch_t, config, lam_eff
            )
    except ad.NumericError as exc:
        raise Divergence(f"non-finite values at step {state.step}: {exc}") from None
    if not np.isfinite(loss.value):
        raise Divergence(f"non-finite training loss at step {state.step}")
    params = model.all_parameters()
    ad.zero_grad(params)
    ad.backward(loss)
    if detached_disc is not None:
        ad.backward(detached_disc)
    gen = model.generator_parameters()
    disc = model.discriminator_parameters()
    ad.clip_global_norm(gen, config.clip_norm)
    ad.clip_global_norm(disc, config.clip_norm)
    if update_g:
        ad.sgd_step(gen, config.lr_g, momentum=config.momentum, state=state.momentum_g)
    if update_b and any(p.grad is not None for p in disc):
        ad.sgd_step(disc, config.lr_b, momentum=config.momentum, state=state.momentum_b)
    return breakdown, extras


def lambda_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.lam == 0:
        return 0.0
    warm = max(1, int(round(config.lambda_warmup_frac * total_steps)))
    return config.lam * min(1.0, step / warm) if config.lambda_warmup_frac > 0 else config.lam


def train(d_s: DomainDataset, d_t: DomainDataset, config: TrainConfig,
          model_config: cda_model.ModelConfig | None = None, state: TrainState | None = None,
          log_path=None, checkpoint_path=None, checkpoint_every: int | None = None) -> TrainState:
    """Run the adversarial loop until ``config.epochs`` epochs complete.

    The inner loop length is set by exhausting the target dataset; source
    batches cycle through their own per-epoch shuffle. Pass a restored
    ``state`` to continue a run exactly where it stopped.
    """
    if d_s.n_episodes == 0 or d_t.n_episodes == 0:
        raise TrainError("both domains need at least one episode")
    if state is None:
        if model_config is None:
            model_config = cda_model.ModelConfig(
                d_x=d_s.d_x, K=d_s.n_policies, u_dim=d_s.u_dim, seed=config.seed
            )
        state = TrainState(model=cda_model.CdaModel(model_config), config=config)
    model_config = state.model.config

    bt = min(config.batch_size, d_t.n_episodes)
    bs = min(config.batch_size, d_s.n_episodes)
    steps_per_epoch = _steps_per_epoch(d_t.n_episodes, config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    log_fh = open(log_path, "a") if log_path else None
    best_seq_t = math.inf
    stale_epochs = 0
    try:
        while state.epoch < config.epochs:
            tperm = _epoch_rng(config.seed, state.epoch, 1).permutation(d_t.n_episodes)
            sperm = _epoch_rng(config.seed, state.epoch, 2).permutation(d_s.n_episodes)
            epoch_seq_t = []
            i = state.step_in_epoch
            while i < steps_per_epoch:
                if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                    save_state(state, _step_ckpt_path(checkpoint_path, state.step))
                t_idx = [tperm[(i * bt + j) % d_t.n_episodes] for j in range(bt)]
                s_idx = [sperm[(i * bs + j) % d_s.n_episodes] for j in range(bs)]
                lam_eff = lambda_at(config, state.step, total_steps)
                try:
                    breakdown, extras = run_step(
                        state, _batches_for(d_s, s_idx), _batches_for(d_t, t_idx), lam_eff
                    )
                except Divergence:
                    raise Divergence(
                        f"training diverged at step {state.step}; last checkpoint retained"
                        + (f" at {checkpoint_path}" if checkpoint_path else "")
                    ) from None
                record = {"step": state.step, "epoch": state.epoch, **breakdown.to_dict(), **extras}
                state.loss_history.append(record)
                if log_fh:
                    log_fh.write(json.dumps({**record, "wall_time": time.time()}) + "\n")
                epoch_seq_t.append(breakdown.l_seq_target)
                state.step += 1
                i += 1
                state.step_in_epoch = i
            state.epoch += 1
            state.step_in_epoch = 0
            if config.patience is not None:
                mean_t = float(np.mean(epoch_seq_t))
                if mean_t < best_seq_t - 1e-12:
                    best_seq_t = mean_t
                    stale_epochs = 0
                else:
                    stale_epochs += 1
                    if stale_epochs > config.patience:
                        break
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_state(state, checkpoint_path)
    return state


def _step_ckpt_path(base, step: int) -> str:
    base = str(base)
    if base.endswith(".ckpt"):
        return f"{base[:-5]}.step{step}.ckpt"
    return f"{base}.step{step}"


def save_state(state: TrainState, path) -> None:
    arrays = state.model.param_arrays()
    for name, buf in state.momentum_g.items():
        arrays[f"momentum_g.{name}"] = buf
    for name, buf in state.momentum_b.items():
        arrays[f"momentum_b.{name}"] = buf
    extra = {
        "model_config": state.model.config.to_dict(),
        "train_config": state.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "step_in_epoch": state.step_in_epoch,
        "rng_state": state.rng.bit_generator.state,
        "loss_history": state.loss_history,
    }
    checkpoint.save(path, arrays, extra)


def load_state(path) -> TrainState:
    arrays, extra = checkpoint.load(path)
    model = cda_model.CdaModel(cda_model.ModelConfig.from_dict(extra["model_config"]))
    params = {n: a for n, a in arrays.items() if not n.startswith("momentum_")}
    model.load_arrays(params)
    config = TrainConfig.from_dict(extra["train_config"])
    state = TrainState(
        model=model,
        config=config,
        step=extra["step"],
        epoch=extra["epoch"],
        step_in_epoch=extra["step_in_epoch"],
        loss_history=list(extra.get("loss_history", [])),
    )
    for n, a in arrays.items():
        if n.startswith("momentum_g."):
            state.momentum_g[n[len("momentum_g."):]] = a
        elif n.startswith("momentum_b."):
            state.momentum_b[n[len("momentum_b."):]] = a
    state.rng.bit_generator.state = extra["rng_state"]
    return state


def resume(path, d_s: DomainDataset, d_t: DomainDataset, **train_kwargs) -> TrainState:
    """Continue a checkpointed run to its configured number of epochs."""
    state = load_state(path)
    return train(d_s, d_t, state.config, state=state, **train_kwargs)


def replay_step(path, d_s: DomainDataset, d_t: DomainDataset):
    """Recompute the objective for the step a checkpoint was taken before.

    Checkpoints are written before the step executes, so the recomputed
    breakdown must match that step's log record.
    """
    state = load_state(path)
    config = state.config
    bt = min(config.batch_size, d_t.n_episodes)
    bs = min(config.batch_size, d_s.n_episodes)
    steps_per_epoch = _steps_per_epoch(d_t.n_episodes, config.batch_size)
    tperm = _epoch_rng(config.seed, state.epoch, 1).permutation(d_t.n_episodes)
    sperm = _epoch_rng(config.seed, state.epoch, 2).permutation(d_s.n_episodes)
    i = state.step_in_epoch
    t_idx = [tperm[(i * bt + j) % d_t.n_episodes] for j in range(bt)]
    s_idx = [sperm[(i * bs + j) % d_s.n_episodes] for j in range(bs)]
    lam_eff = lambda_at(config, state.step, config.epochs * steps_per_epoch)
    _, breakdown, extras, _ = build_step_objective(
        state.model, _batches_for(d_s, s_idx), _batches_for(d_t, t_idx), config, lam_eff
    )
    return breakdown, extras


def fit_effect_head(dataset: DomainDataset, model_config: cda_model.ModelConfig,
                    epochs: int = 30, batch_size: int = 64, lr: float = 0.05,
                    seed: int = 0, clip_norm: float = 5.0) -> cda_model.CdaModel:
    """Train encoder + effect head alone on one-step covariate regression.

    The minimal estimator behind the position-wise effect contrast; used by
    the recovery checks and as a warm start.
    """
    model = cda_model.CdaModel(model_config)
    gen = model.gen_params("source")
    params = [gen["enc.wx"], gen["enc.wh"], gen["enc.b"], gen["cate.w"], gen["cate.b"]]
    n = dataset.n_episodes
    bs = min(batch_size, n)
    steps = max(1, math.ceil(n / bs))
    for epoch in range(epochs):
        perm = _epoch_rng(seed, epoch, 3).permutation(n)
        for i in range(steps):
            idx = [perm[(i * bs + j) % n] for j in range(bs)]
            X, Z, Y, U = _batches_for(dataset, idx)
            nodes = cda_model.effect_forward(model, "source", X, Z, Y, U)
            loss = nodes["aux"]
            if not np.isfinite(loss.value):
                raise Divergence(f"effect-head fit diverged at epoch {epoch}")
            ad.zero_grad(params)
            ad.backward(loss)
            ad.clip_global_norm(params, clip_norm)
            ad.sgd_step(params, lr)
    return model
