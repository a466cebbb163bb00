"""Metrics, the inside-well / cross-well experiment protocols, counterfactual
policy ranking and report emission.

Evaluation is leakage-free: normalization statistics come from training rows
only and the evaluated suffix (or held-out wells' suffixes) never enters a
training batch. Metrics are computed in original units.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as cda_model
from . import train as cda_train
from .data import DomainDataset, SplitPlan, normalize, split, truncate


class EvalError(ValueError):
    pass


@dataclass
class MetricSet:
    r2: float | None  # None marks the undefined case (constant truth)
    rmse: float
    mae: float
    n: int

    def to_row(self):
        return {
            "r2": "undefined" if self.r2 is None else self.r2,
            "rmse": self.rmse,
            "mae": self.mae,
            "n": self.n,
        }


def metrics(y_true, y_pred) -> MetricSet:
    """R^2 = 1 - SSE/SST, RMSE and MAE over paired points."""
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise EvalError(f"metrics: bad shapes {y_true.shape} vs {y_pred.shape}")
    err = y_pred - y_true
    sse = float(err @ err)
    sst = float(((y_true - y_true.mean()) ** 2).sum())
    r2 = None if sst == 0.0 else 1.0 - sse / sst
    return MetricSet(
        r2=r2,
        rmse=float(np.sqrt(sse / y_true.size)),
        mae=float(np.abs(err).mean()),
        n=int(y_true.size),
    )


def _forecast_suffix(model, domain, hist_ep, suffix_ep, stats):
    """Autoregressive forecast of a held-out suffix, scored in original units."""
    Xh = stats.transform_x(hist_ep.X)
    Yh = stats.transform_y(hist_ep.Y)
    fc = cda_model.forecast(model, domain, Xh, hist_ep.Z, Yh, suffix_ep.Z, hist_ep.U)
    return stats.inverse_y(fc.y_hat)


def _inside_well_domains(train_ds: DomainDataset, tau: int):
    """Derive the trainer's (source, target) pair from the train prefix:
    the recent window plays the data-poor target domain."""
    min_len = min(ep.length for ep in train_ds.episodes)
    t_len = min(max(4, 2 * tau), min_len // 2)
    cut = min_len - t_len
    d_s = truncate(train_ds, 0, cut)
    d_s = replace(d_s, tag="source")
    d_t = truncate(train_ds, cut, min_len)
    d_t = replace(d_t, tag="target")
    return d_s, d_t


@dataclass
class ExperimentCell:
    method: str
    tau: int
    seed: int
    split: str
    metric: MetricSet
    per_well: list = field(default_factory=list)
    forecast_rows: list = field(default_factory=list)

    def to_row(self):
        row = {"method": self.method, "tau": self.tau, "seed": self.seed, "split": self.split}
        row.update(self.metric.to_row())
        return row


def _methods(base: cda_train.TrainConfig):
    ablation = replace_config(base, lam=0.0)
    return [("cda", base), ("cda_lambda0", ablation)]


def replace_config(cfg: cda_train.TrainConfig, **kw) -> cda_train.TrainConfig:
    d = cfg.to_dict()
    d.update(kw)
    return cda_train.TrainConfig.from_dict(d)


def _train_and_score(d_s, d_t, hist_ds, eval_ds, stats, model_cfg, train_cfg, domain="target"):
    state = cda_train.train(d_s, d_t, train_cfg, model_config=model_cfg)
    per_well = []
    truths, preds = [], []
    rows = []
    vocab = eval_ds.policy_vocabulary
    for hist_ep, ev_ep in zip(hist_ds.episodes, eval_ds.episodes):
        y_hat = _forecast_suffix(state.model, domain, hist_ep, ev_ep, stats)
        per_well.append((ev_ep.id, metrics(ev_ep.Y, y_hat)))
        truths.append(ev_ep.Y)
        preds.append(y_hat)
        for m, yt, yp, z in zip(ev_ep.months, ev_ep.Y, y_hat, ev_ep.Z):
            rows.append({"well_id": ev_ep.id, "month": int(m), "y_true": float(yt),
                         "y_hat": float(yp), "policy": vocab[int(z)]})
    pooled = metrics(np.concatenate(truths), np.concatenate(preds))
    return state, pooled, per_well, rows


def _fan_out(fn, seeds, jobs, kwargs):
    """Run one seed per worker process; cells joined in submission order."""
    from concurrent.futures import ProcessPoolExecutor

    cells = []
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futures = [ex.submit(fn, seeds=(s,), jobs=1, **kwargs) for s in seeds]
        for f in futures:
            cells.extend(f.result())
    return cells


def run_inside_well(dataset: DomainDataset, model_cfg: cda_model.ModelConfig | None,
                    train_cfg: cda_train.TrainConfig, taus=(6, 12, 24, 36), seeds=(0,),
                    oracle=None, jobs: int = 1) -> list[ExperimentCell]:
    """Forecast each well's last tau steps from its own history.

    Trains on the prefixes only (recent window as the target domain), then
    rolls the model across the held-out suffix. ``oracle`` (signature
    (hist_ep, suffix_ep) -> y_hat) replaces the model for plumbing checks.
    Independent (tau, seed, method) cells; ``jobs`` > 1 fans seeds out to
    worker processes.
    """
    if jobs > 1 and len(seeds) > 1 and oracle is None:
        return _fan_out(run_inside_well, seeds, jobs,
                        dict(dataset=dataset, model_cfg=model_cfg, train_cfg=train_cfg,
                             taus=taus, oracle=None))
    cells = []
    for tau in taus:
        plan_probe = SplitPlan(mode="inside_well", tau=tau)
        train_ds, eval_ds = split(dataset, plan_probe)
        stats_ds, stats = normalize(train_ds)
        if oracle is not None:
            truths, preds = [], []
            per_well = []
            for hist_ep, ev_ep in zip(train_ds.episodes, eval_ds.episodes):
                y_hat = oracle(hist_ep, ev_ep)
                per_well.append((ev_ep.id, metrics(ev_ep.Y, y_hat)))
                truths.append(ev_ep.Y)
                preds.append(y_hat)
            pooled = metrics(np.concatenate(truths), np.concatenate(preds))
            cells.append(ExperimentCell("oracle", tau, -1, "inside_well", pooled, per_well))
            continue
        d_s, d_t = _inside_well_domains(stats_ds, tau)
        for seed in seeds:
            for method, base_cfg in _methods(train_cfg):
                cfg = replace_config(base_cfg, seed=seed)
                mc = model_cfg or cda_model.ModelConfig(
                    d_x=dataset.d_x, K=dataset.n_policies, u_dim=dataset.u_dim, seed=seed
                )
                mc = cda_model.ModelConfig.from_dict({**mc.to_dict(), "seed": seed})
                _, pooled, per_well, rows = _train_and_score(
                    d_s, d_t, stats_ds, eval_ds, stats, mc, cfg
                )
                cells.append(ExperimentCell(method, tau, seed, "inside_well", pooled,
                                            per_well, rows))
    return cells


def run_cross_well(dataset: DomainDataset, model_cfg: cda_model.ModelConfig | None,
                   train_cfg: cda_train.TrainConfig, fraction: float = 0.5,
                   with_policy: bool = True, seeds=(0,), tau: int = 6,
                   target_policy: str | None = None, jobs: int = 1) -> list[ExperimentCell]:
    """Predict held-out wells from other wells' series.

    ``target_policy`` selects the wells of interest (wells ever receiving
    it); ``with_policy`` toggles whether source wells carrying that policy
    are kept, reproducing the knowledge-containment contrast. Without a
    target policy the contrast is degenerate and both settings coincide.
    """
    if dataset.n_episodes < 2:
        raise EvalError("cross-well evaluation needs at least 2 wells")
    if jobs > 1 and len(seeds) > 1:
        return _fan_out(run_cross_well, seeds, jobs,
                        dict(dataset=dataset, model_cfg=model_cfg, train_cfg=train_cfg,
                             fraction=fraction, with_policy=with_policy, tau=tau,
                             target_policy=target_policy))
    cells = []
    for seed in seeds:
        if target_policy is None:
            plan = SplitPlan(mode="cross_well", train_well_fraction=fraction, seed=seed)
            source_ds, target_ds = split(dataset, plan)
        else:
            if target_policy not in dataset.policy_vocabulary:
                raise EvalError(f"unknown policy {target_policy!r}")
            arm = dataset.policy_vocabulary.index(target_policy)
            holders = [ep for ep in dataset.episodes if np.any(ep.Z == arm)]
            others = [ep for ep in dataset.episodes if not np.any(ep.Z == arm)]
            if not holders:
                raise EvalError(f"no well ever receives {target_policy!r}")
            rng = np.random.default_rng(seed)
            order = rng.permutation(len(holders))
            n_tgt = max(1, int(round((1.0 - fraction) * len(holders))))
            target_eps = [holders[i] for i in order[:n_tgt]]
            spare_holders = [holders[i] for i in order[n_tgt:]]
            source_eps = others + (spare_holders if with_policy else [])
            if not source_eps:
                raise EvalError("source side is empty under the policy filter")
            source_ds = replace(dataset, episodes=source_eps, norm=None)
            target_ds = replace(dataset, episodes=target_eps, norm=None)
        # hold out each target well's suffix; its prefix joins training as the target domain
        tgt_hist, tgt_eval = split(target_ds, SplitPlan(mode="inside_well", tau=tau))
        src_norm, stats = normalize(replace(source_ds, tag="source"))
        tgt_hist_n, _ = normalize(replace(tgt_hist, tag="target"), stats)
        for method, base_cfg in _methods(train_cfg):
            cfg = replace_config(base_cfg, seed=seed)
            mc = model_cfg or cda_model.ModelConfig(
                d_x=dataset.d_x, K=dataset.n_policies, u_dim=dataset.u_dim, seed=seed
            )
            mc = cda_model.ModelConfig.from_dict({**mc.to_dict(), "seed": seed})
            _, pooled, per_well, rows = _train_and_score(
                src_norm, tgt_hist_n, tgt_hist, tgt_eval, stats, mc, cfg
            )
            label = "cross_well_with_policy" if with_policy else "cross_well_without_policy"
            cells.append(ExperimentCell(method, tau, seed, label, pooled, per_well, rows))
    return cells


@dataclass
class PolicyRanking:
    reference: int
    candidates: list
    trajectories: dict  # arm -> (window,) outcome contrast vs reference
    cumulative: dict  # arm -> (window,) running sum
    order: list  # arms ranked by final cumulative increment, best first

    def increment(self, arm: int) -> float:
        return float(self.cumulative[arm][-1])


def rank_policies(model: cda_model.CdaModel, episode, window: tuple, candidates,
                  reference: int = 0, domain: str = "target", stats=None) -> PolicyRanking:
    """Rank candidate policies by the model's counterfactual outcome gain.

    Rolls the forecaster over ``window`` (start, end) with the treatment
    sequence pinned to each candidate; the per-step contrast against the
    reference policy's rollout is the estimated effect trajectory, and its
    running sum the cumulative outcome increment.
    """
    start, end = window
    if not 1 <= start < end <= episode.length:
        raise EvalError(f"window {window} outside episode of length {episode.length}")
    candidates = list(candidates)
    if not candidates:
        raise EvalError("rank_policies: empty candidate set")
    horizon = end - start
    Xh, Yh = episode.X[:start], episode.Y[:start]
    if stats is not None:
        Xh, Yh = stats.transform_x(Xh), stats.transform_y(Yh)
    Zh = episode.Z[:start]

    def roll(arm):
        fc = cda_model.forecast(model, domain, Xh, Zh, Yh, np.full(horizon, arm), episode.U)
        y = fc.y_hat
        return stats.inverse_y(y) if stats is not None else y

    base = roll(reference)
    trajectories, cumulative = {}, {}
    for arm in candidates:
        traj = roll(arm) - base
        trajectories[arm] = traj
        cumulative[arm] = np.cumsum(traj)
    order = sorted(candidates, key=lambda a: -cumulative[a][-1])
    return PolicyRanking(
        reference=reference, candidates=candidates,
        trajectories=trajectories, cumulative=cumulative, order=order,
    )


def results_table(cells: list) -> list:
    return [c.to_row() for c in cells]


def emit_report(cells: list, outdir, plot_series: dict | None = None) -> dict:
    """Write the results CSV and JSON plot-data series; returns file paths."""
    if not cells:
        raise EvalError("emit_report: no results")
    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, "results.csv")
    fields = ["method", "tau", "seed", "split", "r2", "rmse", "mae", "n"]
    with open(csv_path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        for c in cells:
            wr.writerow({k: _fmt_cell(v) for k, v in c.to_row().items()})
    paths = {"results": csv_path}
    forecast_paths = []
    for c in cells:
        if not c.forecast_rows:
            continue
        fc_path = os.path.join(outdir, f"forecasts_{c.method}_tau{c.tau}_seed{c.seed}.csv")
        emit_forecast_csv(fc_path, c.forecast_rows)
        forecast_paths.append(fc_path)
    if forecast_paths:
        paths["forecasts"] = forecast_paths
        if plot_series is None:
            plot_series = forecast_series(cells)
    if plot_series is not None:
        plot_path = os.path.join(outdir, "plots.json")
        with open(plot_path, "w") as fh:
            json.dump(
                {name: [[int(t), float(v)] for t, v in series] for name, series in plot_series.items()},
                fh, indent=2,
            )
        paths["plots"] = plot_path
    return paths


def _fmt_cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def forecast_series(cells: list, max_wells: int = 1) -> dict:
    """Representative forecast curves (one well per cell) as plot data."""
    out = {}
    for c in cells:
        seen = []
        for row in c.forecast_rows:
            if row["well_id"] not in seen:
                if len(seen) >= max_wells:
                    break
                seen.append(row["well_id"])
            if row["well_id"] in seen:
                key = f"{c.method}_tau{c.tau}_seed{c.seed}_{row['well_id']}"
                out.setdefault(key + "_true", []).append((row["month"], row["y_true"]))
                out.setdefault(key + "_hat", []).append((row["month"], row["y_hat"]))
    return out


def ranking_series(ranking: PolicyRanking, start: int) -> dict:
    """Plot-data series for effect trajectories and cumulative increments."""
    out = {}
    for arm in ranking.candidates:
        out[f"effect_arm{arm}"] = list(zip(range(start, start + len(ranking.trajectories[arm])),
                                           ranking.trajectories[arm]))
        out[f"cumulative_arm{arm}"] = list(zip(range(start, start + len(ranking.cumulative[arm])),
                                               ranking.cumulative[arm]))
    return out


def emit_forecast_csv(path, rows) -> None:
    """Forecast emission: well_id, month, y_true (optional), y_hat, policy."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["well_id", "month", "y_true", "y_hat", "policy"])
        for r in rows:
            wr.writerow([r["well_id"], r["month"],
                         "" if r.get("y_true") is None else repr(float(r["y_true"])),
                         repr(float(r["y_hat"])), r["policy"]])


def summarize(cells: list) -> dict:
    """Seed-mean and -std of each (method, split, tau) cell group."""
    groups: dict = {}
    for c in cells:
        key = (c.method, c.split, c.tau)
        groups.setdefault(key, []).append(c.metric)
    out = {}
    for (method, split_name, tau), ms in groups.items():
        rmses = [m.rmse for m in ms]
        r2s = [m.r2 for m in ms if m.r2 is not None]
        out[f"{method}|{split_name}|tau={tau}"] = {
            "rmse_mean": float(np.mean(rmses)),
            "rmse_std": float(np.std(rmses)),
            "r2_mean": float(np.mean(r2s)) if r2s else None,
            "n_seeds": len(ms),
        }
    return out
