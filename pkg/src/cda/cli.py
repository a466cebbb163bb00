"""Command-line surface: simulate, ingest, train, eval, rank-policies, check.

Every subcommand is a pure function of (config, seed, input files); the fully
materialized config is echoed into the run directory so any run can be
reproduced from its own output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import check as checkmod
from . import config as cfgmod
from . import evaluate, scm
from . import model as cda_model
from . import train as cda_train
from .data import DomainDataset, emit_csv, emit_manifest, ingest_csv, normalize


def _load_config(args) -> dict:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.materialize()
    for override in getattr(args, "set", None) or []:
        if "=" not in override:
            raise cfgmod.ConfigError(f"--set expects key=value, got {override!r}")
        key, _, val = override.partition("=")
        cfgmod.set_by_path(cfg, key, val)
    # --seed beats CDA_SEED beats the config file; resolved into the config so
    # the echoed document fully determines the run
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("CDA_SEED"):
        seed = int(os.environ["CDA_SEED"])
    if seed is not None:
        cfg["scm"]["seed"] = seed
        cfg["train"]["seed"] = seed
        cfg["eval"]["seeds"] = [seed]
    return cfg


def _maybe_print_config(args, cfg) -> bool:
    if getattr(args, "print_config", False):
        print(cfgmod.dump(cfg))
        return True
    return False


def _require_output(args) -> None:
    if not getattr(args, "output", None):
        raise cfgmod.ConfigError("an output path is required (-o/--output)")


def _spec_from_config(cfg: dict) -> scm.ScmSpec:
    s = cfg["scm"]
    if s.get("spec_json"):
        with open(s["spec_json"]) as fh:
            return scm.ScmSpec.from_json(fh.read())
    policy = None
    if s["base_probs"] is not None:
        policy = scm.LoggingPolicy(np.asarray(s["base_probs"]),
                                   s["outcome_sensitivity"] and np.asarray(s["outcome_sensitivity"]))
    return scm.default_spec(
        d_x=s["d_x"], K=s["K"], seed=s["seed"], lag=s["lag"], noise_scale=s["noise_scale"],
        y_noise_scale=s["y_noise_scale"], transition=s["transition"], policy=policy,
        u_dim=s["u_dim"], effect_scale=s["effect_scale"],
    )


def _model_config(cfg: dict, dataset: DomainDataset, seed: int) -> cda_model.ModelConfig:
    m = cfg["model"]
    return cda_model.ModelConfig(
        d_x=dataset.d_x, K=dataset.n_policies, u_dim=dataset.u_dim,
        d_h=m["d_h"], d_k=m["d_k"], d_out=m["d_out"], d_disc=m["d_disc"],
        window=m["window"], shared_modules=m["shared_modules"], seed=seed,
    )


def _echo_config(cfg: dict, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config.json"), "w") as fh:
        fh.write(cfgmod.dump(cfg) + "\n")


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    _require_output(args)
    spec = _spec_from_config(cfg)
    episodes = scm.simulate(spec, args.episodes, args.length, seed=cfg["scm"]["seed"])
    dataset = scm.to_dataset(episodes, spec)
    emit_csv(dataset, args.output)
    if args.emit_spec:
        with open(args.emit_spec, "w") as fh:
            fh.write(spec.to_json())
    print(f"simulated {dataset.n_episodes} episodes x {args.length} steps -> {args.output}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    vocab = cfg["data"]["vocabulary"]
    dataset = ingest_csv(args.path, vocabulary=vocab)
    print(f"{dataset.n_episodes} episodes, {dataset.n_records} records, "
          f"d_x={dataset.d_x}, u_dim={dataset.u_dim}")
    if args.manifest:
        emit_manifest(dataset, args.manifest)
        print(f"manifest -> {args.manifest}")
    return 0


def _train_config(cfg: dict, seed: int) -> cda_train.TrainConfig:
    d = dict(cfg["train"])
    d["seed"] = seed
    return cda_train.TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    _require_output(args)
    seed = cfg["train"]["seed"]
    vocab = cfg["data"]["vocabulary"]
    d_s = ingest_csv(args.source, vocabulary=vocab, tag="source")
    d_t = ingest_csv(args.target, vocabulary=vocab, tag="target")
    if cfg["data"]["normalize"]:
        d_s, stats = normalize(d_s)
        d_t, _ = normalize(d_t, stats)
    outdir = args.output
    _echo_config(cfg, outdir)
    state = cda_train.train(
        d_s, d_t, _train_config(cfg, seed),
        model_config=_model_config(cfg, d_s, seed),
        log_path=os.path.join(outdir, "train_log.jsonl"),
        checkpoint_path=os.path.join(outdir, "model.ckpt"),
        checkpoint_every=args.checkpoint_every,
    )
    print(f"trained {state.step} steps over {state.epoch} epochs -> {outdir}")
    last = state.loss_history[-1]
    print(f"final l_seq: source {last['l_seq_source']:.4f}, target {last['l_seq_target']:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    _require_output(args)
    vocab = cfg["data"]["vocabulary"]
    dataset = ingest_csv(args.data, vocabulary=vocab)
    ev = cfg["eval"]
    seeds = tuple(ev["seeds"])
    base_train = _train_config(cfg, seeds[0])
    mc = None  # derived per seed inside the harness
    jobs = max(args.jobs, ev["jobs"])
    if args.mode == "inside-well":
        cells = evaluate.run_inside_well(
            dataset, mc, base_train, taus=tuple(ev["taus"]), seeds=seeds, jobs=jobs
        )
    else:
        cells = []
        for with_policy in ([True, False] if ev["target_policy"] else [ev["with_policy"]]):
            cells += evaluate.run_cross_well(
                dataset, mc, base_train, fraction=ev["fraction"], with_policy=with_policy,
                seeds=seeds, tau=ev["tau"], target_policy=ev["target_policy"], jobs=jobs,
            )
    _echo_config(cfg, args.output)
    paths = evaluate.emit_report(cells, args.output)
    print(f"{len(cells)} experiment cells -> {paths['results']}")
    for key, summary in evaluate.summarize(cells).items():
        print(f"  {key}: rmse {summary['rmse_mean']:.4f} +/- {summary['rmse_std']:.4f}")
    return 0


def cmd_rank_policies(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    vocab = cfg["data"]["vocabulary"]
    dataset = ingest_csv(args.data, vocabulary=vocab)
    model, extra = cda_model.CdaModel.restore(args.checkpoint)
    episode = next((ep for ep in dataset.episodes if ep.id == args.well), None)
    if episode is None:
        print(f"error: well '{args.well}' not found", file=sys.stderr)
        return 1
    stats = None
    if cfg["data"]["normalize"]:
        _, stats = normalize(dataset)
    candidates = [int(c) for c in args.candidates.split(",")]
    ranking = evaluate.rank_policies(
        model, episode, (args.start, args.end), candidates,
        reference=args.reference, domain=args.domain, stats=stats,
    )
    names = dataset.policy_vocabulary
    print(f"ranking for well {args.well}, window [{args.start}, {args.end}):")
    for arm in ranking.order:
        print(f"  {names[arm] if arm < len(names) else arm}: "
              f"cumulative increment {ranking.increment(arm):+.4f}")
    if args.output:
        series = evaluate.ranking_series(ranking, args.start)
        os.makedirs(args.output, exist_ok=True)
        with open(os.path.join(args.output, "ranking.json"), "w") as fh:
            json.dump(
                {
                    "well": args.well,
                    "reference": ranking.reference,
                    "order": ranking.order,
                    "cumulative": {str(a): ranking.increment(a) for a in ranking.candidates},
                    "series": {k: [[int(t), float(v)] for t, v in s] for k, s in series.items()},
                },
                fh, indent=2,
            )
    return 0


def cmd_check(args) -> int:
    seed = cfgmod.default_seed(getattr(args, "seed", None))
    results = checkmod.run_checks(seed=seed, fast=args.fast)
    failed = []
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"FAILED properties: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} properties pass")
    return 0


def _add_common(p, with_seed=True):
    p.add_argument("--config", help="JSON config file (defaults otherwise)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config field (repeatable)")
    if with_seed:
        p.add_argument("--seed", type=int, default=None,
                       help="seed (falls back to CDA_SEED, then 0)")
    p.add_argument("--print-config", action="store_true",
                   help="print the materialized config and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cda",
                                 description="Treatment-aware forecasting with causal domain adaptation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw synthetic episodes from the built-in world")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("-o", "--output")
    p.add_argument("--emit-spec", help="also write the world spec as JSON")
    _add_common(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("ingest", help="validate and summarize a dataset CSV")
    p.add_argument("path")
    p.add_argument("--manifest", help="write a JSON manifest here")
    _add_common(p)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="adversarial training on a source/target pair")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("-o", "--output")
    p.add_argument("--checkpoint-every", type=int, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run an experiment protocol")
    p.add_argument("mode", choices=["inside-well", "cross-well"])
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--output")
    p.add_argument("--jobs", type=int, default=1, help="parallel experiment cells")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rank-policies", help="counterfactual policy ranking for one well")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--well", required=True)
    p.add_argument("--start", type=int, required=True)
    p.add_argument("--end", type=int, required=True)
    p.add_argument("--candidates", required=True, help="comma-separated arm indices")
    p.add_argument("--reference", type=int, default=0)
    p.add_argument("--domain", default="target", choices=["source", "target"])
    p.add_argument("-o", "--output", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_rank_policies)

    p = sub.add_parser("check", help="run the verification property battery")
    p.add_argument("--fast", action="store_true", help="reduced trial counts")
    _add_common(p, with_seed=True)
    p.set_defaults(fn=cmd_check)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (cfgmod.ConfigError, scm.ScmError, cda_train.TrainError,
            evaluate.EvalError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
