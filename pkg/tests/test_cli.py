import json

import pytest

from cda import cli
from cda import config as cfgmod
from cda.data import ingest_csv


def run(argv):
    return cli.main(argv)


def test_unknown_flag_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["simulate", "--no-such-flag"])
    assert exc.value.code == 2


def test_simulate_then_ingest_counts(tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert run(["simulate", "--episodes", "20", "--length", "40", "--seed", "1",
                "-o", str(out)]) == 0
    assert run(["ingest", str(out)]) == 0
    captured = capsys.readouterr().out
    assert "20 episodes, 800 records" in captured


def test_simulate_deterministic_given_seed(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run(["simulate", "--episodes", "3", "--length", "10", "--seed", "9", "-o", str(a)])
    run(["simulate", "--episodes", "3", "--length", "10", "--seed", "9", "-o", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_seed_env_fallback(tmp_path, monkeypatch):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    monkeypatch.setenv("CDA_SEED", "7")
    run(["simulate", "--episodes", "2", "--length", "8", "-o", str(a)])
    monkeypatch.delenv("CDA_SEED")
    run(["simulate", "--episodes", "2", "--length", "8", "--seed", "7", "-o", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_print_config_echo_reproduces_run(tmp_path, capsys):
    args = ["simulate", "--episodes", "2", "--length", "8", "--seed", "3",
            "--set", "scm.d_x=2", "--print-config"]
    assert run(args) == 0
    echoed = capsys.readouterr().out
    cfg_path = tmp_path / "echo.json"
    cfg_path.write_text(echoed)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run(["simulate", "--episodes", "2", "--length", "8", "--seed", "3",
         "--set", "scm.d_x=2", "-o", str(a)])
    run(["simulate", "--episodes", "2", "--length", "8", "--seed", "3",
         "--config", str(cfg_path), "-o", str(b)])
    assert a.read_bytes() == b.read_bytes()


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train")
    src, tgt = root / "s.csv", root / "t.csv"
    run(["simulate", "--episodes", "12", "--length", "24", "--seed", "1", "-o", str(src)])
    run(["simulate", "--episodes", "4", "--length", "24", "--seed", "2", "-o", str(tgt)])
    outdir = root / "run"
    code = run(["train", "--source", str(src), "--target", str(tgt), "-o", str(outdir),
                "--seed", "5", "--set", "train.epochs=3", "--set", "model.d_h=8",
                "--set", "model.window=4", "--set", "train.horizon=4",
                "--set", "model.d_k=4"])
    assert code == 0
    return root, src, tgt, outdir


def test_train_outputs(train_run):
    _, _, _, outdir = train_run
    assert (outdir / "model.ckpt").exists()
    assert (outdir / "config.json").exists()
    records = [json.loads(l) for l in (outdir / "train_log.jsonl").read_text().splitlines()]
    assert all("l_dom" in r and "step" in r and "wall_time" in r for r in records)


def test_train_rerun_bit_identical_modulo_walltime(train_run, tmp_path):
    root, src, tgt, outdir = train_run
    outdir2 = tmp_path / "run2"
    run(["train", "--source", str(src), "--target", str(tgt), "-o", str(outdir2),
         "--seed", "5", "--set", "train.epochs=3", "--set", "model.d_h=8",
         "--set", "model.window=4", "--set", "train.horizon=4",
         "--set", "model.d_k=4"])
    assert (outdir / "model.ckpt").read_bytes() == (outdir2 / "model.ckpt").read_bytes()

    def stripped(p):
        recs = [json.loads(l) for l in (p / "train_log.jsonl").read_text().splitlines()]
        for r in recs:
            r.pop("wall_time")
        return recs

    assert stripped(outdir) == stripped(outdir2)


def test_rank_policies_cli(train_run, tmp_path, capsys):
    _, _, tgt, outdir = train_run
    rankdir = tmp_path / "rank"
    code = run(["rank-policies", "--data", str(tgt), "--checkpoint", str(outdir / "model.ckpt"),
                "--well", "well_0", "--start", "10", "--end", "16",
                "--candidates", "1,2", "-o", str(rankdir)])
    assert code == 0
    payload = json.loads((rankdir / "ranking.json").read_text())
    assert set(payload["cumulative"]) == {"1", "2"}
    assert len(payload["series"]["cumulative_arm1"]) == 6


def test_rank_policies_unknown_well(train_run):
    _, _, tgt, outdir = train_run
    code = run(["rank-policies", "--data", str(tgt), "--checkpoint", str(outdir / "model.ckpt"),
                "--well", "nope", "--start", "10", "--end", "16", "--candidates", "1"])
    assert code == 1


def test_eval_inside_well_cli(tmp_path):
    data = tmp_path / "d.csv"
    run(["simulate", "--episodes", "6", "--length", "30", "--seed", "3", "-o", str(data)])
    outdir = tmp_path / "ev"
    code = run(["eval", "inside-well", "--data", str(data), "-o", str(outdir),
                "--set", "eval.taus=[4]", "--set", "eval.seeds=[0]",
                "--set", "train.epochs=2", "--set", "model.d_h=6",
                "--set", "model.window=4", "--set", "train.horizon=3",
                "--set", "model.d_k=3"])
    assert code == 0
    rows = (outdir / "results.csv").read_text().splitlines()
    assert rows[0] == "method,tau,seed,split,r2,rmse,mae,n"
    assert len(rows) == 3  # header + cda + ablation


def test_check_subcommand_exit_zero():
    assert run(["check", "--fast", "--seed", "11"]) == 0


def test_config_unknown_key_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1.0}}))
    code = run(["simulate", "--episodes", "1", "--length", "4", "-o",
                str(tmp_path / "x.csv"), "--config", str(bad)])
    assert code == 1


def test_config_materialize_and_overrides():
    cfg = cfgmod.materialize({"train": {"lam": 0.5}})
    assert cfg["train"]["lam"] == 0.5
    assert cfg["model"]["d_h"] == 32
    cfgmod.set_by_path(cfg, "eval.taus", "[6,12]")
    assert cfg["eval"]["taus"] == [6, 12]
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.set_by_path(cfg, "eval.nope", "1")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.materialize({"nope": {}})


def test_emitted_spec_roundtrips(tmp_path):
    out = tmp_path / "d.csv"
    spec_path = tmp_path / "spec.json"
    run(["simulate", "--episodes", "2", "--length", "6", "--seed", "1", "-o", str(out),
         "--emit-spec", str(spec_path)])
    from cda import scm

    spec = scm.ScmSpec.from_json(spec_path.read_text())
    again = tmp_path / "d2.csv"
    run(["simulate", "--episodes", "2", "--length", "6", "--seed", "1", "-o", str(again),
         "--set", f"scm.spec_json={spec_path}"])
    assert out.read_bytes() == again.read_bytes()
    ds = ingest_csv(out)
    assert ds.n_episodes == 2
    assert spec.d_x == ds.d_x
