import json
import logging
from argparse import Namespace

import pytest

from rrlab.__main__ import build_parser, main
from rrlab.checkpoint import load_checkpoint
from rrlab.cli import (
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFY,
    cmd_attack,
    cmd_eval,
    cmd_gen_data,
    cmd_sweep_tau,
    cmd_train,
    cmd_verify,
    exit_code_for,
    run_command,
)
from rrlab.errors import (
    AttackError,
    ConfigError,
    EvaluationError,
    ParseError,
    RRLabError,
    TrainingError,
    VerificationError,
)
from rrlab.model import init_params

log = logging.getLogger(__name__)

TRAIN_CONF = """\
# tiny two-blob run
model.widths=8
data.kind=blobs
data.n_classes=2
data.dim=2
data.n_per_class=40
data.separation=5.0
train.epochs=2
train.milestones=1
train.batch_size=16
attack.epsilon=0.2
attack.steps=2
eval.tau_exponents=-1,0,1
"""


def _read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


def _manifest(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    config = root / "run.conf"
    config.write_text(TRAIN_CONF)
    out = root / "out"
    assert cmd_train(config, out, argv=["train", str(config), "-o", str(out)]) == EXIT_OK
    return config, out


@pytest.mark.parametrize("error, code", [
    (ConfigError("x"), EXIT_USAGE),
    (ParseError("x", 3), EXIT_USAGE),
    (FileNotFoundError("x"), EXIT_USAGE),
    (TrainingError("x", 1, 0), EXIT_NUMERIC),
    (EvaluationError("x"), EXIT_NUMERIC),
    (AttackError("x", 2), EXIT_NUMERIC),
    (VerificationError("x"), EXIT_VERIFY),
    (RRLabError("x"), 1),
])
def test_exit_codes(error, code):
    assert exit_code_for(error) == code


def test_train_writes_artifacts(trained):
    _, out = trained
    for name in ("best.ckpt", "final.ckpt", "train_log.csv", "test.csv", "manifest.json"):
        assert (out / name).is_file(), name
    header, rows = _read_csv(out / "train_log.csv")
    assert header == ["epoch", "cls_loss", "rr_loss", "clean_acc", "pgd_acc", "seconds"]
    assert [r[0] for r in rows] == ["1", "2"]
    manifest = _manifest(out / "manifest.json")
    assert manifest["exit_code"] == 0
    assert manifest["command"] == "train"
    assert "train.epochs=2" in manifest["config"]
    assert manifest["artifacts"]["best_checkpoint"].endswith("best.ckpt")
    assert load_checkpoint(out / "final.ckpt").epoch == 2


def test_train_is_deterministic(trained, tmp_path):
    config, out = trained
    again = tmp_path / "again"
    assert cmd_train(config, again) == EXIT_OK
    assert (again / "final.ckpt").read_bytes() == (out / "final.ckpt").read_bytes()
    assert (again / "best.ckpt").read_bytes() == (out / "best.ckpt").read_bytes()


def test_zero_epoch_train_keeps_initial_parameters(trained, tmp_path):
    config, _ = trained
    assert cmd_train(config, tmp_path, overrides=["train.epochs=0", "train.milestones="]) == EXIT_OK
    ckpt = load_checkpoint(tmp_path / "best.ckpt")
    init = init_params(ckpt.arch, seed=0)
    rebuilt = ckpt.build_model()
    assert all(
        (a == b).all() for a, b in zip(rebuilt.parameters(), init.parameters())
    )


def test_train_missing_config(tmp_path, capsys):
    code = cmd_train(tmp_path / "nope.conf", tmp_path / "out")
    assert code == EXIT_USAGE
    assert "config file not found" in capsys.readouterr().err
    manifest = _manifest(tmp_path / "out" / "manifest.json")
    assert manifest["exit_code"] == EXIT_USAGE
    assert "not found" in manifest["error"]


def test_train_bad_override(trained, tmp_path):
    config, _ = trained
    assert cmd_train(config, tmp_path, overrides=["train.framework=mart"]) == EXIT_USAGE


def test_eval_writes_reports(trained, tmp_path):
    _, out = trained
    code = cmd_eval(out / "best.ckpt", out / "test.csv", tmp_path, tau_sweep=True, emit_gnuplot=True)
    assert code == EXIT_OK
    for rejector in ("conf", "tcon", "rcon", "aphi"):
        header, rows = _read_csv(tmp_path / f"report_{rejector}.csv")
        assert header == ["metric", "value"]
        metrics = dict(rows)
        assert metrics["rejector"] == rejector
        assert 0 <= float(metrics["coverage"]) <= 1
        header, rows = _read_csv(tmp_path / f"pass_curve_{rejector}.csv")
        assert header == ["xi", "correct_pass", "wrong_pass", "correct_sep", "wrong_sep"]
        assert len(rows) == 101
        assert (tmp_path / f"pass_curve_{rejector}.gp").is_file()
    for name in ("reliability.csv", "certified_curve.csv", "xi_scatter.csv", "tau_summary.csv"):
        assert (tmp_path / name).is_file(), name
    _, tau_rows = _read_csv(tmp_path / "tau_summary.csv")
    assert [r[0] for r in tau_rows] == [str(k) for k in range(-4, 5)]
    assert len({r[3] for r in tau_rows}) == 1
    _, certified = _read_csv(tmp_path / "certified_curve.csv")
    assert all(r[2] == "0" for r in certified)

    conf = dict(_read_csv(tmp_path / "report_conf.csv")[1])
    tcon = dict(_read_csv(tmp_path / "report_tcon.csv")[1])
    assert conf["all_accuracy"] == tcon["all_accuracy"]

    manifest = _manifest(tmp_path / "manifest.json")
    for k in range(-4, 5):
        for rejector in ("conf", "tcon", "rcon", "aphi"):
            metrics = dict(_read_csv(tmp_path / f"report_{rejector}_tau{k}.csv")[1])
            assert metrics["rejector"] == rejector
            assert metrics["all_accuracy"] == conf["all_accuracy"]
            header, rows = _read_csv(tmp_path / f"pass_curve_{rejector}_tau{k}.csv")
            assert header == ["xi", "correct_pass", "wrong_pass", "correct_sep", "wrong_sep"]
            assert len(rows) == 101
            assert (tmp_path / f"pass_curve_{rejector}_tau{k}.gp").is_file()
        header, rows = _read_csv(tmp_path / f"xi_scatter_tau{k}.csv")
        assert header == ["confidence", "xi_min", "correct"]
        assert len(rows) == len(_read_csv(tmp_path / "xi_scatter.csv")[1])
        assert f"xi_scatter_tau{k}" in manifest["artifacts"]
    sharp = [float(r[0]) for r in _read_csv(tmp_path / "xi_scatter_tau-4.csv")[1]]
    flat = [float(r[0]) for r in _read_csv(tmp_path / "xi_scatter_tau4.csv")[1]]
    assert all(s >= f for s, f in zip(sharp, flat))


def test_eval_reuses_thresholds(trained, tmp_path):
    _, out = trained
    first, second = tmp_path / "first", tmp_path / "second"
    assert cmd_eval(out / "best.ckpt", out / "test.csv", first, rejectors=["rcon"]) == EXIT_OK
    attack = tmp_path / "attack.conf"
    attack.write_text("attack.epsilon=0.3\nattack.steps=3\n")
    code = cmd_eval(out / "best.ckpt", out / "test.csv", second, attack_config=attack,
                    rejectors=["rcon"], threshold_from=first)
    assert code == EXIT_OK
    a = dict(_read_csv(first / "report_rcon.csv")[1])
    b = dict(_read_csv(second / "report_rcon.csv")[1])
    assert a["tpr_threshold"] == b["tpr_threshold"]
    assert not (second / "report_conf.csv").exists()


def test_eval_dimension_mismatch(trained, tmp_path, capsys):
    _, out = trained
    data = tmp_path / "wide.csv"
    data.write_text("f0,f1,f2,label\n0.1,0.2,0.3,0\n0.4,0.5,0.6,1\n")
    code = cmd_eval(out / "best.ckpt", data, tmp_path / "eval")
    assert code == EXIT_USAGE
    assert "checkpoint expects 2" in capsys.readouterr().err
    assert _manifest(tmp_path / "eval" / "manifest.json")["exit_code"] == EXIT_USAGE


def test_eval_corrupt_sidecar(trained, tmp_path, capsys):
    _, out = trained
    data = tmp_path / "test.csv"
    data.write_text((out / "test.csv").read_text())
    (tmp_path / "test.csv.meta.json").write_text("{not json")
    code = cmd_eval(out / "best.ckpt", data, tmp_path / "eval")
    assert code == EXIT_USAGE
    assert "metadata sidecar" in capsys.readouterr().err
    assert _manifest(tmp_path / "eval" / "manifest.json")["exit_code"] == EXIT_USAGE


def test_eval_missing_checkpoint(trained, tmp_path):
    _, out = trained
    assert cmd_eval(tmp_path / "missing.ckpt", out / "test.csv", tmp_path / "eval") == EXIT_USAGE


def test_sweep_tau(trained, tmp_path):
    config, out = trained
    assert cmd_sweep_tau(out / "best.ckpt", out / "test.csv", tmp_path, config_path=config) == EXIT_OK
    header, rows = _read_csv(tmp_path / "tau_summary.csv")
    assert header[0] == "log2_tau"
    assert len(rows) == 3


def test_attack_normal(trained, tmp_path):
    _, out = trained
    code = cmd_attack(out / "best.ckpt", out / "test.csv", tmp_path, overrides=["attack.steps=3"])
    assert code == EXIT_OK
    header, rows = _read_csv(tmp_path / "attack_results.csv")
    assert header == ["idx", "success", "eps", "obj_value", "rcon", "conf"]
    assert len(rows) == 20
    summary = dict(_read_csv(tmp_path / "attack_summary.csv")[1])
    assert summary["mode"] == "normal"
    assert 0 <= float(summary["success_rate"]) <= 1


def test_zero_radius_attack_only_counts_mistakes(trained, tmp_path):
    _, out = trained
    code = cmd_attack(out / "best.ckpt", out / "test.csv", tmp_path, threshold=-1.0,
                      overrides=["attack.epsilon=0"])
    assert code == EXIT_OK
    summary = dict(_read_csv(tmp_path / "attack_summary.csv")[1])
    assert float(summary["success_rate"]) == pytest.approx(1 - float(summary["robust_accuracy"]))


def test_attack_adaptive(trained, tmp_path):
    _, out = trained
    overrides = [
        "attack.adaptive_steps=2", "attack.adaptive_restarts=1",
        "attack.kinds=ce,ce+rcon,con+rr", "attack.eta_grid=1.0",
    ]
    code = cmd_attack(out / "best.ckpt", out / "test.csv", tmp_path, mode="adaptive", overrides=overrides)
    assert code == EXIT_OK
    summary = dict(_read_csv(tmp_path / "attack_summary.csv")[1])
    assert summary["mode"] == "adaptive"
    assert float(summary["threshold"]) > 0


def test_attack_min_distortion(trained, tmp_path):
    _, out = trained
    code = cmd_attack(out / "best.ckpt", out / "test.csv", tmp_path, mode="min-distortion",
                      overrides=["attack.search_steps=3", "attack.steps=3", "attack.eps_max=4.0"])
    assert code == EXIT_OK
    header, rows = _read_csv(tmp_path / "min_distortion.csv")
    assert header == ["idx", "found", "eps", "lo", "hi"]
    for _, found, eps, lo, hi in rows:
        if found == "1":
            assert float(lo) <= float(eps) == float(hi) <= 4.0
    summary = dict(_read_csv(tmp_path / "attack_summary.csv")[1])
    assert "median_eps" in summary


def test_attack_sweep(trained, tmp_path):
    _, out = trained
    code = cmd_attack(out / "best.ckpt", out / "test.csv", tmp_path, mode="sweep", overrides=["attack.steps=3"])
    assert code == EXIT_OK
    header, rows = _read_csv(tmp_path / "epsilon_sweep.csv")
    assert header == ["epsilon", "pgd_accuracy"]
    accs = [float(r[1]) for r in rows]
    assert accs == sorted(accs, reverse=True)


def test_verify_passes(tmp_path, capsys):
    assert cmd_verify(2_000, 0, tmp_path) == EXIT_OK
    text = (tmp_path / "verify_report.txt").read_text()
    assert "lemma1: PASS" in text
    assert "theorem1: PASS" in text
    assert "nsub: PASS" in text
    assert "ordering_flip: PASS" in text
    assert text == capsys.readouterr().out
    header, rows = _read_csv(tmp_path / "verify_branches.csv")
    assert header == ["check", "branch", "count"]
    assert ["theorem1", "wrong-ii", "2000"] in rows
    assert _manifest(tmp_path / "manifest.json")["seed"] == 0


def test_verify_is_deterministic(tmp_path):
    cmd_verify(500, 3, tmp_path / "a")
    cmd_verify(500, 3, tmp_path / "b")
    assert (tmp_path / "a" / "verify_report.txt").read_text() == (tmp_path / "b" / "verify_report.txt").read_text()


def test_verify_injected_fault(tmp_path, capsys):
    assert cmd_verify(100, 0, tmp_path, inject_fault=True) == EXIT_VERIFY
    captured = capsys.readouterr()
    assert "counterexample" in captured.out
    assert "violations in lemma1" in captured.err
    assert _manifest(tmp_path / "manifest.json")["exit_code"] == EXIT_VERIFY


def test_verify_single_trial(tmp_path):
    assert cmd_verify(1, 0, tmp_path) == EXIT_OK
    _, rows = _read_csv(tmp_path / "verify_branches.csv")
    counts = {(check, branch): int(n) for check, branch, n in rows}
    assert counts[("theorem1", "correct-i")] == 1
    assert counts[("lemma1", "correct")] + counts[("lemma1", "wrong")] == 1
    assert counts[("lemma1", "boundary")] == 1


def test_gen_data(tmp_path):
    config = tmp_path / "moons.conf"
    config.write_text("data.kind=moons\ndata.n=50\ndata.noise=0.1\n")
    target = tmp_path / "data" / "moons.csv"
    assert cmd_gen_data(config, target) == EXIT_OK
    header, rows = _read_csv(target)
    assert header == ["f0", "f1", "label"]
    assert len(rows) == 50
    manifest = _manifest(tmp_path / "data" / "moons.manifest.json")
    assert manifest["artifacts"]["dataset"] == str(target)


def test_main_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["--log-level", "warning", "verify", "--trials", "0", "-o", str(tmp_path)])
    assert exc.value.code == EXIT_USAGE
    manifest = _manifest(tmp_path / "manifest.json")
    assert manifest["argv"][-3:] == ["0", "-o", str(tmp_path)]


def test_parser_collects_overrides():
    args = build_parser().parse_args(
        ["attack", "--checkpoint", "m.ckpt", "--dataset", "d.csv", "-o", "out",
         "--mode", "min-distortion", "--set", "attack.steps=5", "--set", "attack.eps_max=1"]
    )
    assert args.command == "attack"
    assert args.mode == "min-distortion"
    assert args.overrides == ["attack.steps=5", "attack.eps_max=1"]


def test_run_command_dispatches_verify(tmp_path):
    args = Namespace(command="verify", trials=10, seed=1, out=tmp_path, inject_fault=False)
    assert run_command(args) == EXIT_OK
    assert (tmp_path / "verify_report.txt").is_file()
