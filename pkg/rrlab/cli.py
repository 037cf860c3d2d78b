"""Subcommand implementations. Each ``cmd_*`` returns the process exit code.

Exit codes: 0 success, 2 usage or bad input, 3 numeric failure,
4 verification failure. Every command that has an output directory leaves a
manifest.json there, whether it succeeds or not.
"""

import logging
import math
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import torch

from rrlab import __version__
from rrlab.artifacts import RunManifest, atomic_write_text, write_csv, write_gnuplot
from rrlab.attacks import adaptive_sweep, epsilon_sweep, min_distortion, objective_for, pgd
from rrlab.checkpoint import load_checkpoint, save_checkpoint
from rrlab.config import Config, apply_overrides, dump_config, load_config
from rrlab.data import from_config, load_csv, save_csv, split
from rrlab.errors import (
    AttackError,
    ConfigError,
    EvaluationError,
    InvalidArgumentError,
    ParseError,
    RRLabError,
    TrainingError,
    VerificationError,
)
from rrlab.evaluation import (
    CERTIFIED_HEADER,
    PASS_CURVE_HEADER,
    RELIABILITY_HEADER,
    TAU_SUMMARY_HEADER,
    XI_SCATTER_HEADER,
    build_report,
    certified_separation,
    collect_scores,
    reliability_bins,
    tau_summary,
    tpr_accuracy,
    xi_grid,
    xi_scatter,
)
from rrlab.rejection import (
    expected_sampled_accuracy,
    verify_lemma1,
    verify_nsub,
    verify_ordering_flip,
    verify_theorem1,
)
from rrlab.seeding import rng_for
from rrlab.training import predict, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

NSUB_TRIALS = 1000
ATTACK_HEADER = ("idx", "success", "eps", "obj_value", "rcon", "conf")
MIN_DISTORTION_HEADER = ("idx", "found", "eps", "lo", "hi")


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (ConfigError, ParseError, InvalidArgumentError, FileNotFoundError)):
        return EXIT_USAGE
    if isinstance(error, (TrainingError, EvaluationError, AttackError)):
        return EXIT_NUMERIC
    if isinstance(error, VerificationError):
        return EXIT_VERIFY
    return 1


def _guarded(manifest: RunManifest, out_dir: Path, body: Callable[[], None], manifest_name: str = "manifest.json") -> int:
    code, message = EXIT_OK, None
    try:
        body()
    except (RRLabError, FileNotFoundError) as e:
        code, message = exit_code_for(e), str(e)
        log.error("%s failed: %s", manifest.command, message)
        print(f"Error: {message}", file=sys.stderr)
    except BaseException as e:
        code, message = 1, f"{type(e).__name__}: {e}"
        raise
    finally:
        manifest.finish(code, message)
        manifest.write(out_dir, manifest_name)
    return code


def _manifest(command: str, argv: Sequence[str] | None) -> RunManifest:
    return RunManifest(command=command, argv=list(sys.argv[1:] if argv is None else argv), version=__version__)


def _resolve_config(path: Path | None, overrides: Sequence[str]) -> Config:
    if path is not None:
        return load_config(path, overrides)
    return apply_overrides(Config(), overrides)


def _load_inputs(checkpoint: Path, dataset: Path):
    ckpt = load_checkpoint(checkpoint)
    model = ckpt.build_model()
    data = load_csv(dataset, n_classes=ckpt.arch.n_classes)
    if data.dim != ckpt.arch.input_dim:
        raise InvalidArgumentError(
            f"dataset {dataset} has {data.dim} features, checkpoint expects {ckpt.arch.input_dim}"
        )
    return model, data


def cmd_train(config_path: Path, out_dir: Path, overrides: Sequence[str] = (), argv=None) -> int:
    out_dir = Path(out_dir)
    manifest = _manifest("train", argv)

    def body():
        config = load_config(config_path, overrides)
        manifest.config = dump_config(config)
        manifest.seed = config.train.seed
        data = from_config(config.data)
        train_set, test_set = split(data, 1.0 - config.data.val_fraction, config.data.seed)
        log.info("Dataset %s: %d train rows, %d held-out rows", data.name, len(train_set), len(test_set))

        best, train_log = train(config, train_set, test_set)
        artifacts = {
            "best_checkpoint": out_dir / "best.ckpt",
            "final_checkpoint": out_dir / "final.ckpt",
            "train_log": out_dir / "train_log.csv",
            "test_data": out_dir / "test.csv",
        }
        save_checkpoint(best, artifacts["best_checkpoint"])
        save_checkpoint(train_log.final, artifacts["final_checkpoint"])
        write_csv(artifacts["train_log"], train_log.HEADER, train_log.rows())
        save_csv(test_set, artifacts["test_data"])
        for role, path in artifacts.items():
            manifest.add(role, path)
        log.info("Best epoch %d of %d", train_log.best_epoch, config.train.epochs)

    return _guarded(manifest, out_dir, body)


def _write(manifest: RunManifest, role: str, path: Path, header, rows, gnuplot: bool = False):
    write_csv(path, header, rows)
    manifest.add(role, path)
    if gnuplot:
        manifest.add(f"{role}_gnuplot", write_gnuplot(path))


def _read_threshold(report_dir: Path, rejector: str) -> float:
    path = Path(report_dir) / f"report_{rejector}.csv"
    for line in path.read_text().splitlines()[1:]:
        metric, _, value = line.partition(",")
        if metric == "tpr_threshold":
            return float(value)
    raise ParseError(f"{path}: no tpr_threshold row")


def cmd_eval(
    checkpoint: Path,
    dataset: Path,
    out_dir: Path,
    attack_config: Path | None = None,
    rejectors: Sequence[str] | None = None,
    tpr: float | None = None,
    tau_sweep: bool = False,
    threshold_from: Path | None = None,
    emit_gnuplot: bool = False,
    overrides: Sequence[str] = (),
    argv=None,
) -> int:
    """Score the dataset (attacked first when an attack config is given) with
    each rejector and write one report and pass curve per rejector."""
    out_dir = Path(out_dir)
    manifest = _manifest("eval", argv)

    def body():
        config = _resolve_config(attack_config, overrides)
        manifest.config = dump_config(config)
        manifest.seed = config.attack.seed
        ec = config.eval
        model, data = _load_inputs(checkpoint, dataset)
        X = torch.from_numpy(data.X)
        y = torch.from_numpy(data.y)
        if attack_config is not None:
            log.info("Attacking %d inputs (%s, eps=%g, objective %s)",
                     len(data), config.attack.norm, config.attack.epsilon, config.attack.objective)
            attacked = pgd(
                model, X, y, config.attack,
                objective=objective_for(config.attack, config.train.tau_rr),
                rng=rng_for(config.attack.seed, "eval-attack"),
            )
            X = attacked.x_star
        outputs = predict(model, X)
        sampled = expected_sampled_accuracy(outputs.probs.numpy(), data.y)
        grid = xi_grid(ec.xi_points, ec.xi_max)
        level = tpr if tpr is not None else ec.tpr

        for rejector in rejectors or ec.rejectors:
            samples = collect_scores(outputs, y, rejector)
            threshold = _read_threshold(threshold_from, rejector) if threshold_from else None
            report = build_report(samples, rejector, level, grid, ec.ece_bins, threshold, sampled, use_score=True)
            _write(manifest, f"report_{rejector}", out_dir / f"report_{rejector}.csv", ("metric", "value"), report.rows())
            _write(manifest, f"pass_curve_{rejector}", out_dir / f"pass_curve_{rejector}.csv",
                   PASS_CURVE_HEADER, report.pass_curve, emit_gnuplot)
            log.info("%s: all %.4f, TPR accuracy %.4f, AUC %s", rejector, report.all_accuracy,
                     report.tpr_accuracy, "n/a" if report.roc_auc is None else f"{report.roc_auc:.4f}")

        samples = collect_scores(outputs, y, "rcon")
        bins = reliability_bins(samples.confidence, samples.correct, ec.ece_bins)
        _write(manifest, "reliability", out_dir / "reliability.csv", RELIABILITY_HEADER, bins.rows(), emit_gnuplot)
        _write(manifest, "certified_curve", out_dir / "certified_curve.csv", CERTIFIED_HEADER,
               certified_separation(samples, grid), emit_gnuplot)
        _write(manifest, "xi_scatter", out_dir / "xi_scatter.csv", XI_SCATTER_HEADER, xi_scatter(samples))
        if tau_sweep:
            for k in ec.tau_exponents:
                _write_tau_reports(manifest, out_dir, outputs.at_temperature(2.0 ** k), y, k,
                                   rejectors or ec.rejectors, ec, level, grid, threshold_from, emit_gnuplot)
            _write(manifest, "tau_summary", out_dir / "tau_summary.csv", TAU_SUMMARY_HEADER,
                   tau_summary(outputs, y, ec.tau_exponents, level), emit_gnuplot)

    return _guarded(manifest, out_dir, body)


def _write_tau_reports(manifest, out_dir, scaled, y, k, rejectors, ec, level, grid, threshold_from, gnuplot):
    """Reports, pass curves and xi scatter with the softmax at tau = 2**k.

    With ``threshold_from`` each rejector reuses the threshold of the matching
    ``report_<rejector>_tau<k>.csv``.
    """
    sampled = expected_sampled_accuracy(scaled.probs.numpy(), y.numpy())
    for rejector in rejectors:
        stem = f"{rejector}_tau{k}"
        samples = collect_scores(scaled, y, rejector)
        threshold = _read_threshold(threshold_from, stem) if threshold_from else None
        report = build_report(samples, rejector, level, grid, ec.ece_bins, threshold, sampled, use_score=True)
        _write(manifest, f"report_{stem}", out_dir / f"report_{stem}.csv", ("metric", "value"), report.rows())
        _write(manifest, f"pass_curve_{stem}", out_dir / f"pass_curve_{stem}.csv",
               PASS_CURVE_HEADER, report.pass_curve, gnuplot)
    _write(manifest, f"xi_scatter_tau{k}", out_dir / f"xi_scatter_tau{k}.csv", XI_SCATTER_HEADER,
           xi_scatter(collect_scores(scaled, y, "rcon")))


def cmd_sweep_tau(
    checkpoint: Path,
    dataset: Path,
    out_dir: Path,
    config_path: Path | None = None,
    emit_gnuplot: bool = False,
    overrides: Sequence[str] = (),
    argv=None,
) -> int:
    out_dir = Path(out_dir)
    manifest = _manifest("sweep-tau", argv)

    def body():
        config = _resolve_config(config_path, overrides)
        manifest.config = dump_config(config)
        model, data = _load_inputs(checkpoint, dataset)
        outputs = predict(model, data.X)
        rows = tau_summary(outputs, data.y, config.eval.tau_exponents, config.eval.tpr)
        _write(manifest, "tau_summary", out_dir / "tau_summary.csv", TAU_SUMMARY_HEADER, rows, emit_gnuplot)

    return _guarded(manifest, out_dir, body)


def _clean_threshold(model, data, config: Config, mode: str) -> float:
    """Acceptance threshold on R-Con fixed on clean inputs: the TPR threshold
    for adaptive runs, the median score for the distortion search."""
    outputs = predict(model, data.X)
    samples = collect_scores(outputs, data.y, "rcon")
    if mode == "min-distortion":
        return float(np.median(samples.score))
    return tpr_accuracy(samples, config.eval.tpr).threshold


def _attack_rows(result) -> list[tuple]:
    return [
        (i, bool(result.success[i]), float(result.eps[i]), float(result.objective[i]),
         float(result.r_con[i]), float(result.confidence[i]))
        for i in range(len(result))
    ]


def cmd_attack(
    checkpoint: Path,
    dataset: Path,
    out_dir: Path,
    mode: str = "normal",
    attack_config: Path | None = None,
    threshold: float | None = None,
    overrides: Sequence[str] = (),
    argv=None,
) -> int:
    out_dir = Path(out_dir)
    manifest = _manifest("attack", argv)

    def body():
        config = _resolve_config(attack_config, overrides)
        manifest.config = dump_config(config)
        manifest.seed = config.attack.seed
        ac = config.attack
        tau_rr = config.train.tau_rr
        model, data = _load_inputs(checkpoint, dataset)
        X = torch.from_numpy(data.X)
        y = torch.from_numpy(data.y)

        if mode == "sweep":
            rows = epsilon_sweep(model, X, y, ac)
            _write(manifest, "epsilon_sweep", out_dir / "epsilon_sweep.csv", ("epsilon", "pgd_accuracy"), rows)
            return

        bar = threshold if threshold is not None else _clean_threshold(model, data, config, mode)
        summary = [("mode", mode), ("n", len(data)), ("threshold", bar)]
        if mode == "min-distortion":
            found = min_distortion(model, X, y, bar, ac, tau_rr)
            rows = [
                (i, bool(found.found[i]), float(found.eps[i]), float(found.lo[i]), float(found.hi[i]))
                for i in range(len(data))
            ]
            _write(manifest, "min_distortion", out_dir / "min_distortion.csv", MIN_DISTORTION_HEADER, rows)
            eps = found.eps[found.found].numpy()
            summary += [
                ("found_fraction", float(found.found.double().mean())),
                ("median_eps", float(np.median(eps)) if eps.size else math.nan),
                ("mean_eps", float(eps.mean()) if eps.size else math.nan),
            ]
        else:
            if mode == "adaptive":
                result = adaptive_sweep(model, X, y, ac, threshold=bar, tau_rr=tau_rr)
            else:
                result = pgd(model, X, y, ac, objective=objective_for(ac, tau_rr))
            _write(manifest, "attack_results", out_dir / "attack_results.csv", ATTACK_HEADER, _attack_rows(result))
            attacked = collect_scores(predict(model, result.x_star), y, "rcon")
            summary += [
                ("success_rate", float(result.success.double().mean())),
                ("robust_accuracy", float(attacked.correct.mean())),
            ]
            if attacked.correct.any():
                summary.append(("tpr_accuracy_rcon", tpr_accuracy(attacked, config.eval.tpr).accuracy))
        _write(manifest, "summary", out_dir / "attack_summary.csv", ("metric", "value"), summary)
        log.info("%s attack: %s", mode, ", ".join(f"{k}={v}" for k, v in summary[3:]))

    return _guarded(manifest, out_dir, body)


def cmd_verify(trials: int, seed: int, out_dir: Path, inject_fault: bool = False, argv=None) -> int:
    """Sampled checks of the separability results; exit 4 on any violation."""
    out_dir = Path(out_dir)
    manifest = _manifest("verify", argv)
    manifest.seed = seed

    def body():
        if trials < 1:
            raise InvalidArgumentError(f"trials must be >= 1, got {trials}")
        reports = [
            verify_lemma1(trials, seed, fault=inject_fault),
            verify_theorem1(trials, seed, fault=inject_fault),
            verify_nsub(min(trials, NSUB_TRIALS), seed),
            verify_ordering_flip(),
        ]
        text = "\n".join(r.to_text() for r in reports) + "\n"
        report_path = out_dir / "verify_report.txt"
        atomic_write_text(report_path, text)
        manifest.add("report", report_path)
        rows = [(r.name, branch, count) for r in reports for branch, count in r.branches.items()]
        _write(manifest, "branches", out_dir / "verify_branches.csv", ("check", "branch", "count"), rows)
        print(text, end="")

        failed = [r for r in reports if not r.passed]
        if failed:
            raise VerificationError(
                "violations in " + ", ".join(f"{r.name} ({r.violations})" for r in failed)
            )

    return _guarded(manifest, out_dir, body)


def cmd_gen_data(config_path: Path, out_path: Path, overrides: Sequence[str] = (), argv=None) -> int:
    out_path = Path(out_path)
    manifest = _manifest("gen-data", argv)

    def body():
        config = load_config(config_path, overrides)
        manifest.config = dump_config(config)
        manifest.seed = config.data.seed
        save_csv(from_config(config.data), out_path)
        manifest.add("dataset", out_path)

    return _guarded(manifest, out_path.parent, body, manifest_name=f"{out_path.stem}.manifest.json")


def run_command(args) -> int:
    overrides = getattr(args, "overrides", None) or []
    argv = getattr(args, "argv", None)
    dispatch = {
        "train": lambda: cmd_train(args.config, args.out, overrides, argv),
        "eval": lambda: cmd_eval(
            args.checkpoint, args.dataset, args.out, args.attack_config, args.rejector, args.tpr,
            args.tau_sweep, args.threshold_from, args.emit_gnuplot, overrides, argv,
        ),
        "sweep-tau": lambda: cmd_sweep_tau(
            args.checkpoint, args.dataset, args.out, args.config, args.emit_gnuplot, overrides, argv,
        ),
        "attack": lambda: cmd_attack(
            args.checkpoint, args.dataset, args.out, args.mode, args.attack_config, args.threshold, overrides, argv,
        ),
        "verify": lambda: cmd_verify(args.trials, args.seed, args.out, args.inject_fault, argv),
        "gen-data": lambda: cmd_gen_data(args.config, args.out, overrides, argv),
    }
    return dispatch[args.command]()
