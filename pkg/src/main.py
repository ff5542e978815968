import argparse
import json
import logging
import sys
from pathlib import Path

from engine import EstimationError, LtmleEngine, load_config_file
from harness import (DEFAULT_POLICIES, compute_truths, drop_in_table, emit_report, oracle_arm,
                     resolve_scenario, run_replications)
from interventions import POLICIES
from panel import (PanelError, events_to_frame, ingest_long_events, panel_to_frame, read_event_csv, read_panel_csv,
                   write_event_csv, write_panel_csv)
from sim import ScenarioConfig, simulate_event_records, simulate_trial

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _split(text):
    return [item.strip() for item in text.split(",") if item.strip()]


def _visit_grid(text):
    return [float(v) for v in _split(text)]


def build_parser():
    common = CliParser(add_help=False)
    common.add_argument("--settings", help="alternate config.json")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    common.add_argument("--out", help="output path (stdout when omitted)")
    common.add_argument("--seed", type=int, default=None)

    scenario = CliParser(add_help=False)
    scenario.add_argument("--scenario", default="scenario1")
    scenario.add_argument("--config", help="scenario JSON overriding --scenario")
    scenario.add_argument("--horizon", type=int, default=None)
    scenario.add_argument("--nmc", type=int, default=None)

    estimation = CliParser(add_help=False)
    estimation.add_argument("--g-floor", type=float, default=None)
    estimation.add_argument("--weight-cap", type=float, default=None)
    estimation.add_argument("--folds", type=int, default=None)
    estimation.add_argument("--estimator", choices=["tmle", "gcomp"], default="tmle")

    parser = CliParser(prog="ltmle", description="Longitudinal TMLE for trials with concomitant treatment")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common, scenario], help="simulate a trial panel")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--events", action="store_true", help="write continuous-time event records instead")
    p.add_argument("--visits", type=_visit_grid, default=None)

    p = sub.add_parser("oracle", parents=[common, scenario], help="Monte-Carlo truth for a policy or arm")
    p.add_argument("--policy", required=True)

    p = sub.add_parser("estimate", parents=[common, estimation], help="estimate policies on a panel")
    p.add_argument("--panel", help="panel CSV")
    p.add_argument("--config", help="estimation request JSON")
    p.add_argument("--policy", default=None)
    p.add_argument("--policies", type=_split, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--visits", type=_visit_grid, default=None)

    p = sub.add_parser("replicate", parents=[common, scenario, estimation], help="simulation study table")
    p.add_argument("--policies", type=_split, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--format", choices=["csv", "json"], default="csv")

    p = sub.add_parser("trajectory", parents=[common, scenario], help="per-arm drop-in fractions")
    p.add_argument("--panel", help="panel CSV (simulates --scenario when omitted)")
    p.add_argument("--n", type=int, default=None)

    p = sub.add_parser("ingest", parents=[common], help="event CSV to panel CSV")
    p.add_argument("--events", required=True, help="long event CSV")
    p.add_argument("--visits", type=_visit_grid, required=True)
    return parser


def load_settings(args):
    if args.settings:
        return load_config_file(args.settings)
    return load_config_file(Path(__file__).resolve().parents[1] / "config.json")


def scenario_from_args(args):
    if getattr(args, "config", None):
        return ScenarioConfig.from_dict(load_config_file(args.config))
    return resolve_scenario(args.scenario)


def apply_estimation_flags(settings, args, request=None):
    request = request or {}
    estimation = dict(settings.get("estimation", {}))
    learners = dict(settings.get("learners", {}))
    learners.update(request.get("learners", {}))
    for key in ("g_floor", "weight_cap"):
        if key in request:
            estimation[key] = request[key]
    if "seed" in request:
        learners["seed"] = request["seed"]
    if args.g_floor is not None:
        estimation["g_floor"] = args.g_floor
    if args.weight_cap is not None:
        estimation["weight_cap"] = args.weight_cap
    if args.folds is not None:
        learners["folds"] = args.folds
    if args.seed is not None:
        learners["seed"] = args.seed
    return {**settings, 'estimation': estimation, 'learners': learners}


def write_output(text, out):
    if out is None:
        sys.stdout.write(text)


def cmd_simulate(args, settings):
    sim_cfg = settings.get("simulation", {})
    n = args.n or sim_cfg.get("n", 9340)
    seed = args.seed if args.seed is not None else settings.get("harness", {}).get("seed", 1)
    if args.events:
        records = simulate_event_records(n, seed, visit_times=args.visits)
        if args.out:
            write_event_csv(records, args.out)
        else:
            write_output(events_to_frame(records).to_csv(index=False), None)
        return EXIT_OK
    panel = simulate_trial(scenario_from_args(args), n, seed, sim_cfg.get("block_size", 4096))
    if args.out:
        write_panel_csv(panel, args.out)
    else:
        write_output(panel_to_frame(panel).to_csv(index=False), None)
    return EXIT_OK


def cmd_oracle(args, settings):
    config = scenario_from_args(args)
    sim_cfg = settings.get("simulation", {})
    horizon = args.horizon or config.n_visits
    n_mc = args.nmc or sim_cfg.get("n_mc", 1000000)
    seed = args.seed if args.seed is not None else settings.get("harness", {}).get("seed", 1)
    n_fit = sim_cfg.get("n_fit_stochastic", 100000)
    if args.policy in POLICIES:
        payload = compute_truths(config, [args.policy], horizon, n_mc, seed, n_fit)[args.policy]
        payload = {'policy': args.policy, **payload}
    else:
        payload = oracle_arm(config, args.policy, horizon, n_mc, seed, n_fit)
    write_output(emit_report(payload, "json", args.out), args.out)
    return EXIT_OK


def cmd_estimate(args, settings):
    request = load_config_file(args.config) if args.config else {}
    panel_path = args.panel or request.get("panel_path")
    if not panel_path:
        raise UsageError("estimate needs --panel or a request with panel_path")
    randomized = settings.get("estimation", {}).get("randomized")
    panel = read_panel_csv(panel_path, visit_times=args.visits,
                           randomized=True if randomized is None else randomized)
    if args.policies:
        policies = args.policies
    elif args.policy:
        policies = [args.policy]
    else:
        policies = request.get("policies", settings.get("harness", {}).get("policies", DEFAULT_POLICIES))
    horizon = args.horizon or request.get("horizon") or panel.K
    engine = LtmleEngine(config=apply_estimation_flags(settings, args, request))
    results = engine.estimate(panel, policies, horizon, estimator=args.estimator)
    write_output(emit_report(results, "json", args.out), args.out)
    return EXIT_OK


def cmd_replicate(args, settings):
    config = scenario_from_args(args)
    harness_cfg = settings.get("harness", {})
    sim_cfg = settings.get("simulation", {})
    table = run_replications(
        config,
        args.policies or harness_cfg.get("policies", DEFAULT_POLICIES),
        n=args.n or sim_cfg.get("n", 9340),
        reps=args.reps or harness_cfg.get("reps", 500),
        horizon=args.horizon or harness_cfg.get("horizon", config.n_visits),
        seed=args.seed if args.seed is not None else harness_cfg.get("seed", 1),
        engine_config=apply_estimation_flags(settings, args),
        n_mc=args.nmc or sim_cfg.get("n_mc", 1000000),
        n_fit_stochastic=sim_cfg.get("n_fit_stochastic", 100000),
        workers=args.workers,
        estimator=args.estimator,
    )
    write_output(emit_report(table, args.format, args.out), args.out)
    return EXIT_OK


def cmd_trajectory(args, settings):
    if args.panel:
        panel = read_panel_csv(args.panel)
    else:
        seed = args.seed if args.seed is not None else settings.get("harness", {}).get("seed", 1)
        panel = simulate_trial(scenario_from_args(args), args.n or settings.get("simulation", {}).get("n", 9340), seed)
    write_output(emit_report(drop_in_table(panel), "csv", args.out), args.out)
    return EXIT_OK


def cmd_ingest(args, settings):
    try:
        panel = ingest_long_events(read_event_csv(args.events), args.visits)
    except PanelError:
        raise
    except ValueError as e:
        raise PanelError(f"Cannot ingest {args.events}: {e}") from e
    if args.out:
        write_panel_csv(panel, args.out)
    else:
        write_output(panel_to_frame(panel).to_csv(index=False), None)
    return EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'oracle': cmd_oracle,
    'estimate': cmd_estimate,
    'replicate': cmd_replicate,
    'trajectory': cmd_trajectory,
    'ingest': cmd_ingest,
}


def cli_main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler()
        ]
    )
    try:
        settings = load_settings(args)
        return COMMANDS[args.command](args, settings)
    except UsageError as e:
        sys.stderr.write(f"ltmle {args.command}: {e}\n")
        return EXIT_USAGE
    except (PanelError, EstimationError, OSError, json.JSONDecodeError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_DATA
    except ValueError as e:
        logger.error("%s: %s", args.command, e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(cli_main())
