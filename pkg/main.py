import os
import sys
import json
import logging
import argparse
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from src.grid.fixtures import write_feeder_day, write_fixture_feeder
from src.grid.grid_io import load_network, read_network
from src.grid.network import GridError, interface_of, validate
from src.optimization.constraints import ConstraintSet, FlexRange, Infeasible, OptimisationError, verify_bundle
from src.optimization.flex import allocate_setpoints, flex_methods, get_flex_method
from src.powerflow.solver import PowerFlowError
from src.scenario.results import RESULT_FORMATS, emit_results
from src.scenario.runner import run_scenario
from src.scenario.scenario import ScenarioError, load_scenario

load_dotenv()

logger = logging.getLogger("voltcoord")

DEFAULT_CONFIG_PATH = Path("config/voltcoord_config.json")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VIOLATIONS = 2


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Load the run configuration from JSON (--config, then VOLTCOORD_CONFIG, then the default)."""
    config_path = Path(path or os.getenv("VOLTCOORD_CONFIG") or DEFAULT_CONFIG_PATH)
    try:
        with open(config_path) as f:
            return json.load(f)
    except Exception as e:
        logger.error(f"Failed to load config {config_path}: {e}")
        raise


def setup_logging(config: Dict[str, Any]) -> None:
    level = os.getenv("VOLTCOORD_LOG_LEVEL") or config.get("log_level", "INFO")
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def emit(data: Dict[str, Any]) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def method_options(config: Dict[str, Any], method: str) -> Dict[str, Any]:
    opt = config.get("optimisation", {})
    if method == "oracle":
        return {"grid_resolution": opt.get("oracle_grid_points", 21)}
    return {
        "max_iter": opt.get("heuristic_max_iter", 30),
        "tol": opt.get("heuristic_tol", 1e-5),
        "initial_step_fraction": opt.get("initial_step_fraction", 0.25),
    }


def cmd_validate(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    report = validate(read_network(args.grid))
    print(report)
    return EXIT_OK if report.ok else EXIT_ERROR


def cmd_flex(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    net = load_network(args.grid)
    ifc = interface_of(net, args.interface)
    cs = ConstraintSet.from_network(net)
    opts = method_options(config, args.method)
    if args.workers:
        opts["workers"] = args.workers
    try:
        flex = get_flex_method(args.method)(net, ifc, cs, coupling=config.get("coupling"), **opts)
    except Infeasible as e:
        flex = FlexRange.infeasible(args.method, e.violations)
    result = {
        "interface": args.interface,
        "method": flex.method,
        "feasible": flex.feasible,
        "q_min_mvar": flex.q_min * net.s_base if flex.feasible else None,
        "q_max_mvar": flex.q_max * net.s_base if flex.feasible else None,
        "evaluated": flex.evaluated,
        "skipped": flex.skipped,
    }
    if flex.feasible:
        result["witness_min"] = flex.witness_min.to_dict()
        result["witness_max"] = flex.witness_max.to_dict()
    else:
        result["violations"] = [v.to_dict() for v in flex.violations]
    emit(result)
    return EXIT_OK if flex.feasible else EXIT_VIOLATIONS


def cmd_allocate(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    net = load_network(args.grid)
    ifc = interface_of(net, args.interface)
    cs = ConstraintSet.from_network(net)
    coupling = config.get("coupling") or {}
    try:
        bundle = allocate_setpoints(net, ifc, cs, args.target / net.s_base, coupling=coupling,
                                    **method_options(config, "sensitivity"))
    except Infeasible as e:
        emit({"interface": args.interface, "feasible": False, "violations": [v.to_dict() for v in e.violations]})
        return EXIT_VIOLATIONS
    check = verify_bundle(net, cs, bundle, ifc, **coupling)
    emit({
        "interface": args.interface,
        "feasible": True,
        "target_mvar": args.target,
        "achieved_mvar": bundle.achieved_q_if * net.s_base,
        "deviation_mvar": bundle.deviation * net.s_base,
        "bundle": bundle.to_dict(),
        "violations": [v.to_dict() for v in check.violations],
    })
    return EXIT_OK if check.ok else EXIT_VIOLATIONS


def cmd_run(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    log = run_scenario(scenario, config)
    emit_results(log, args.format, args.out)
    summary = log.summary()
    emit(summary)
    failed = summary["failed_steps"] > 0
    return EXIT_VIOLATIONS if summary["violation_count"] > 0 or failed else EXIT_OK


def cmd_fixture(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    if args.name == "feeder15":
        path = write_fixture_feeder(args.out)
        print(path)
    else:
        for path in write_feeder_day(args.out, partition=args.partition):
            print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voltcoord", description="Multi-level volt/VAR coordination simulator")
    parser.add_argument("--config", help="Path to the JSON run configuration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="Check a grid file")
    p.add_argument("grid")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("flex", help="Reactive power flexibility range at an interface")
    p.add_argument("grid")
    p.add_argument("--interface", required=True)
    p.add_argument("--method", choices=flex_methods(), default="sensitivity")
    p.add_argument("--workers", type=int, help="Processes for the oracle")
    p.set_defaults(func=cmd_flex)

    p = sub.add_parser("allocate", help="Setpoints for an interface Q target")
    p.add_argument("grid")
    p.add_argument("--interface", required=True)
    p.add_argument("--target", type=float, required=True, help="Interface Q target in MVar")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("run", help="Run a scenario")
    p.add_argument("scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=RESULT_FORMATS, default="csv")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fixture", help="Write fixture files")
    p.add_argument("name", choices=["feeder15", "feeder15-day"])
    p.add_argument("--out", required=True)
    p.add_argument("--partition", action="store_true", help="feeder15-day: add a central/edge partition")
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main execution function."""
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        setup_logging(config)
        return args.func(args, config)
    except (GridError, ScenarioError, OptimisationError, PowerFlowError, ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
