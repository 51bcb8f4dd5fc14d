#!/usr/bin/env python3
"""
src/main.py - Command-line entry point

    python -m src.main <check|solve|simulate|convergence|nash-gap> --config FILE [options]

Exit codes: 0 success, 2 a required condition ((H1), (H2) or BVP
solvability) fails, 1 any error. Numeric results go to files under
--out-dir together with manifest.json; stdout carries a short summary and
logs go to stderr and to <out-dir>/logs/.
"""

import argparse
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .core.conditions import ConditionError, ConditionsReport, build_conditions_report
from .core.consistency import ConsistencyError, solve_consistency, validate_equivalences
from .core.model import InitMode, ModelValidationError
from .core.numkit import NumkitError, TimeGrid
from .core.riccati import OscillatoryRegime, solve_indefinite_K
from .core.simulator import (
    Realization, SimulationError, convergence_experiment, evaluate_cost, nash_gap_experiment,
    random_initial_mode, simulate_population, worst_case_f,
)
from .core.strategy import StrategyError, StrategyFamily, limit_cost_parts
from .ui.report_writer import ReportWriter, RunManifest
from .ui.summary_printer import SummaryPrinter
from .utils.config_parser import ConfigError, LoadedConfig, load_config
from .utils.log_manager import get_logger
from .utils.logger import log_config
from .utils.performance_monitor import performance_monitor

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONDITIONS = 2

SUBCOMMANDS = ("check", "solve", "simulate", "convergence", "nash-gap")
SIMULATION_COMMANDS = ("simulate", "convergence", "nash-gap")

DOMAIN_ERRORS = (ConfigError, ModelValidationError, NumkitError, ConditionError, ConsistencyError,
                 StrategyError, SimulationError, OscillatoryRegime, OSError)


class ConditionsFailed(Exception):
    """Required conditions fail; the report has been written"""

    def __init__(self, report: ConditionsReport):
        self.report = report
        super().__init__(f"required conditions fail: {', '.join(report.failed())}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _name_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="model config JSON")
    common.add_argument("--out-dir", help="output directory (default: settings output.out_dir)")
    common.add_argument("--threads", type=int, help="worker threads for replications")
    common.add_argument("--seed", type=int, help="base seed of the noise streams")
    common.add_argument("--steps", type=int, help="time steps of the grid")
    common.add_argument("--log-level", default="INFO", help="console log level")

    parser = argparse.ArgumentParser(prog="mflqg", description="Robust mean-field LQG game solver")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    sub.add_parser("check", parents=[common], help="evaluate solvability conditions")
    sub.add_parser("solve", parents=[common], help="solve the consistency system and the strategy")

    simulate = sub.add_parser("simulate", parents=[common], help="simulate one N-agent population")
    simulate.add_argument("--N", type=int, help="number of agents")
    simulate.add_argument("--agent", type=int, help="agent whose cost is reported")

    convergence = sub.add_parser("convergence", parents=[common], help="mean-field convergence rate")
    convergence.add_argument("--N-list", type=_int_list, dest="N_list", help="e.g. 8,32,128,512")
    convergence.add_argument("--replications", type=int)

    nash = sub.add_parser("nash-gap", parents=[common], help="robust epsilon-Nash gap")
    nash.add_argument("--N-list", type=_int_list, dest="N_list", help="e.g. 32,128,512")
    nash.add_argument("--replications", type=int)
    nash.add_argument("--agent", type=int, help="deviating agent")
    nash.add_argument("--deviations", type=_name_list, help="best_response,exact_offset,scaled,random_affine")
    return parser


class SolverApp:
    """Runs one subcommand: config -> conditions -> solves -> outputs"""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.argv = list(argv)
        self.logger = get_logger("main")
        self.printer = SummaryPrinter()
        self.config: Optional[LoadedConfig] = None
        self.writer: Optional[ReportWriter] = None

    # ===== Setup =====

    def _apply_overrides(self):
        s = self.config.settings
        a = self.args
        if a.out_dir:
            s.set_setting("output.out_dir", a.out_dir)
        if a.steps is not None:
            key = "simulation.n_steps" if a.command in SIMULATION_COMMANDS else "grid.n_steps"
            s.set_setting(key, a.steps)
        if a.seed is not None:
            s.set_setting("simulation.seed", a.seed)
        if a.threads is not None:
            s.set_setting("simulation.threads", a.threads)
        if getattr(a, "N", None) is not None:
            s.set_setting("simulation.N", a.N)
        if getattr(a, "replications", None) is not None:
            s.set_setting("simulation.replications", a.replications)
        if getattr(a, "agent", None) is not None:
            s.set_setting("simulation.agent", a.agent)
        if getattr(a, "N_list", None):
            key = "nash_gap.N_list" if a.command == "nash-gap" else "simulation.N_list"
            s.set_setting(key, a.N_list)
        if getattr(a, "deviations", None):
            s.set_setting("nash_gap.deviations", a.deviations)

    def _start_logging(self):
        s = self.config.settings
        log_config.set_console_level(self.args.log_level)
        files = s.get_settings_section("logging").get("file_settings", {})
        log_config.start_session(
            Path(s.get_setting("output.out_dir", "out")) / "logs",
            file_level=s.get_setting("logging.file_level", "DEBUG"),
            rotation=files.get("rotation_size", "10 MB"),
            retention=files.get("retention", 5),
            compression=files.get("compression", "zip"),
            max_sessions=s.get_setting("logging.session_cleanup.max_sessions", 3),
        )

    def _grid(self) -> TimeGrid:
        s = self.config.settings
        key = "simulation.n_steps" if self.args.command in SIMULATION_COMMANDS else "grid.n_steps"
        return TimeGrid(self.config.params.T, int(s.get_setting(key)))

    # ===== Pipeline stages =====

    def _conditions(self, grid: TimeGrid) -> ConditionsReport:
        s = self.config.settings
        with performance_monitor.track("conditions"):
            report = build_conditions_report(
                self.config.params, grid,
                basis_size=s.get_setting("h2.basis_size"),
                det_threshold=s.get_setting("thresholds.determinant"),
                eig_threshold=s.get_setting("thresholds.eigenvalue"),
                escape_threshold=s.get_setting("grid.escape_threshold"),
                stability_check=s.get_setting("h2.stability_check"),
            )
        self.writer.write_json("conditions.json", report.to_dict())
        self.printer.conditions(report)
        if not report.contraction.holds and report.contraction.applicable:
            self.logger.warning("Contraction condition fails; it is sufficient only, continuing")
        return report

    def _solve(self, grid: TimeGrid):
        """Consistency solution and strategy family; raises ConditionsFailed first if needed"""
        p, s = self.config.params, self.config.settings
        report = self._conditions(grid)
        if not report.required_hold:
            raise ConditionsFailed(report)
        with performance_monitor.track("consistency"):
            K = solve_indefinite_K(p, grid, s.get_setting("grid.escape_threshold"))
            cs = solve_consistency(
                p, grid, method=s.get_setting("consistency.method"),
                validate_with_fixed_point=s.get_setting("consistency.validate_with_fixed_point"),
                tol=s.get_setting("consistency.fixed_point.tol"),
                max_iter=s.get_setting("consistency.fixed_point.max_iter"), K=K,
            )
        with performance_monitor.track("strategy"):
            family = StrategyFamily(p, cs, grid)
        return report, cs, family

    # ===== Subcommands =====

    def run_check(self) -> int:
        report = self._conditions(self._grid())
        return EXIT_OK if report.required_hold else EXIT_CONDITIONS

    def run_solve(self) -> int:
        p = self.config.params
        grid = self._grid()
        report, cs, family = self._solve(grid)
        with performance_monitor.track("equivalences"):
            eq = validate_equivalences(cs, p, grid)
        fs = family.base
        cost = limit_cost_parts(p, fs.limit, fs, grid)

        self.writer.write_csv("consistency.csv", cs.columns())
        self.writer.write_csv("strategy.csv", {"t": grid.knots, **fs.columns()})
        self.writer.write_json("solve.json", {
            "consistency": cs.summary(),
            "equivalences": eq.to_dict(),
            "reconstruction_error": fs.reconstruction_error,
            "limit_cost": cost,
        })
        summary = {k: v for k, v in cs.summary().items() if k != "increments"}
        self.printer.mapping("Consistency", {**summary, "equivalences_passed": eq.passed})
        self.printer.mapping("Limit cost", cost)
        return EXIT_OK

    def run_simulate(self) -> int:
        p, s, init = self.config.params, self.config.settings, self.config.init
        grid = self._grid()
        _, _, family = self._solve(grid)
        N, agent = int(s.get_setting("simulation.N")), int(s.get_setting("simulation.agent"))
        seed = int(s.get_setting("simulation.seed"))
        realization = s.get_setting("simulation.realization")
        f = family.base.f_hat

        with performance_monitor.track("simulate"):
            run = simulate_population(p, family, init, f, N, seed, grid, realization=realization)
        cost = evaluate_cost(run, p, agent)
        self.writer.write_csv("paths.csv", run.columns())
        doc = {"N": N, "seed": seed, "agent": agent, "realization": realization,
               "cost": cost.to_dict()}
        self.printer.cost(f"Realized cost of agent {agent} (N={N})", cost)
        if Realization(realization) == Realization.REFERENCE:
            with performance_monitor.track("worst case"):
                wc = worst_case_f(p, family, init, N, grid, agent)
            doc["worst_case"] = wc.summary()
            self.writer.write_csv("worst_case_f.csv", {"t": grid.knots, **wc.f_star.columns("f_star")})
            self.printer.worst_case(wc)
        self.writer.write_json("simulate.json", doc)
        return EXIT_OK

    def _experiment(self, name: str, **kwargs):
        p, init = self.config.params, self.config.init
        grid = self._grid()
        _, _, family = self._solve(grid)
        with performance_monitor.track(name):
            if init.mode == InitMode.RANDOM:
                return random_initial_mode(p, family, init, grid, experiment=name, **kwargs)
            if name == "convergence":
                return convergence_experiment(p, family, init, grid, **kwargs)
            return nash_gap_experiment(p, family, init, grid=grid, **kwargs)

    def run_convergence(self) -> int:
        s = self.config.settings
        report = self._experiment(
            "convergence",
            N_list=s.get_setting("simulation.N_list"),
            replications=int(s.get_setting("simulation.replications")),
            seed=int(s.get_setting("simulation.seed")),
            threads=int(s.get_setting("simulation.threads")),
            realization=s.get_setting("simulation.realization"),
        )
        self.writer.write_csv("convergence.csv", report.table())
        self.writer.write_json("convergence.json", report.to_dict())
        self.printer.experiment(report)
        return EXIT_OK

    def run_nash_gap(self) -> int:
        s = self.config.settings
        report = self._experiment(
            "nash_gap",
            N_list=s.get_setting("nash_gap.N_list"),
            deviations=s.get_setting("nash_gap.deviations"),
            replications=int(s.get_setting("simulation.replications")),
            seed=int(s.get_setting("simulation.seed")),
            threads=int(s.get_setting("simulation.threads")),
            scales=s.get_setting("nash_gap.scales"),
            random_affine_count=int(s.get_setting("nash_gap.random_affine_count")),
            random_affine_size=float(s.get_setting("nash_gap.random_affine_size")),
            offset_modes=int(s.get_setting("nash_gap.offset_modes")),
            agent=int(s.get_setting("simulation.agent")),
        )
        self.writer.write_csv("nash_gap.csv", report.table())
        self.writer.write_csv("nash_gap_deviations.csv", report.gap_table())
        self.writer.write_json("nash_gap.json", report.to_dict())
        self.printer.experiment(report)
        return EXIT_OK

    # ===== Driver =====

    def run(self) -> int:
        start = time.perf_counter()
        try:
            self.config = load_config(self.args.config)
            self._apply_overrides()
        except (ConfigError, ModelValidationError) as e:
            self.logger.error(f"Config {self.args.config}: {e}")
            self.printer.error(str(e))
            return EXIT_ERROR

        self._start_logging()
        out_dir = self.config.settings.get_setting("output.out_dir", "out")
        self.writer = ReportWriter(out_dir, self.args.command)
        performance_monitor.reset()
        self.logger.info(f"{self.args.command} with {self.args.config} -> {out_dir}")

        handler = getattr(self, f"run_{self.args.command.replace('-', '_')}")
        try:
            code = handler()
        except ConditionsFailed as e:
            self.logger.warning(str(e))
            code = EXIT_CONDITIONS
        except DOMAIN_ERRORS as e:
            self.logger.error(f"{type(e).__module__}.{type(e).__name__}: {e}")
            self.printer.error(f"{type(e).__name__}: {e}")
            code = EXIT_ERROR
        except Exception as e:
            self.logger.exception(f"Unexpected failure in {self.args.command}: {e}")
            self.printer.error(f"unexpected {type(e).__name__}: {e}")
            code = EXIT_ERROR

        manifest = RunManifest(
            subcommand=self.args.command, config_path=str(self.args.config),
            settings=self.config.settings.get_all_settings(), argv=self.argv,
            wall_clock_seconds=time.perf_counter() - start,
            operations=performance_monitor.get_performance_stats(), exit_code=code,
        )
        manifest_path = self.writer.write_manifest(manifest)
        self.printer.outputs([str(p) for p in self.writer.outputs] + [str(manifest_path)])
        self.logger.performance(self.args.command, manifest.wall_clock_seconds)
        log_config.end_session()
        return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; 2 is reserved for failed conditions
        return EXIT_OK if e.code in (0, None) else EXIT_ERROR
    return SolverApp(args, argv).run()


if __name__ == "__main__":
    sys.exit(main())
