#!/usr/bin/env python3
"""
src/ui/summary_printer.py - Human-readable summary on standard output

Numbers go to files; this is the short colored digest a person reads
after a run. Logging stays on stderr.
"""

import sys
from typing import Any, Dict, Iterable, Optional, TextIO

from colorama import Fore, Style, init as colorama_init

from ..core.conditions import ConditionsReport, Verdict
from ..core.simulator import CostBreakdown, ExperimentReport, WorstCase

colorama_init()


class SummaryPrinter:
    """Prints verdicts, solve results and experiment tables"""

    def __init__(self, stream: Optional[TextIO] = None, color: Optional[bool] = None):
        self.stream = stream if stream is not None else sys.stdout
        self.color = self.stream.isatty() if color is None else color

    def _paint(self, text: str, color: str) -> str:
        if not self.color:
            return text
        return f"{color}{text}{Style.RESET_ALL}"

    def line(self, text: str = ""):
        print(text, file=self.stream)

    def header(self, title: str):
        self.line()
        self.line(self._paint(f"📊 {title}", Style.BRIGHT))

    def _status(self, verdict: Verdict) -> str:
        if not verdict.applicable:
            return self._paint("n/a ", Fore.YELLOW)
        if verdict.holds:
            return self._paint("✅ holds", Fore.GREEN)
        return self._paint("❌ fails", Fore.RED)

    def verdict(self, name: str, verdict: Verdict):
        margin = "" if not verdict.applicable else f"  margin {verdict.margin:.6g}"
        note = f"  ({verdict.note})" if verdict.note else ""
        self.line(f"  {name:<14} {self._status(verdict)}{margin}{note}")

    def conditions(self, report: ConditionsReport):
        self.header("Conditions")
        self.verdict("(H1)", report.h1)
        if report.h1_escape_time is not None:
            self.line(f"  {'':<14} Riccati escape at t = {report.h1_escape_time:.6g}")
        self.verdict("(H2)", report.h2)
        self.verdict("C_q bound", report.h2_sufficient_Cq)
        self.verdict("contraction", report.contraction)
        self.verdict("bvp", report.bvp)
        for key in ("c1", "c2", "c3", "c4", "C_q", "contraction_lhs"):
            if key in report.constants:
                self.line(f"  {key:<14} {report.constants[key]:.6g}")
        for warning in report.warnings:
            self.line(self._paint(f"  ⚠️ {warning}", Fore.YELLOW))
        overall = "all required conditions hold" if report.required_hold else \
            f"failed: {', '.join(report.failed())}"
        color = Fore.GREEN if report.required_hold else Fore.RED
        self.line(self._paint(f"  → {overall}", color))

    def mapping(self, title: str, values: Dict[str, Any]):
        self.header(title)
        for key, value in values.items():
            shown = f"{value:.10g}" if isinstance(value, float) else str(value)
            self.line(f"  {key:<24} {shown}")

    def cost(self, title: str, cost: CostBreakdown):
        self.mapping(title, cost.to_dict())

    def worst_case(self, wc: WorstCase):
        state = "concave" if wc.hessian_definite else self._paint("NOT concave", Fore.RED)
        self.mapping(f"Worst case ({wc.label}, N={wc.N}, {state})", {
            "J_wo": wc.J_wo, "gradient_norm": wc.gradient_norm,
            "hessian_max_eigenvalue": wc.hessian_max_eigenvalue,
        })

    def _table(self, rows: Iterable[Dict[str, Any]], keys):
        self.line("  " + "  ".join(f"{k:>14}" for k in keys))
        for row in rows:
            cells = []
            for k in keys:
                v = row.get(k)
                cells.append(f"{v:>14.6g}" if isinstance(v, float) else f"{str(v):>14}")
            self.line("  " + "  ".join(cells))

    def experiment(self, report: ExperimentReport):
        self.header(f"Experiment: {report.name}")
        if report.rows:
            self._table(report.rows, list(report.rows[0].keys()))
        if report.fit is not None:
            fit = report.fit
            self.line(f"  log-log slope {fit.slope:.4f}  "
                      f"{int(fit.confidence * 100)}% CI [{fit.ci_low:.4f}, {fit.ci_high:.4f}]  "
                      f"R² {fit.r_squared:.4f}")
        else:
            self.line(self._paint("  ⚠️ rate not fitted", Fore.YELLOW))

    def outputs(self, paths: Iterable[str]):
        self.header("Outputs")
        for path in paths:
            self.line(f"  📁 {path}")

    def error(self, message: str):
        self.line(self._paint(f"❌ {message}", Fore.RED))
