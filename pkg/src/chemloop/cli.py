"""Command-line scenario runner.

Exit codes: 0 accepted, 1 configuration error, 2 environment check failed,
3 escalated or unfinished run (partial datastore still written).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

from .config import BUNDLED, ConfigError, ScenarioConfig
from .protocol import canonical_json
from .report import (
    IncompleteRun,
    analyze_run,
    generate_report,
    render_markdown,
    replicate_study,
    report_json,
)
from .simulation import EXIT_CONFIG, EXIT_OK, RunResult, run_scenario


@dataclass
class RunArtifacts:
    result: RunResult
    files: dict[str, Path] = field(default_factory=dict)
    report: dict | None = None
    report_error: str | None = None

    @property
    def exit_code(self) -> int:
        return self.result.exit_code


def _write(out: Path, name: str, text: str, files: dict[str, Path]) -> None:
    path = out / name
    path.write_text(text)
    files[name] = path


def execute(cfg: ScenarioConfig, seed: int | None, out: Path | None, fmt: str = "both",
            faults: Sequence[str] = ()) -> RunArtifacts:
    """Run one scenario and write its artifacts to ``out`` (when given)."""
    result = run_scenario(cfg, seed, faults)
    art = RunArtifacts(result)
    if result.status == "environment":
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            _write(out, "plan.json", canonical_json(result.plan.to_dict(), indent=2) + "\n", art.files)
        return art
    analysis = analyze_run(result.store, result.plan, cfg)
    try:
        art.report = generate_report(result.store, result.plan, result.cursor.history, analysis, cfg,
                                     result.seed, result.status)
    except IncompleteRun as exc:
        if result.accepted:
            raise
        art.report_error = str(exc)
    if out is None:
        return art
    out.mkdir(parents=True, exist_ok=True)
    _write(out, "plan.json", canonical_json(result.plan.to_dict(), indent=2) + "\n", art.files)
    _write(out, "datastore.jsonl", result.store.to_jsonl(), art.files)
    _write(out, "transitions.json", canonical_json(result.transitions(), indent=2) + "\n", art.files)
    if art.report is not None:
        if fmt in ("json", "both"):
            _write(out, "report.json", report_json(art.report), art.files)
        if fmt in ("md", "both"):
            _write(out, "report.md", render_markdown(art.report), art.files)
        for name, text in analysis.charts.items():
            _write(out, name, text, art.files)
    return art


def _headline(art: RunArtifacts) -> str:
    r = art.result
    line = f"{r.scenario} seed={r.seed} status={r.status} t_sim={r.sim_time:.1f}s"
    if r.reason:
        line += f" reason={r.reason}"
    res = (art.report or {}).get("experimental_results", {})
    for p in res.get("equivalence_points", []):
        line += f" V_eq{p['index']}={p['volume_mL']:.3f}mL"
    for p in res.get("pKa", []):
        if p["applicable"]:
            line += f" pKa{p['index']}={p['pKa']:.3f}"
    if res.get("transition_volume_mL") is not None:
        line += f" V_color={res['transition_volume_mL']:.4f}mL"
    if res.get("recorded_mass_g") is not None:
        line += f" mass={res['recorded_mass_g']:.3f}g"
    return line


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 so that 2 stays reserved for a failed environment check."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chemloop", description="Run a simulated closed-loop chemistry experiment.")
    p.add_argument("--scenario", required=True,
                   help=f"scenario YAML path or bundled name ({', '.join(BUNDLED)})")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--replicates", type=int, default=None,
                   help="run N >= 2 seeded replicates and write stddev.csv")
    p.add_argument("--format", choices=("json", "md", "both"), default="both", help="report format")
    p.add_argument("--fault", action="append", default=[], metavar="NAME",
                   help="enable a named fault from the scenario (repeatable)")
    return p


def main(argv: Sequence[str] | None = None, stdout: TextIO | None = None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.replicates is not None and args.replicates < 2:
        parser.error("--replicates needs N >= 2")
    try:
        cfg = ScenarioConfig.load(args.scenario)
        cfg.active_faults(tuple(args.fault))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=stdout)
        return EXIT_CONFIG
    base = cfg.seed if args.seed is None else args.seed
    try:
        if args.replicates is None:
            art = execute(cfg, base, args.out, args.format, args.fault)
            return _report_single(art, args.out, stdout)
        return _replicates(cfg, base, args.replicates, args.out, args.format, args.fault, stdout)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=stdout)
        return EXIT_CONFIG


def _report_single(art: RunArtifacts, out: Path, stdout: TextIO) -> int:
    r = art.result
    if r.status == "environment":
        print(r.feedback, file=stdout)
        return r.exit_code
    print(_headline(art), file=stdout)
    if art.report_error:
        print(f"report not generated: {art.report_error}", file=stdout)
    print(f"artifacts written to {out}", file=stdout)
    return r.exit_code


def _replicates(cfg: ScenarioConfig, base: int, n: int, out: Path, fmt: str, faults: Sequence[str],
                stdout: TextIO) -> int:
    curves, seeds, worst = [], [], EXIT_OK
    plan = None
    for i in range(n):
        seed = base + i
        art = execute(cfg, seed, out / f"replicate_{i + 1:02d}_seed_{seed}", fmt, faults)
        if art.result.status == "environment":
            print(art.result.feedback, file=stdout)
            return art.exit_code
        print(_headline(art), file=stdout)
        worst = max(worst, art.exit_code)
        if art.result.accepted:
            curves.append(analyze_run(art.result.store, art.result.plan, cfg).curve)
            seeds.append(seed)
            plan = art.result.plan
    if len(curves) >= 2 and plan is not None and plan.parsed_instruction.kind == "titrate_to_ph":
        study = replicate_study(curves, seeds, plan, cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stddev.csv").write_text(study.to_csv())
        (out / "stddev_summary.json").write_text(canonical_json(study.to_dict(), indent=2) + "\n")
        s = study.summary
        print(f"stddev: plateau {s.plateau_min:.4f}-{s.plateau_max:.4f} (rms {s.plateau_rms:.4f}), "
              f"transition max {s.transition_max:.4f} at {s.transition_at:.2f} mL", file=stdout)
    elif plan is not None and plan.parsed_instruction.kind == "titrate_to_ph":
        print("stddev: fewer than two accepted replicates", file=stdout)
    print(f"artifacts written to {out}", file=stdout)
    return worst


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
