"""
Summarize runs to users and map them to exit codes.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Union

from click import style, unstyle

from rpbt.output import err, out


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    details: List[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def label(self) -> str:
        return f"check {self.number} ({self.name})"


@dataclass
class Report:
    """Collects check outcomes and errors. Can be rendered with `str(report)`."""

    quiet: bool = False
    verbose: bool = False
    checks: List[CheckResult] = field(default_factory=list)
    config_error_count: int = 0
    runtime_error_count: int = 0
    skipped: List[str] = field(default_factory=list)
    agents_trained: int = 0
    rounds_completed: int = 0
    games_played: int = 0

    def done(self, result: CheckResult) -> None:
        """Record a finished check. Write out a message."""
        self.checks.append(result)
        if result.passed:
            if not self.quiet:
                out(f"{result.label}: passed in {result.seconds:.1f}s", bold=False)
        else:
            err(f"{result.label}: FAILED")
            for line in result.details[:5] if not self.verbose else result.details:
                err(f"  {line}", fg=None)

    def config_error(self, message: str) -> None:
        err(f"error: invalid configuration: {message}")
        self.config_error_count += 1

    def runtime_error(self, message: str) -> None:
        err(f"error: {message}")
        self.runtime_error_count += 1

    def progress(self, message: str) -> None:
        if self.verbose or not self.quiet:
            out(message, bold=False)

    @property
    def failure_count(self) -> int:
        return sum(not check.passed for check in self.checks)

    @property
    def return_code(self) -> int:
        """Return the exit code that the app should use.

        - configuration errors: 2;
        - any other error during a run: 3;
        - a failed verification check: 1;
        - otherwise 0.
        """
        if self.config_error_count:
            return 2
        if self.runtime_error_count:
            return 3
        if self.failure_count:
            return 1
        return 0

    def write(self, path: Union[str, Path]) -> Path:
        """Plain-text report: one line per check, failure details indented below it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = []
        for check in self.checks:
            lines.append(f"{check.number}. {check.name}: {'PASS' if check.passed else 'FAIL'} ({check.seconds:.2f}s)")
            lines.extend(f"    {detail}" for detail in check.details)
        lines.extend(f"{name}: SKIPPED" for name in self.skipped)
        lines.append(unstyle(str(self)))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def __str__(self) -> str:
        """Render a color report of the current state.

        Use `click.unstyle` to remove colors.
        """
        report = []
        if self.agents_trained:
            report.append(style(f"{_counted(self.agents_trained, 'agent')} trained", bold=True))
        if self.rounds_completed:
            report.append(style(f"{_counted(self.rounds_completed, 'round')} completed", bold=True))
        if self.games_played:
            report.append(f"{_counted(self.games_played, 'game')} played")
        passed = len(self.checks) - self.failure_count
        if passed:
            report.append(style(f"{_counted(passed, 'check')} ", bold=True, fg="blue") + style("passed", bold=True))
        if self.failure_count:
            report.append(style(f"{_counted(self.failure_count, 'check')} failed", fg="red"))
        if self.skipped:
            report.append(f"{_counted(len(self.skipped), 'check')} skipped")
        if self.config_error_count:
            report.append(style(_counted(self.config_error_count, "configuration error"), fg="red"))
        if self.runtime_error_count:
            report.append(style(_counted(self.runtime_error_count, "runtime error"), fg="red"))
        if not report:
            return "no checks run, no games played."
        return ", ".join(report) + "."


def _counted(count: int, noun: str) -> str:
    return f"{count} {noun}" if count == 1 else f"{count} {noun}s"
