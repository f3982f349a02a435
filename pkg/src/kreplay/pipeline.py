"""Drive the CLI phases in-process: data, pretrain, finetune, replay variants, reports.

Used by ``scripts/`` and the acceptance tests so that both exercise the same
commands a user would type.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .cli import main

VAL = ("eval_generic_split=generic_val", "eval_concept_split=concept_val")


class PhaseFailed(RuntimeError):
    def __init__(self, argv, code):
        super().__init__(f"kreplay {' '.join(argv)} exited with {code}")
        self.code = code


def run(command: str, out: str | Path, config: str | Path | None = None, overrides=()) -> Path:
    argv = [command, "--out", str(out)]
    if config:
        argv += ["--config", str(config)]
    for item in overrides:
        argv += ["--override", item]
    code = main(argv)
    if code:
        raise PhaseFailed(argv, code)
    return Path(out)


def report(run_dir: str | Path) -> dict:
    return json.loads((Path(run_dir) / "report.json").read_text())


@dataclass
class SeedRun:
    """Directories of one seed's pipeline plus the reports gathered so far."""

    root: Path
    config: Path | None
    seed: int
    overrides: tuple = ()
    reports: dict = field(default_factory=dict)

    def _common(self):
        return (f"seed={self.seed}", f"data={self.root / 'data'}", *self.overrides)

    def evaluate(self, name: str, checkpoint: Path, val: bool = False) -> dict:
        tag = f"{name}_val" if val else name
        out = self.root / "eval" / tag
        run("eval", out, self.config, (*self._common(), f"checkpoint={checkpoint}", *(VAL if val else ())))
        self.reports[tag] = report(out)
        return self.reports[tag]

    def base(self) -> SeedRun:
        """Generate data, pretrain, finetune; evaluate both on validation and test."""
        run("gen-data", self.root / "data", self.config, self._common())
        run("pretrain", self.root / "pretrain", self.config, self._common())
        run("finetune", self.root / "finetune", self.config,
            (*self._common(), f"init={self.root / 'pretrain'}"))
        for name in ("pretrain", "finetune"):
            self.evaluate(name, self.root / name, val=True)
            self.evaluate(name, self.root / name)
        return self

    def replay(self, name: str, extra=()) -> dict:
        """One ``kreplay-train`` variant from the pretrained model; returns its test report."""
        out = self.root / name
        run("kreplay-train", out, self.config,
            (*self._common(), f"init={self.root / 'pretrain'}", f"teacher={self.root / 'finetune'}", *extra))
        self.evaluate(name, out)
        return self.reports[name]

    def best_meta(self, name: str) -> dict:
        return json.loads((self.root / name / "checkpoints.json").read_text())["best"]
