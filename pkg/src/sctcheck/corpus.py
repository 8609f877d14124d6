"""Bundled example programs with schedules, golden traces and expected verdicts.

Each case lives in ``corpus/<name>/`` as ``program.asm``, ``schedule.txt``,
``trace.jsonl`` and ``meta.json``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import List, Optional, Union

from .isa import Program, parse_program
from .machine import MachineParams, RunResult, initial_config, run
from .schedules import GenOptions, Schedule, parse_schedule
from .trace import format_trace

CASE_FILES = ("program.asm", "schedule.txt", "trace.jsonl", "meta.json")


class CorpusIntegrityError(Exception):
    pass


@dataclass(frozen=True)
class CorpusCase:
    name: str
    program_text: str
    schedule_text: str
    trace_text: str
    meta: dict = field(hash=False, compare=False)
    path: Optional[Path] = None

    @cached_property
    def program(self) -> Program:
        return parse_program(self.program_text)

    @cached_property
    def schedule(self) -> Schedule:
        return parse_schedule(self.schedule_text)

    @property
    def expected_verdict(self) -> str:
        return self.meta["verdict"]

    @property
    def notes(self) -> str:
        return self.meta.get("notes", "")

    @property
    def reconstructed(self) -> bool:
        return bool(self.meta.get("reconstructed", False))

    @property
    def params(self) -> MachineParams:
        return MachineParams(rsb_mode=self.meta.get("rsb_mode", "directive"))

    @property
    def options(self) -> GenOptions:
        """Generator options the stored verdict was produced with."""
        return GenOptions(
            bound=self.meta.get("bound", 20),
            forwarding_hazards=self.meta.get("forwarding_hazards", False),
            alias_prediction=self.meta.get("alias_prediction", False),
        )

    def replay(self) -> RunResult:
        return run(initial_config(self.program, self.params), self.schedule)

    def replay_trace(self) -> str:
        return format_trace(self.replay().records)

    def verify(self) -> List[str]:
        """Problems found replaying the case; empty when it matches its golden trace."""
        try:
            got = self.replay_trace()
        except Exception as exc:  # parse errors, ill-formed schedules
            return [f"{self.name}: replay failed: {exc}"]
        if got == self.trace_text:
            return []
        want_lines = self.trace_text.splitlines()
        got_lines = got.splitlines()
        for k in range(max(len(want_lines), len(got_lines))):
            w = want_lines[k] if k < len(want_lines) else "<missing>"
            g = got_lines[k] if k < len(got_lines) else "<missing>"
            if w != g:
                return [f"{self.name}: trace line {k}: expected {w} got {g}"]
        return [f"{self.name}: trace differs"]


def corpus_root() -> Path:
    return Path(str(resources.files("sctcheck") / "corpus"))


def load_case(path: Union[str, Path]) -> CorpusCase:
    path = Path(path)
    missing = [f for f in CASE_FILES if not (path / f).is_file()]
    if missing:
        raise CorpusIntegrityError(f"{path.name}: missing {', '.join(missing)}")
    meta = json.loads((path / "meta.json").read_text())
    case = CorpusCase(
        name=meta.get("name", path.name),
        program_text=(path / "program.asm").read_text(),
        schedule_text=(path / "schedule.txt").read_text(),
        trace_text=(path / "trace.jsonl").read_text(),
        meta=meta,
        path=path,
    )
    if case.name != path.name:
        raise CorpusIntegrityError(f"{path.name}: meta name {case.name!r} does not match directory")
    try:
        case.program, case.schedule
    except ValueError as exc:
        raise CorpusIntegrityError(f"{path.name}: {exc}") from exc
    if case.expected_verdict not in ("secure", "violation"):
        raise CorpusIntegrityError(f"{path.name}: bad verdict {case.expected_verdict!r}")
    return case


def load_corpus(root: Optional[Union[str, Path]] = None) -> List[CorpusCase]:
    """All cases under ``root`` (the bundled corpus by default), sorted by name."""
    root = corpus_root() if root is None else Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())
    return [load_case(d) for d in dirs]


def get_case(name: str, root: Optional[Union[str, Path]] = None) -> CorpusCase:
    for case in load_corpus(root):
        if case.name == name:
            return case
    raise KeyError(name)
