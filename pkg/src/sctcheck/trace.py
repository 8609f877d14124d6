"""JSON-lines traces: one step record per line, keys in a fixed order."""
from __future__ import annotations

import json
from typing import Iterable, List, Sequence

from .machine import Jump, MissSpec, Observation, StepRecord


def observation_json(o: Observation) -> dict:
    if isinstance(o, MissSpec):
        return {"kind": "miss"}
    if isinstance(o, Jump):
        return {"kind": "jump", "target": o.target.value, "label": o.label.short}
    return {"kind": o.kind, "addr": o.addr.value, "label": o.label.short}


def record_json(position: int, rec: StepRecord) -> dict:
    return {
        "i": position,
        "directive": str(rec.directive),
        "rule": rec.rule,
        "obs": [observation_json(o) for o in rec.observations],
        "pc": rec.pc_after,
    }


def trace_lines(records: Sequence[StepRecord]) -> List[str]:
    return [json.dumps(record_json(k, r)) for k, r in enumerate(records)]


def format_trace(records: Sequence[StepRecord]) -> str:
    lines = trace_lines(records)
    return "\n".join(lines) + ("\n" if lines else "")


def parse_trace(text: str) -> List[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def observations_json(obs: Iterable[Observation]) -> List[dict]:
    return [observation_json(o) for o in obs]
