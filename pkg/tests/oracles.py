"""Brute-force oracles shared by the property and acceptance tests.

These walk the machine's state space directly with ``enabled_directives`` and
never consult the tool-schedule generator.
"""
from sctcheck.isa import Label
from sctcheck.machine import initial_config, step
from sctcheck.schedules import GenOptions, PathTracker, bounded_directives, gen_tool_runs


def explore(config, max_steps, bound, alias_prediction=True):
    """Breadth-first search over distinct (configuration, path map) pairs.

    Returns the set of reachable path maps and the set of secret leaks,
    each leak as (program point, observation kind).
    """
    seen = set()
    frontier = [(config, {})]
    paths, leaks = set(), set()
    for _ in range(max_steps + 1):
        nxt = []
        for cfg, entries in frontier:
            key = (cfg.key(), frozenset(entries.items()))
            if key in seen:
                continue
            seen.add(key)
            paths.add(key[1])
            for d in bounded_directives(cfg, bound, alias_prediction):
                after, obs, rec = step(cfg, d)
                for o in obs:
                    if o.label is not Label.PUBLIC:
                        leaks.add((rec.point, o.kind))
                tracker = PathTracker()
                tracker.entries = dict(entries)
                tracker.update(cfg, after, rec)
                nxt.append((after, tracker.entries))
        frontier = nxt
    return paths, leaks


def tool_coverage(program, opts, params=None):
    """Path maps at every prefix of every tool schedule, and the leaks they expose."""
    paths, leaks = set(), set()
    for r in gen_tool_runs(program, opts, params):
        cfg = initial_config(program, params)
        tracker = PathTracker()
        paths.add(tracker.frozen())
        for d in r.schedule:
            after, obs, rec = step(cfg, d)
            for o in obs:
                if o.label is not Label.PUBLIC:
                    leaks.add((rec.point, o.kind))
            tracker.update(cfg, after, rec)
            paths.add(tracker.frozen())
            cfg = after
    return paths, leaks


def uncovered_paths(enumerated, tool):
    """Enumerated path maps that are not a sub-map of any tool path map."""
    tool = [dict(t) for t in tool]
    out = []
    for p in enumerated:
        if not any(all(t.get(i) == c for i, c in p) for t in tool):
            out.append(p)
    return out
