import json

import pytest

from sctcheck.checker import (
    DivergentTraces, IllFormed, LeakReport, Secure, check_program, check_sct_pair,
    compare_runs, low_equiv_counterpart, low_equivalent, scan_leaks,
)
from sctcheck.isa import WORD_MASK, Label, parse_program, pub, sec
from sctcheck.machine import Read, initial_config, run
from sctcheck.schedules import GenOptions, gen_tool_schedules, parse_schedule

PUBLIC_LINE = parse_program("reg a = 1 : pub\nreg b = 2 : pub\nmem 0x40..0x41 = 5 : pub\nentry 1\n"
                            "ins 1: op add a, [a, b], 2\nins 2: load b, [0x40, 1], 3\n"
                            "ins 3: store a, [0x40], 4\n")
SECRET_BRANCH = parse_program("reg s = 0 : sec\nreg r = 0 : pub\nentry 1\n"
                              "ins 1: br eq [s, 0], 2, 3\nins 2: op add r, [r, 1], 3\n")


# ---------------------------------------------------------------- leak scanning

def test_spectre_v1_one_leak(v1_cfg, case):
    r = run(v1_cfg, case("spectre-v1").schedule)
    leaks = scan_leaks(r.observations)
    assert len(leaks) == 1
    assert leaks[0].observation == Read(sec(0x18D))
    assert leaks[0].label is Label.SECRET


def test_public_trace_has_no_leaks():
    r = run(initial_config(PUBLIC_LINE), parse_schedule("F X1 F X2 F Xv3 Xa3 R R R"))
    assert r.observations and scan_leaks(r.observations) == []


def test_aliasing_one_leak_at_the_dependent_load(alias_cfg, case):
    sched = case("aliasing-predictor").schedule
    r = run(alias_cfg, sched)
    leaks = scan_leaks(r.records, sched)
    assert len(leaks) == 1
    leak = leaks[0]
    assert str(sched[leak.step]) == "X8"
    assert leak.observation == Read(sec(0x5C + 0x48))
    assert (leak.point, leak.rule) == (8, "load-execute-nodep")
    assert leak.schedule == tuple(sched[:leak.step + 1])


def test_leak_report_json(v1_cfg, case):
    sched = case("spectre-v1").schedule
    leak = scan_leaks(run(v1_cfg, sched).records, sched)[0]
    assert leak.to_json() == {
        "kind": "leak", "schedule": "F:t F F X2 X3", "step": 4, "point": 3,
        "rule": "load-execute-nodep",
        "observation": {"kind": "read", "addr": 0x18D, "label": "sec"}, "label": "sec"}


# ---------------------------------------------------------------- low equivalence

def test_counterpart_without_secrets_is_identical():
    c = initial_config(PUBLIC_LINE)
    assert low_equiv_counterpart(c) == c


def test_complement_counterpart_flips_only_secrets(v1_cfg):
    c2 = low_equiv_counterpart(v1_cfg)
    for a in range(0x48, 0x4C):
        assert c2.mem[a] == sec(~v1_cfg.mem[a].value & WORD_MASK)
    for a in range(0x40, 0x48):
        assert c2.mem[a] == v1_cfg.mem[a]
    assert c2.reg == v1_cfg.reg
    assert low_equivalent(v1_cfg, c2)


def test_random_counterpart_is_seeded(v1_cfg):
    a = low_equiv_counterpart(v1_cfg, "random", seed=7)
    b = low_equiv_counterpart(v1_cfg, "random", seed=7)
    c = low_equiv_counterpart(v1_cfg, "random", seed=8)
    assert a == b
    assert a != c
    assert all(a.mem[k] != v1_cfg.mem[k] for k in range(0x48, 0x4C))
    assert low_equivalent(v1_cfg, a)


def test_unknown_strategy(v1_cfg):
    with pytest.raises(ValueError):
        low_equiv_counterpart(v1_cfg, "psychic")


def test_low_equivalence_detects_public_difference(v1_cfg):
    other = v1_cfg.evolve(reg={**v1_cfg.reg, "ra": pub(3)})
    assert not low_equivalent(v1_cfg, other)
    relabeled = v1_cfg.evolve(reg={**v1_cfg.reg, "ra": sec(9)})
    assert not low_equivalent(v1_cfg, relabeled)


# ---------------------------------------------------------------- two-run

def test_spectre_v1_attack_diverges_at_second_read(v1_cfg, case):
    v = check_sct_pair(v1_cfg, case("spectre-v1").schedule)
    assert isinstance(v, DivergentTraces)
    assert v.reason == "trace"
    assert v.index == 1
    assert (v.buffer_index, v.point) == (3, 3)
    assert v.left == Read(sec(0x18D))
    assert v.right == Read(sec((~0x149 & WORD_MASK) + 0x44))


def test_public_program_secure_on_every_schedule():
    c = initial_config(PUBLIC_LINE)
    for s in gen_tool_schedules(PUBLIC_LINE, GenOptions(bound=3, forwarding_hazards=True)):
        assert check_sct_pair(c, s) == Secure()


def test_v1_fence_two_run_secure(case):
    p = case("v1-fence").program
    c = initial_config(p)
    scheds = list(gen_tool_schedules(p, GenOptions(bound=20)))
    assert scheds
    assert all(check_sct_pair(c, s) == Secure() for s in scheds)


def test_schedule_ill_formed_in_one_run_only():
    c = initial_config(SECRET_BRANCH)
    v = check_sct_pair(c, parse_schedule("F:t X1 F"))
    assert isinstance(v, DivergentTraces)
    assert v.reason == "ill-formed" and v.index == 2


def test_schedule_ill_formed_in_both_runs():
    c = initial_config(SECRET_BRANCH)
    assert check_sct_pair(c, parse_schedule("R")) == IllFormed(0)


def test_final_state_divergence():
    c = initial_config(PUBLIC_LINE)
    other = c.evolve(reg={**c.reg, "a": pub(99)})
    v = compare_runs(c, other, [])
    assert isinstance(v, DivergentTraces) and v.reason == "final-state"


# ---------------------------------------------------------------- whole programs

def test_check_spectre_v1_taint(case):
    rep = check_program(case("spectre-v1").program, GenOptions(bound=20))
    assert rep.verdict == "violation"
    assert len(rep.violations) == 1
    leak = rep.violations[0]
    assert isinstance(leak, LeakReport)
    assert leak.observation == Read(sec(0x18D))
    assert rep.stats["schedules"] == 2


def test_check_v4_needs_forwarding_hazards(case):
    p = case("v4").program
    assert check_program(p, GenOptions(bound=20, forwarding_hazards=True)).verdict == "violation"
    assert check_program(p, GenOptions(bound=20)).verdict == "secure"


def test_check_constant_time_toy_secure(case):
    c = case("ct-toy")
    for mode in ("taint", "two-run"):
        assert check_program(c.program, c.options, mode=mode).verdict == "secure"


def test_budget_marks_incomplete(case):
    rep = check_program(case("ret2spec").program, GenOptions(bound=12), budget=3,
                        max_violations=100)
    assert rep.stats["schedules"] == 3
    assert rep.verdict in ("incomplete", "violation")
    c = case("ct-toy")
    total = check_program(c.program, c.options).stats["schedules"]
    assert check_program(c.program, c.options, budget=total).verdict == "secure"
    assert check_program(c.program, c.options, budget=total - 1).verdict == "incomplete"


def test_truncated_schedule_marks_incomplete(case):
    rep = check_program(case("ct-toy").program, GenOptions(bound=20, max_steps=5))
    assert rep.verdict == "incomplete"
    assert rep.stats["truncated_schedules"] > 0


def test_max_violations_cap(case):
    rep = check_program(case("ret2spec").program, GenOptions(bound=12), mode="two-run",
                        max_violations=2)
    assert len(rep.violations) == 2


def test_reports_are_deterministic(case):
    p = case("v2-attack").program
    for mode in ("taint", "two-run"):
        a = json.dumps(check_program(p, GenOptions(bound=20), mode=mode).to_json())
        b = json.dumps(check_program(p, GenOptions(bound=20), mode=mode).to_json())
        assert a == b


def test_parallel_two_run_matches_serial(case):
    p = case("ret2spec").program
    serial = check_program(p, GenOptions(bound=12), mode="two-run").to_json()
    parallel = check_program(p, GenOptions(bound=12), mode="two-run", jobs=2).to_json()
    assert serial == parallel


def test_unknown_mode(case):
    with pytest.raises(ValueError):
        check_program(case("spectre-v1").program, mode="three-run")


def test_violations_monotone_in_bound(case):
    from sctcheck.corpus import load_corpus
    prev = set()
    for n in (1, 2, 4, 8, 20):
        now = {c.name for c in load_corpus()
               if check_program(c.program, GenOptions(bound=n, forwarding_hazards=c.options.forwarding_hazards,
                                                      alias_prediction=c.options.alias_prediction),
                                params=c.params).verdict == "violation"}
        assert prev <= now
        prev = now
    assert "spectre-v1" in prev
