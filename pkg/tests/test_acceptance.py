"""Acceptance gate. Each test is one numbered criterion; the run ends with a
PASS/FAIL line per criterion (see ``pytest_terminal_summary`` in conftest)."""
import copy
import io
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sctcheck.checker import check_program
from sctcheck.cli import EXIT_OK, EXIT_VIOLATION, main
from sctcheck.corpus import corpus_root, get_case, load_corpus
from sctcheck.isa import Label, pub, sec, serialize_program
from sctcheck.machine import (
    MISS, FetchTarget, Fwd, IllFormedSchedule, Read, Retire, enabled_directives, equivalent,
    initial_config, run, run_sequential, step,
)
from sctcheck.schedules import GenOptions, enumerate_all_schedules, gen_tool_runs, parse_schedule

from oracles import explore, tool_coverage, uncovered_paths
from strategies import programs, programs_and_walks

criterion = pytest.mark.criterion

# hand-written attack schedules for the two introductory examples
V1_ATTACK = "F:t F F X2 X3"
ALIAS_ATTACK = "F F F F F F F F Xv2 XF7<2 X8 Xa2 X7"

FUZZ = settings(max_examples=1500, derandomize=True, database=None)


def secret_free(observations):
    return all(o.label is Label.PUBLIC for o in observations)


def retires(schedule):
    return sum(isinstance(d, Retire) for d in schedule)


# ---------------------------------------------------------------- 1-3 golden traces

@criterion(1, "golden trace: bounds check bypass")
def test_criterion_1_spectre_v1():
    p = get_case("spectre-v1").program
    t = time.perf_counter()
    r = run(initial_config(p), parse_schedule(V1_ATTACK))
    elapsed = time.perf_counter() - t
    key1 = p.mem[0x49]
    assert key1.label is Label.SECRET
    assert r.observations == [Read(pub(0x49)), Read(sec(key1.value + 0x44))]
    assert elapsed < 1.0


@criterion(2, "golden trace: aliasing predictor")
def test_criterion_2_aliasing_predictor():
    p = get_case("aliasing-predictor").program
    x = p.regs["rb"]
    r = run(initial_config(p), parse_schedule(ALIAS_ATTACK))
    assert r.observations == [Read(sec(x.value + 0x48)), Fwd(pub(0x42)), MISS, Fwd(pub(0x45))]
    assert 7 not in r.config.buf and 8 not in r.config.buf


@criterion(3, "golden traces: ret2spec, retpoline, v2, v1.1, v4, fenced v1")
def test_criterion_3_other_variants():
    for c in load_corpus():
        assert c.verify() == [], c.name

    # attacker steers pc when the return stack is empty
    c = get_case("ret2spec")
    r = run(initial_config(c.program, c.params), c.schedule)
    steer = [rec for rec in r.records if rec.rule == "ret-fetch-rsb-empty"]
    assert len(steer) == 1 and isinstance(steer[0].directive, FetchTarget)
    assert steer[0].pc_after == steer[0].directive.target
    assert not secret_free(r.observations)

    # retpoline: the trapped return resolves to 20; no step takes a jump guess
    c = get_case("retpoline")
    cfg = initial_config(c.program, c.params)
    for d in c.schedule:
        assert not any(isinstance(e, FetchTarget) for e in enabled_directives(cfg))
        cfg = step(cfg, d).config
    r = run(initial_config(c.program, c.params), c.schedule)
    assert r.observations[-2:] == [MISS, r.observations[-1]]
    assert r.observations[-1].kind == "jump" and r.observations[-1].target.value == 20
    assert 12 not in r.config.buf
    for tr in gen_tool_runs(c.program, GenOptions(bound=20), c.params):
        assert not any(isinstance(d, FetchTarget) for d in tr.schedule)

    # v2: a secret-dependent read follows the mistrained indirect-jump guess
    c = get_case("v2-attack")
    r = run(initial_config(c.program, c.params), c.schedule)
    guess = next(k for k, rec in enumerate(r.records) if isinstance(rec.directive, FetchTarget))
    later = [o for rec in r.records[guess:] for o in rec.observations]
    assert any(isinstance(o, Read) and o.label is Label.SECRET for o in later)

    # v1.1 and v4 reconstructions leak through a secret-labelled read
    for name in ("v1.1", "v4"):
        c = get_case(name)
        r = run(initial_config(c.program, c.params), c.schedule)
        assert any(isinstance(o, Read) and o.label is Label.SECRET for o in r.observations), name

    # fenced v1: the unfenced attack schedule is rejected, and checking finds nothing
    c = get_case("v1-fence")
    with pytest.raises(IllFormedSchedule) as info:
        run(initial_config(c.program), parse_schedule(c.meta["attack_schedule"]))
    assert info.value.position == c.meta["attack_ill_formed_at"]
    assert check_program(c.program, GenOptions(bound=20)).verdict == "secure"


# ---------------------------------------------------------------- 4-7 properties

@criterion(4, "determinism over 10,000 (configuration, directive) pairs")
def test_criterion_4_determinism():
    pairs = [0]

    @settings(max_examples=600, derandomize=True, database=None)
    @given(programs_and_walks())
    def prop(data):
        _, c, sched = data
        for d in sched:
            for e in enabled_directives(c):
                a = step(c, e)
                b = step(copy.deepcopy(c), e)
                assert a == b
                assert a.config.key() == b.config.key()
                pairs[0] += 1
            c = step(c, d).config

    prop()
    assert pairs[0] >= 10_000


@criterion(5, "sequential equivalence on random programs and schedules")
def test_criterion_5_sequential_equivalence():
    seen = set()

    @FUZZ
    @given(programs_and_walks(max_instrs=8, max_len=40))
    def prop(data):
        p, c, sched = data
        seen.add(serialize_program(p))
        r = run(c, sched)
        seq = run_sequential(c, max_retires=retires(sched))
        assert equivalent(r.config, seq.config)
        if r.config.is_terminal:
            assert r.config == seq.config

    prop()
    assert len(seen) >= 1000


@criterion(6, "general consistency across all enumerated schedules")
def test_criterion_6_general_consistency():
    seen = set()

    @settings(max_examples=60, derandomize=True, database=None)
    @given(programs(max_instrs=4))
    def prop(p):
        seen.add(serialize_program(p))
        c = initial_config(p)
        first, terminal = {}, {}
        for sched in enumerate_all_schedules(c, 10, bound=3):
            out = run(c, sched).config
            n = retires(sched)
            assert equivalent(first.setdefault(n, out), out)
            if out.is_terminal:
                assert terminal.setdefault(n, out) == out

    prop()
    assert len(seen) >= 50


@criterion(7, "label stability: secret-free speculative trace implies secret-free sequential trace")
def test_criterion_7_label_stability():
    checked = [0]

    @FUZZ
    @given(programs_and_walks(max_instrs=8, max_len=40))
    def prop(data):
        _, c, sched = data
        r = run(c, sched)
        if secret_free(r.observations):
            checked[0] += 1
            assert secret_free(run_sequential(c, max_retires=retires(sched)).observations)

    prop()
    assert checked[0] > 0


# ---------------------------------------------------------------- 8 tool soundness

def soundness_gaps(program, params, n, alias, depth=60):
    """(leaks the tool misses, enumerated paths it does not cover)."""
    paths, leaks = explore(initial_config(program, params), depth, n, alias)
    _, tool_leaks = tool_coverage(
        program, GenOptions(bound=n, forwarding_hazards=True, alias_prediction=alias), params)
    tool_paths, _ = tool_coverage(
        program, GenOptions(bound=n, forwarding_hazards=True, alias_prediction=alias,
                            fence_stall=False, timing_variants=True), params)
    return leaks - tool_leaks, uncovered_paths(paths, tool_paths)


@criterion(8, "tool soundness and path coverage at bounds 2, 3 and 4")
def test_criterion_8_tool_soundness():
    for c in load_corpus():
        for n in (2, 3, 4):
            missed, uncovered = soundness_gaps(c.program, c.params, n, c.options.alias_prediction)
            assert not missed and not uncovered, (c.name, n, missed, uncovered)

    seen = set()

    @settings(max_examples=100, derandomize=True, database=None)
    @given(programs(max_instrs=6), st.booleans())
    def prop(p, alias):
        seen.add(serialize_program(p))
        for n in (2, 3, 4):
            missed, uncovered = soundness_gaps(p, None, n, alias)
            assert not missed and not uncovered, (n, missed, uncovered)

    prop()
    assert len(seen) >= 20


# ---------------------------------------------------------------- 9-10 checker

@criterion(9, "checker end to end on the corpus in under 60 s")
def test_criterion_9_checker_end_to_end():
    expected = {"spectre-v1": EXIT_VIOLATION, "v1.1": EXIT_VIOLATION, "v4": EXIT_VIOLATION,
                "v2-attack": EXIT_VIOLATION, "ret2spec": EXIT_VIOLATION,
                "v1-fence": EXIT_OK, "ct-toy": EXIT_OK}
    t = time.perf_counter()
    for c in load_corpus():
        argv = ["check", str(corpus_root() / c.name / "program.asm"), "--bound", "20"]
        if c.options.forwarding_hazards:
            argv.append("--forwarding-hazards")
        if c.options.alias_prediction:
            argv.append("--alias-prediction")
        code = main(argv, io.StringIO())
        assert code == {"violation": EXIT_VIOLATION, "secure": EXIT_OK}[c.expected_verdict], c.name
        if c.name in expected:
            assert code == expected[c.name], c.name
    assert time.perf_counter() - t < 60


@criterion(10, "two-run and taint verdicts agree on every corpus case")
def test_criterion_10_two_run_matches_taint():
    for c in load_corpus():
        taint = check_program(c.program, c.options, mode="taint", params=c.params).verdict
        pair = check_program(c.program, c.options, mode="two-run", params=c.params).verdict
        assert taint == pair, c.name
