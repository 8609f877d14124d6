"""Step through a bounds check bypass one directive at a time, then let the
checker find the same leak on its own.

    python3 demos/bounds_check_bypass.py
"""
from sctcheck import GenOptions, check_program, get_case, initial_config, parse_schedule, step

case = get_case("spectre-v1")
print(case.program_text)

# guess the bounds check true, fetch both loads, run them before the branch resolves
config = initial_config(case.program)
for d in parse_schedule("F:t F F X2 X3"):
    config, obs, rec = step(config, d)
    seen = ", ".join(str(o) for o in obs) or "-"
    print(f"{str(d):6} {rec.rule:22} pc={config.pc:<3} buf={sorted(config.buf)}  {seen}")

# resolving the branch now discards both loads, but the secret address was already observed
config, obs, rec = step(config, parse_schedule("X1")[0])
print(f"{'X1':6} {rec.rule:22} pc={config.pc:<3} buf={sorted(config.buf)}  "
      + ", ".join(str(o) for o in obs))

report = check_program(case.program, GenOptions(bound=20))
print()
print(f"checker verdict: {report.verdict}")
for v in report.violations:
    print(f"  {v.to_json()['schedule']}: {v.observation} at point {v.point}")
