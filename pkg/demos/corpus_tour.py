"""Check every bundled case in both modes and print a one-line summary each.

    python3 demos/corpus_tour.py
"""
import time

from sctcheck import check_program, load_corpus

print(f"{'case':20} {'taint':10} {'two-run':10} {'schedules':>9}  expected")
start = time.perf_counter()
for case in load_corpus():
    taint = check_program(case.program, case.options, params=case.params)
    pair = check_program(case.program, case.options, mode="two-run", params=case.params)
    print(f"{case.name:20} {taint.verdict:10} {pair.verdict:10} "
          f"{taint.stats['schedules']:>9}  {case.expected_verdict}")
print(f"\n{time.perf_counter() - start:.2f}s")
