"""Search-metric arithmetic, correlation p-values and validation accuracy.

Run: python3 demos/statistics_tables.py
"""

from gazemap.geometry import Point2
from gazemap.metrics import (
    compute_metrics,
    p_value_two_tailed,
    search_rows,
    validation_rows,
    validation_accuracy,
)
from gazemap.session import Fixation


def main():
    d = 8212.5 / 33
    fixations = [Fixation(i * d, (i + 1) * d, Point2(0, 0)) for i in range(33)]
    m = compute_metrics(fixations, [], 18250.0)
    print("search metrics for a session of 33 fixations totalling 8212.5 ms over 18.25 s:")
    for row in search_rows(m):
        print("  " + "\t".join(str(c) for c in row))
    print(f"  share of time spent fixating: {m.ft_sd_ratio:.0%}")

    print("\ntwo-tailed p for Pearson r with 23 workers:")
    for r in (0.563, 0.635, 0.649, 0.393, -0.093, -0.132):
        print(f"  r = {r:+.3f}  p = {p_value_two_tailed(r, 23):.3f}")

    system = {"H1": 900, "H2": 235, "H3": 257, "H4": 1148, "H5": 1270}
    manual = {"H1": 744, "H2": 248, "H3": 248, "H4": 992, "H5": 992}
    v = validation_accuracy(system, manual)
    print("\nsystem vs manual dwell times:")
    for row in validation_rows(v):
        print("  " + "\t".join(str(c) for c in row))
    print(f"  mean accuracy {v.mean_pct}%")


if __name__ == "__main__":
    main()
