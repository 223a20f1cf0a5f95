"""Five-phase continual indexing: cl(Dn), cl(Un) and cl(Un)+genmem(Un).

Prints the full report plus the headline numbers: mean A5 Hits@10 per
method, D0 indexing accuracy lost by cl(D1), and R1 Hits@1 after phase 1.
"""
import numpy as np

from _common import run_preset
from dsiforge.metrics import cl_summary, read_perf_csv


def main():
    out, cfg = run_preset("case_study", __doc__)
    print((out / "report.txt").read_text())
    perf = {m.key: [read_perf_csv(out / f"seed{s}" / m.key.replace(":", "_") / "perf.csv")
                    for s in cfg.run.seeds] for m in cfg.methods()}
    for key, mats in perf.items():
        a5 = [cl_summary(P["hits@10"], P["hits@10"].n_phases - 1).A for P in mats]
        h1 = [P["hits@1"].get(1, 1) for P in mats]
        print(f"{key:22s} mean A5 Hits@10 {100 * np.mean(a5):6.2f}   R1 Hits@1 after phase 1 {100 * np.mean(h1):6.2f}")
    if "cl_new" in perf:
        drop = [P["indexing_accuracy"].get(0, 0) - P["indexing_accuracy"].get(1, 0) for P in perf["cl_new"]]
        print(f"cl(D1) D0 indexing accuracy drop: {100 * np.mean(drop):.2f} points")


if __name__ == "__main__":
    main()
