"""Forgetting events while memorizing D0 with Adam and with SAM."""
from _common import run_preset


def main():
    out, _ = run_preset("sam_vs_base", __doc__)
    print((out / "report.txt").read_text())


if __name__ == "__main__":
    main()
