"""One continual phase comparing episodic and generative replay over memory scopes D0, Dn and Un."""
from _common import run_preset


def main():
    out, _ = run_preset("memory_ablation", __doc__)
    print((out / "report.txt").read_text())


if __name__ == "__main__":
    main()
