import argparse
import logging
from pathlib import Path

from dsiforge.cli import run_experiment
from dsiforge.config import load_config

FIGURES = Path(__file__).resolve().parent.parent / "figures"


def run_preset(name: str, description: str):
    """Parse --out/--seeds, run figures/<name>.toml and return (run dir, config)."""
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default=f"runs/{name}")
    p.add_argument("--seeds", help="comma-separated seeds (default: from the preset)")
    p.add_argument("-v", "--verbose", action="store_true")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(FIGURES / f"{name}.toml")
    if a.seeds:
        cfg.run.seeds = [int(s) for s in a.seeds.split(",")]
    out, ok = run_experiment(cfg, a.out)
    if not ok:
        raise SystemExit(f"some cells failed, see {out / 'manifest.json'}")
    return out, cfg
