"""Top Hessian eigenvalue of the D0 indexing loss after Adam and after SAM training.

Trains one initial model per optimizer on a small benchmark and reports
lambda_max from power iteration with finite-difference Hessian-vector products.
"""
import argparse
from dataclasses import replace

from dsiforge.bench import generate_synthetic, split_benchmark
from dsiforge.engine import EngineConfig, TrainConfig, indexing_examples, train_initial
from dsiforge.optim import sharpness_estimate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--docs", type=int, default=300)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    corpus, rs = generate_synthetic(a.docs, 10, 2048, seed=a.seed)
    splits = split_benchmark(corpus, rs, [a.docs], seed=a.seed)
    for opt in ("adam", "sam"):
        tc = TrainConfig(steps=a.steps, warmup=a.steps // 10, eval_interval=a.steps // 10,
                         optimizer=opt, co_train=False)
        cfg = replace(EngineConfig(), initial=tc)
        model, _ = train_initial(splits, cfg, a.seed)
        batch = indexing_examples(splits.corpora[0].subset(splits.corpora[0].ids()[:64]), model.registry)
        lam = sharpness_estimate(model.params, batch, model.batch_loss, iters=30, seed=a.seed)
        print(f"{opt:5s} lambda_max {lam:.4g}")


if __name__ == "__main__":
    main()
