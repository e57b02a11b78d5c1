#!/usr/bin/env python3
"""
Reproduce the MNIST 2s fixation experiment end to end:
fit a 10-component mixture, pick the best pair of fixations, and compare
BED against random fixations on the test 2s.

Usage: python run_mnist_protocol.py [MNIST_DIR] [OUT_DIR]
(MNIST_DIR defaults to $GLIMPSE_MNIST_DIR, OUT_DIR to runs/mnist)
"""

import logging
import os
import sys
import time
from pathlib import Path

# Add project root to path
sys.path.insert(0, os.path.abspath('.'))

from glimpse.config import MNIST_OFFSETS, stream_seed
from glimpse.data_io import find_mnist, normalize, read_idx, write_csv, write_glim, write_json
from glimpse.design import fixation_order, search_exhaustive
from glimpse.evaluation import entropy_census, render_panels, run_protocol
from glimpse.models import GlimpseModel, fit_mofa_x
from glimpse.retina import RetinaSpec, enumerate_offsets

SEED = 0
M, K, J = 10, 70, 2


def load_data(ctx):
    """Read and normalize the training and test 2s"""
    paths = find_mnist(ctx["mnist_dir"])
    train = normalize(read_idx(paths["train_images"], paths["train_labels"], digit=2))
    test = normalize(
        read_idx(paths["test_images"], paths["test_labels"], digit=2), source_range=train.normalization[:2]
    )
    print(f"  ✅ {train.N} training and {test.N} test images of {train.rows}x{train.cols}")
    ctx.update(train=train, test=test)
    return True


def fit_model(ctx):
    """Fit the x-space mixture of factor analyzers"""
    train = ctx["train"]
    mixture = fit_mofa_x(train.pixels, K=K, M=M, seed=stream_seed(SEED, "kmeans"))
    offsets = enumerate_offsets(MNIST_OFFSETS, MNIST_OFFSETS)
    model = GlimpseModel.from_x_model(
        mixture, RetinaSpec(), train.shape, offsets, {"kind": "mofa", "K": K, "M": M, "source": "mnist-2s"}
    )
    write_glim(ctx["out"] / "model.glim", model)
    print(f"  ✅ M={mixture.M}, K={mixture.K}, pi_max={mixture.pi.max():.3f}, {model.n_offsets} offsets")
    ctx["model"] = model
    return True


def design_search(ctx):
    """Rank every pair of offsets by the information-gain bound"""
    model = ctx["model"]
    ranking = search_exhaustive(model, J=J)
    write_json({"mode": "exhaustive", "J": J, "designs": [s.to_json(model.offsets) for s in ranking[:20]]},
               ctx["out"] / "design.json")
    for score in ranking[:3]:
        offsets = ", ".join(str(list(o)) for o in score.design.offsets(model.offsets))
        print(f"  📐 {offsets}: {score.eig_bits:.4f} bits")
    ctx["best"] = ranking[0]
    ctx["order"] = fixation_order(model, ranking[0].design)
    return True


def protocol(ctx):
    """Reconstruct the test 2s from BED and random fixations"""
    model, test, best = ctx["model"], ctx["test"], ctx["best"]
    report = run_protocol(model, best.design, test, seed=stream_seed(SEED, "protocol"),
                          fixation_counts=range(J + 1))
    table = report.table()
    write_csv(table, ctx["out"] / "rmse_table.csv")
    write_csv(report.records, ctx["out"] / "per_image.csv")
    write_csv(report.sign_test_frame(), ctx["out"] / "sign_tests.csv")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    for k, result in sorted(report.sign_tests.items()):
        print(f"  📊 {k} fixation(s): BED better on {result.wins}/{result.n_effective}, p={result.p_value:.3g}")
    for i in range(3):
        render_panels(model, test.pixels[i], report.bed_design.offset_ids, ctx["out"] / "panels", prefix=f"image{i:04d}")
    return all(report.rmse("BED", k) < report.rmse("random", k) for k in range(1, J + 1))


def census(ctx):
    """Count test points whose component assignment stays uncertain"""
    model, test, order = ctx["model"], ctx["test"], ctx["order"]
    designs = {"full image": None, **{f"BED {k}": order.offset_ids[:k] for k in range(1, J + 1)}}
    counts = entropy_census(model, test, designs)
    for label, count in counts.items():
        print(f"  🔎 {label}: {count}/{test.N} above 0.0808 bits")
    write_json(counts, ctx["out"] / "entropy_census.json")
    return True


def main():
    """Run all stages"""
    print("🚀 MNIST 2s Fixation Protocol")
    print("=" * 50)

    mnist_dir = sys.argv[1] if len(sys.argv) > 1 else os.environ.get("GLIMPSE_MNIST_DIR")
    if not mnist_dir:
        print("⚠️  No MNIST directory given and GLIMPSE_MNIST_DIR is not set; skipping")
        return True
    out = Path(sys.argv[2] if len(sys.argv) > 2 else "runs/mnist")
    out.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(level=logging.WARNING, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    ctx = {"mnist_dir": mnist_dir, "out": out}

    stages = [
        ("Load Data", load_data),
        ("Fit Mixture", fit_model),
        ("Design Search", design_search),
        ("Reconstruction Protocol", protocol),
        ("Entropy Census", census),
    ]

    passed = 0
    for stage_name, stage_func in stages:
        print(f"\n📋 {stage_name}:")
        start = time.time()
        try:
            if stage_func(ctx):
                passed += 1
                print(f"  ⏱️  {time.time() - start:.1f}s")
            else:
                print(f"  ❌ {stage_name} did not meet its check")
        except Exception as e:
            print(f"  ❌ {stage_name} error: {e}")
            break

    print("\n" + "=" * 50)
    print(f"📊 PROTOCOL SUMMARY: {passed}/{len(stages)} stages passed, outputs in {out}")
    print("=" * 50)
    return passed == len(stages)


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
