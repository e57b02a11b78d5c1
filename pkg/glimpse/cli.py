"""
Command-line entry point: ingest, fit, learn, design, evaluate.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import DesignConfig, EvalConfig, RunConfig, load_run_config, rng, stream_seed
from .data_io import (
    ImageSet,
    load_images,
    normalize,
    read_glim,
    read_idx,
    split,
    write_csv,
    write_glim,
    write_json,
)
from .design import DesignScore, random_design, score_design, search_exhaustive, search_greedy
from .evaluation import render_panels, run_protocol
from .exceptions import ConfigError, ContractViolation, DataFormatError, DesignSearchError, NumericalError
from .learning import (
    LearnState,
    independent_baseline_loglik,
    init_from_glimpses,
    loglik,
    optimize,
    sample_glimpse_dataset,
)
from .models import GlimpseModel, MoFAModel, fit_fa_em, fit_mofa_x, fit_ppca
from .retina import RetinaPlacements

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _load_one(idx: Optional[str], glim: Optional[str], labels: Optional[str], digit: Optional[int]) -> ImageSet:
    if glim:
        return read_glim(glim, ImageSet)
    return read_idx(idx, labels=labels, digit=digit)


def cmd_ingest(args) -> int:
    images = _load_one(args.idx, args.glim, args.labels, args.digit)
    test = None
    if args.test_idx or args.test_glim:
        if args.split is not None:
            raise ContractViolation("--split cannot be combined with a separate test set")
        test = _load_one(args.test_idx, args.test_glim, args.test_labels, args.digit)
    if args.normalize:
        images = normalize(images)
        if test is not None:
            test = normalize(test, source_range=images.normalization[:2])
    if args.split is not None:
        images, test = split(images, args.split, rng(args.seed, "sampling"))
    out = Path(args.out)
    write_glim(out / "train.glim", images)
    print(f"train: {images.N} images of {images.rows}x{images.cols} -> {out / 'train.glim'}")
    if test is not None:
        write_glim(out / "test.glim", test)
        print(f"test: {test.N} images -> {out / 'test.glim'}")
    return EXIT_OK


def _tune_psi_y(model: GlimpseModel, train: ImageSet, cfg: RunConfig):
    sampling = cfg.learn.sampling
    data = sample_glimpse_dataset(
        train, model.placements, sampling.n, cfg.rng("sampling"), sampling.protocol, sampling.per_image
    )
    state, trace = optimize(LearnState.from_glimpse_model(model), data, cfg.learn.optimizer, fix_W=True)
    metadata = {**model.metadata, "psi_y": "optimized", "loglik_per_example": float(trace["loglik"].iloc[-1]) / data.n}
    return state.to_glimpse_model(model.retina, model.image_shape, model.offsets, metadata), trace


def cmd_fit(args) -> int:
    cfg = load_run_config(args.config)
    train = load_images(cfg.data.train)
    fit = cfg.fit
    if fit.kind == "ppca":
        mixture = MoFAModel.single(fit_ppca(train.pixels, fit.K))
    elif fit.kind == "fa":
        result = fit_fa_em(train.pixels, fit.K, fit.em_iters, fit.em_tol)
        mixture = MoFAModel.single(result.model)
    else:
        mixture = fit_mofa_x(train.pixels, fit.K, fit.M, stream_seed(cfg.seed, "kmeans"))
    metadata = {"kind": fit.kind, "K": fit.K, "M": mixture.M, "source": str(cfg.data.train), "psi_y": "projected"}
    model = GlimpseModel.from_x_model(mixture, cfg.retina, train.shape, cfg.offsets(), metadata)
    out = Path(cfg.output_dir)
    if fit.tune_psi_y:
        model, trace = _tune_psi_y(model, train, cfg)
        write_csv(trace, out / "fit_trace.csv")
    write_glim(out / "model.glim", model)
    print(f"{fit.kind} model: M={mixture.M}, D={mixture.D}, K={mixture.K}, {model.n_offsets} offsets -> {out / 'model.glim'}")
    return EXIT_OK


def cmd_learn(args) -> int:
    cfg = load_run_config(args.config)
    train = load_images(cfg.data.train)
    init_model = None
    if cfg.learn.init_model is not None:
        init_model = read_glim(cfg.learn.init_model, GlimpseModel)
        placements = init_model.placements
    else:
        placements = RetinaPlacements(cfg.retina, train.shape, cfg.offsets())
    sampling = cfg.learn.sampling
    data = sample_glimpse_dataset(
        train, placements, sampling.n, cfg.rng("sampling"), sampling.protocol, sampling.per_image
    )
    if init_model is not None:
        state = LearnState.from_glimpse_model(init_model)
    else:
        state = init_from_glimpses(data, cfg.fit.K, cfg.learn.init_iters)
    per = float(data.n_observations())
    baseline = independent_baseline_loglik(data) / per
    initial = loglik(state, data) / per
    fix_w = args.fix_w or cfg.learn.fix_w
    state, trace = optimize(state, data, cfg.learn.optimizer, fix_W=fix_w, learn_mean=cfg.learn.learn_mean)
    final = float(trace["loglik"].iloc[-1]) / per
    summary = {
        "records": data.n,
        "observations": int(data.n_observations()),
        "baseline_loglik_per_example": baseline,
        "init_loglik_per_example": initial,
        "optimized_loglik_per_example": final,
        "status": trace.attrs.get("status"),
        "fix_w": fix_w,
        "units": "nats",
    }
    model = state.to_glimpse_model(placements.spec, train.shape, placements.offsets, {"kind": "glimpse", **summary})
    out = Path(cfg.output_dir)
    write_glim(out / "model.glim", model)
    write_glim(out / "glimpses.glim", data)
    write_csv(trace, out / "learn_trace.csv")
    write_json(summary, out / "learn_summary.json")
    print(f"LL/example (nats): baseline {baseline:.2f}, init {initial:.2f}, optimized {final:.2f}")
    return EXIT_OK


def _optional_config(args) -> Optional[RunConfig]:
    return load_run_config(args.config) if args.config else None


def _pick(flag, default):
    return default if flag is None else flag


def cmd_design(args) -> int:
    cfg = _optional_config(args)
    defaults = cfg.design if cfg else DesignConfig()
    mode = _pick(args.mode, defaults.mode)
    J = _pick(args.j, defaults.J)
    allow_repeats = args.allow_repeats or defaults.allow_repeats
    seed = _pick(args.seed, cfg.seed if cfg else 0)
    model = read_glim(args.model, GlimpseModel)
    if mode == "exhaustive":
        scores = search_exhaustive(model, None, J, allow_repeats, _pick(args.max_designs, defaults.max_designs))
    elif mode == "greedy":
        scores = [search_greedy(model, None, J, allow_repeats)]
    else:
        design = random_design(range(model.n_offsets), J, rng(seed, "random_design"))
        scores = [score_design(model, design)]
    document = {
        "mode": mode,
        "J": J,
        "designs": [s.to_json(model.offsets) for s in (scores[: args.top] if args.top else scores)],
    }
    if args.out:
        write_json(document, args.out)
    else:
        print(json.dumps(document, indent=2))
    best = scores[0]
    offsets = ", ".join(str(list(o)) for o in best.design.offsets(model.offsets))
    print(f"best design {offsets}: {best.eig_bits:.4f} bits ({best.kind.value})", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _optional_config(args)
    defaults = cfg.evaluate if cfg else EvalConfig()
    test_path = _pick(args.test, cfg.data.test if cfg else None)
    if test_path is None:
        raise ConfigError("no test set: pass --test or set data.test in the config", key="data.test")
    out = _pick(args.out, cfg.output_dir / "eval" if cfg else None)
    if out is None:
        raise ConfigError("no output directory: pass --out or give --config")
    out = Path(out)
    model = read_glim(args.model, GlimpseModel)
    try:
        document = json.loads(Path(args.design).read_text())
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"design file {args.design} is not valid JSON: {exc}") from exc
    designs = document.get("designs", [document]) if isinstance(document, dict) else document
    best = DesignScore.from_json(designs[0], model.offsets)
    test = load_images(test_path)
    report = run_protocol(
        model,
        best.design,
        test,
        rng(_pick(args.seed, cfg.seed if cfg else 0), "protocol"),
        fixation_counts=range(best.design.J + 1),
        threshold_bits=_pick(args.threshold_bits, defaults.threshold_bits),
    )
    table = report.table()
    write_csv(table, out / "rmse_table.csv")
    write_csv(report.records, out / "per_image.csv")
    write_csv(report.sign_test_frame(), out / "sign_tests.csv")
    write_csv(report.census(), out / "entropy_census.csv")
    for i in _pick(args.panels, defaults.panels):
        render_panels(model, test.pixels[i], report.bed_design.offset_ids, out / "panels", prefix=f"image{i:04d}")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    for k, result in sorted(report.sign_tests.items()):
        print(
            f"{k} fixation(s): BED better on {result.wins}/{result.n_effective} "
            f"(ties {result.ties}), one-sided p={result.p_value:.3g}, two-sided p={result.p_two_sided:.3g}"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glimpse", description="Foveated glimpse models and fixation design.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="read, normalize and split an image set")
    source = ingest.add_mutually_exclusive_group(required=True)
    source.add_argument("--idx", help="IDX image file")
    source.add_argument("--glim", help="GLIM image set")
    ingest.add_argument("--labels", help="IDX label file (needed with --digit)")
    ingest.add_argument("--test-idx", help="separate IDX test image file")
    ingest.add_argument("--test-glim", help="separate GLIM test image set")
    ingest.add_argument("--test-labels", help="IDX label file for the test images")
    ingest.add_argument("--digit", type=int, help="keep only this label")
    ingest.add_argument("--normalize", action="store_true", help="rescale intensities to [-1, 1]")
    ingest.add_argument("--split", type=float, help="train fraction of a seeded shuffle")
    ingest.add_argument("--seed", type=int, default=0)
    ingest.add_argument("--out", required=True, help="output directory")
    ingest.set_defaults(handler=cmd_ingest)

    fit = sub.add_parser("fit", help="fit an x-space PPCA/FA/MoFA model")
    fit.add_argument("--config", required=True)
    fit.set_defaults(handler=cmd_fit)

    learn = sub.add_parser("learn", help="learn a model from sampled glimpses")
    learn.add_argument("--config", required=True)
    learn.add_argument("--fix-w", action="store_true", help="optimize only the glimpse noise")
    learn.set_defaults(handler=cmd_learn)

    design = sub.add_parser("design", help="rank fixation designs by expected information gain")
    design.add_argument("--model", required=True)
    design.add_argument("--config", help="run configuration whose design section supplies the defaults")
    design.add_argument("--j", type=int, help="fixations per design (default 2)")
    design.add_argument("--mode", choices=["exhaustive", "greedy", "random"], help="default exhaustive")
    design.add_argument("--seed", type=int)
    design.add_argument("--allow-repeats", action="store_true")
    design.add_argument("--max-designs", type=int, help="exhaustive search limit (default 10^6)")
    design.add_argument("--top", type=int, default=0, help="keep only the best N designs (0 keeps all)")
    design.add_argument("--out", help="write the ranking here instead of stdout")
    design.set_defaults(handler=cmd_design)

    evaluate = sub.add_parser("evaluate", help="reconstruction protocol on a test set")
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--design", required=True, help="design JSON from the design command")
    evaluate.add_argument("--config", help="run configuration whose evaluate section supplies the defaults")
    evaluate.add_argument("--test", help="test images (default data.test of the config)")
    evaluate.add_argument("--out", help="output directory (default <output_dir>/eval of the config)")
    evaluate.add_argument("--seed", type=int)
    evaluate.add_argument("--threshold-bits", type=float, help="entropy census threshold (default 0.0808)")
    evaluate.add_argument("--panels", type=int, nargs="*", help="test indices to render")
    evaluate.set_defaults(handler=cmd_evaluate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    np.seterr(over="ignore", under="ignore")
    try:
        return args.handler(args)
    except (ConfigError, ContractViolation, DesignSearchError, FileNotFoundError, IsADirectoryError) as exc:
        logger.error("%s", exc)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except DataFormatError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
