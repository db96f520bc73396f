"""Command-line interface: train, predict, eval, analyze, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable files, corrupt checkpoints, unmatched directories), 3 numerical
failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError, U2NetError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("u2net")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _m_values(text: str) -> list:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty M list")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="u2net", description="Nested U-structure salient object detection on numpy.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a network on an image/mask directory pair")
    t.add_argument("--config", required=True, help="preset name (full, small) or config JSON path")
    t.add_argument("--images", required=True)
    t.add_argument("--masks", required=True)
    t.add_argument("--iters", type=int, default=1000)
    t.add_argument("--batch", type=int, default=12)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss", choices=("sum", "mean"), default="mean")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--crop", type=int, default=None, help="crop size (default: 0.9 x input size)")
    t.add_argument("--no-augment", action="store_true", help="resize only; no flips or crops")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--loss-csv", default=None, help="default: <out>.loss.csv")

    r = sub.add_parser("predict", help="write fused saliency maps for an image or directory")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)

    e = sub.add_parser("eval", help="score prediction maps against ground-truth masks")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--csv", default=None, help="per-image rows")
    e.add_argument("--plot", default=None, help="PR curve PNG (default: <report>.pr.png)")
    e.add_argument("--beta2", type=float, default=0.3)
    e.add_argument("--wf-beta2", type=float, default=1.0)

    a = sub.add_parser("analyze", help="parameter and FLOPs accounting")
    a.add_argument("--config", required=True)
    a.add_argument("--block", action="append", default=[], help="e.g. RSU-7:3:32:64 or PLN:3:32:64")
    a.add_argument("--size", type=int, default=320)
    a.add_argument("--report", required=True)
    a.add_argument("--curve", type=_m_values, default=None, help="comma-separated M values")
    a.add_argument("--csv", default=None, help="cost curve CSV (default: <report>.csv)")
    a.add_argument("--plot", default=None, help="cost curve PNG (default: <report>.png)")

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and an RSU")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cases", type=int, default=100)
    return p


def _sibling(path: str, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .io import load_config, load_training_pairs
    from .network import build_network
    from .plotting import plot_loss
    from .training import TrainConfig, train, write_loss_csv

    config = load_config(args.config)
    if args.iters < 0 or args.batch < 1:
        raise ConfigurationError("--iters must be >= 0 and --batch >= 1")
    dataset = load_training_pairs(args.images, args.masks)
    size = config.input_size
    if args.no_augment:
        crop = size
    else:
        crop = args.crop if args.crop is not None else size * 9 // 10
    net = build_network(config, seed=args.seed)
    tc = TrainConfig(iterations=args.iters, batch_size=args.batch, seed=args.seed, resize=size,
                     crop=crop, augment=not args.no_augment, lr=args.lr, loss_mode=args.loss,
                     checkpoint_every=args.checkpoint_every,
                     checkpoint_path=str(_sibling(args.out, ".{iteration}.u2ck")) if args.checkpoint_every else None)

    def progress(it, loss):
        if it == 1 or it % 10 == 0 or it == args.iters:
            log.info("iteration %d loss %.6f", it, loss)

    result = train(net, dataset, tc, callback=progress)
    save_checkpoint(net, args.out, extra={"train": {"iterations": args.iters, "batch": args.batch,
                                                    "seed": args.seed, "loss": args.loss}})
    csv_path = Path(args.loss_csv) if args.loss_csv else Path(str(args.out) + ".loss.csv")
    write_loss_csv(result.history, csv_path)
    if result.history:
        plot_loss(result.history, csv_path.with_suffix(".png"))
    final = result.history[-1][1] if result.history else float("nan")
    print(f"iterations,{len(result.history)}")
    print(f"final_loss,{final:.9g}")
    print(f"checkpoint,{args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .checkpoint import load_checkpoint
    from .io import IMAGE_SUFFIXES, list_images, load_image, save_map
    from .network import predict

    net = load_checkpoint(args.ckpt)
    src = Path(args.input)
    if src.is_dir():
        items = list(list_images(src).items())
    elif src.is_file() and src.suffix.lower() in IMAGE_SUFFIXES:
        items = [(src.stem, src)]
    else:
        raise DataError(f"{src}: not an image file or directory")
    if not items:
        raise DataError(f"{src}: no images found")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for stem, path in items:
        rec = load_image(path, rgb=True)
        prob = predict(net, rec.pixels)
        if not np.all(np.isfinite(prob)):
            raise NumericalError(f"{stem}: non-finite prediction")
        save_map(prob, out / f"{stem}.png")
        print(f"{stem},{prob.shape[0]},{prob.shape[1]},{out / (stem + '.png')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_dataset
    from .plotting import plot_pr_curve

    report = evaluate_dataset(Path(args.pred), Path(args.gt), dataset=Path(args.gt).name,
                              beta2=args.beta2, wf_beta2=args.wf_beta2)
    payload = report.to_dict()
    # NaN is not valid JSON; an undefined weighted F is written as null
    if np.isnan(payload["wf_beta"]):
        payload["wf_beta"] = None
    _write_json(args.report, payload)
    if args.csv:
        Path(args.csv).write_text(report.per_image_csv())
    plot_pr_curve(report.pr, args.plot or _sibling(args.report, ".pr.png"), label=report.dataset)
    print("measure,value")
    for key in ("n_images", "max_f_beta", "mae", "wf_beta", "s_measure", "relax_f_boundary"):
        print(f"{key},{payload[key]}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analyzer import BlockKind, comparison_kinds, cost_curve, flops, network_cost, stage_shapes
    from .io import load_config
    from .plotting import plot_cost_curve

    config = load_config(args.config)
    size = (args.size, args.size)
    net = network_cost(config, size)
    payload = {"network": net.to_dict(), "stages": [
        {"stage": n, "input": list(i), "output": list(o)} for n, i, o in stage_shapes(config, size)]}
    payload["network"].pop("layers")
    blocks = [BlockKind.parse(b) for b in args.block]
    payload["blocks"] = [flops(b, size).to_dict() for b in blocks]
    print("item,params,param_mb,gflops")
    print(f"{config.name},{net.params},{net.param_bytes / 1e6:.4f},{net.gflops:.4f}")
    for b, rep in zip(blocks, payload["blocks"]):
        print(f"{b.kind}({b.c_in},{b.mid},{b.c_out}),{rep['params']},{rep['param_mb']:.4f},{rep['gflops']:.4f}")
    if args.curve is not None:
        kinds = blocks or comparison_kinds()
        curve = cost_curve(kinds, args.curve, size)
        payload["cost_curve"] = curve.to_dict()
        csv_path = Path(args.csv) if args.csv else _sibling(args.report, ".csv")
        csv_path.write_text(curve.csv())
        plot_cost_curve(curve, args.plot or _sibling(args.report, ".png"))
        print("kind,a,b,c")
        for kind, (ca, cb, cc) in curve.coefficients.items():
            print(f"{kind},{ca:.6g},{cb:.6g},{cc:.6g}")
    _write_json(args.report, payload)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    if args.cases < 1:
        raise ConfigurationError("--cases must be >= 1")
    report = run_suite(seed=args.seed, cases=args.cases, log=print)
    print(f"{'PASS' if report.passed else 'FAIL'} all ({report.seconds:.1f}s)")
    for r in report.results:
        if not r.passed:
            print(f"worst {r.name}: {r.worst}")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "analyze": cmd_analyze, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except U2NetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
