from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .disrupt import Method, grid_shuffle
from .episodic import DatasetIndex, METRIC_ALIASES, METRICS, evaluate
from .errors import EXIT_DATA, EXIT_OK, DataError, TokenBreakError, UsageError
from .formats import read_features, read_labels, to_csv, to_json, write_features, write_json, write_labels, write_lines
from .imagecore import GridSpec, load_image, resize_bilinear, save_image
from .indexer import scan_dataset, scan_images, scan_labelled
from .models import SweepRow
from .processor import extract_features, parallel_map, run_disruption
from .rng import KEY_SWEEP, keyed_rng
from .settings import Settings, load_settings, parse_grid_list
from .simlab import domain_similarity
from .utils import atomic_write_text, mirror_path
from .version import __version__
from .vitmini import ViTConfig, ViTWeights, attention_map, extract_feature, init_weights, load_weights, save_weights

log = logging.getLogger("tokenbreak")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def setup_logging(level: str) -> None:
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise UsageError(f"unknown log level {level!r}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(numeric)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        atomic_write_text(out, text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


# --- backbone ---

def _backbone(args: argparse.Namespace, s: Settings) -> Tuple[ViTWeights, ViTConfig]:
    path = getattr(args, "weights", None)
    if path:
        w = load_weights(path)
        update: Dict[str, Any] = {"pooling": s.pooling}
        if "use_pos_embed" in s.model_fields_set:
            update["use_pos_embed"] = s.use_pos_embed
        try:
            cfg = ViTConfig(**{**w.config.model_dump(), **update})
        except ValueError as e:
            raise UsageError(f"invalid backbone options: {e}") from e
        return w, cfg
    cfg = s.vit_config()
    log.warning("no --weights given; using a random backbone initialized from seed %d", s.seed)
    return init_weights(cfg, s.seed), cfg


def _image_features(root: str, args: argparse.Namespace, s: Settings, backbone=None) -> np.ndarray:
    paths = scan_images(root)
    if not paths:
        raise DataError(f"no images below {root}")
    w, cfg = backbone or _backbone(args, s)
    return extract_features(paths, w, cfg, s.threads)


# --- commands ---

def cmd_init(args: argparse.Namespace, s: Settings) -> int:
    w = init_weights(s.vit_config(), s.seed)
    save_weights(w, args.out)
    log.info("wrote %s (seed %d)", args.out, s.seed)
    return EXIT_OK


def cmd_disrupt(args: argparse.Namespace, s: Settings) -> int:
    overrides: Dict[str, Any] = {}
    if args.method == "grid":
        if not args.grid:
            raise UsageError("method grid needs --grid")
        overrides["grid_choices"] = parse_grid_list(args.grid)[:1]
    elif args.grid:
        raise UsageError(f"--grid only applies to method grid, not {args.method}")
    cfg = s.disruption_config(args.method, **overrides)
    if args.epoch < 0:
        raise UsageError("--epoch must be >= 0")

    manifest = run_disruption(args.input, args.out, cfg, args.epoch, s.threads)
    write_json(os.path.join(args.out, "manifest.json"), manifest)
    failed = manifest.failed()
    if failed:
        log.error("%d of %d files failed", len(failed), len(manifest.records))
        return EXIT_DATA
    return EXIT_OK


def cmd_features(args: argparse.Namespace, s: Settings) -> int:
    paths, labels, names = scan_labelled(args.input)
    if not paths:
        raise DataError(f"no images below {args.input}")
    w, cfg = _backbone(args, s)
    x = extract_features(paths, w, cfg, s.threads)
    write_features(args.out, x)
    write_labels(args.out + ".labels.txt", labels)
    write_lines(args.out + ".classes.txt", names)
    log.info("wrote %d x %d features to %s", x.shape[0], x.shape[1], args.out)
    return EXIT_OK


def cmd_cka(args: argparse.Namespace, s: Settings) -> int:
    backbone = None
    pooling = None
    feats = []
    for path in (args.a, args.b):
        if os.path.isdir(path):
            backbone = backbone or _backbone(args, s)
            pooling = backbone[1].pooling
            feats.append(_image_features(path, args, s, backbone))
        else:
            feats.append(read_features(path))
    report = domain_similarity(
        feats[0], feats[1], name_a=args.a, name_b=args.b, seed=s.seed,
        max_samples=s.max_cka_samples, pooling=pooling,
    )
    _emit(to_json(report), args.out)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, s: Settings) -> int:
    w, cfg = _backbone(args, s)
    side = cfg.image_size
    paths = scan_images(args.input)
    if not paths:
        raise DataError(f"no images below {args.input}")
    images = [resize_bilinear(load_image(p), side, side) for p in paths]

    def feats(imgs) -> np.ndarray:
        return np.stack(parallel_map(lambda im: extract_feature(im, w, cfg), imgs, s.threads))

    base = feats(images)
    if args.reference and os.path.abspath(args.reference) != os.path.abspath(args.input):
        reference = _image_features(args.reference, args, s, (w, cfg))
    else:
        reference = base

    rows: List[SweepRow] = []
    for gi, (r, c) in enumerate(parse_grid_list(args.grids or s.grid_choices)):
        grid = GridSpec(r, c)

        def shuffle(item: Tuple[int, Any]):
            i, im = item
            return grid_shuffle(im, grid, keyed_rng(s.seed, KEY_SWEEP, gi, i), s.resize_to)

        shuffled = feats(parallel_map(shuffle, list(enumerate(images)), s.threads))
        report = domain_similarity(shuffled, reference, seed=s.seed, max_samples=s.max_cka_samples)
        shift = float(np.mean(np.linalg.norm(shuffled - base, axis=1)))
        rows.append(SweepRow(grid=str(r) if r == c else str(grid), cka=report.cka, feature_shift=shift))
        log.info("grid %s: cka %.6f shift %.6f", grid, report.cka, shift)

    _emit(to_csv(["grid", "cka", "feature_shift"], [(row.grid, row.cka, row.feature_shift) for row in rows]), args.out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, s: Settings) -> int:
    if args.features:
        if not args.labels:
            raise UsageError("--features needs --labels")
        x = read_features(args.features)
        y = read_labels(args.labels)
        if y.shape[0] != x.shape[0]:
            raise DataError(f"{y.shape[0]} labels for {x.shape[0]} feature rows")
        ds = DatasetIndex.from_labels(y.tolist())

        def extract(ref: str) -> np.ndarray:
            return x[int(ref)]
    elif args.input:
        ds = scan_dataset(args.input)
        paths = [p for refs in ds.classes.values() for p in refs]
        w, cfg = _backbone(args, s)
        table = dict(zip(paths, extract_features(paths, w, cfg, s.threads)))

        def extract(ref: str) -> np.ndarray:
            return table[ref]
    else:
        raise UsageError("eval needs --input or --features/--labels")

    report = evaluate(extract, ds, s.way, s.shot, s.query, s.episodes, s.seed, s.metric, s.threads)
    _emit(to_json(report), args.out)
    return EXIT_OK


def cmd_attn(args: argparse.Namespace, s: Settings) -> int:
    if os.path.isdir(args.input):
        root = args.input
        paths = scan_images(root)
    elif os.path.isfile(args.input):
        root = os.path.dirname(os.path.abspath(args.input))
        paths = [args.input]
    else:
        raise DataError(f"no such file or directory: {args.input}")
    w, cfg = _backbone(args, s)

    def one(path: str) -> str:
        heat = attention_map(load_image(path), w, cfg, args.block)
        dest = os.path.splitext(mirror_path(path, root, args.out))[0] + ".png"
        return save_image(heat, dest)

    written = parallel_map(one, paths, s.threads)
    log.info("wrote %d heatmaps to %s", len(written), args.out)
    return EXIT_OK


# --- parser ---

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--config", default=None, help="key = value settings file")
    common.add_argument("--log-level", dest="log_level", default=None)

    parser = _Parser(prog="tokenbreak", description="Image-token continuity disruption and representation analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def backbone_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--weights", default=None, help="VITW1 weight file")
        p.add_argument("--pooling", choices=["cls", "mean"], default=None)
        p.add_argument("--no-pos", dest="use_pos_embed", action="store_const", const=False, default=None)
        p.add_argument("--pos", dest="use_pos_embed", action="store_const", const=True)

    p = sub.add_parser("init", parents=[common], help="write a seeded random weight file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("disrupt", parents=[common], help="disrupt every image of a directory")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", required=True, choices=[m.value.lower() for m in Method])
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--grid", default=None, help="fixed grid for method grid, e.g. 4 or 2x3")
    p.add_argument("--threshold", dest="sim_threshold", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--granularity", dest="balance_granularity", choices=["patch", "cluster"], default=None,
                   help="balanced draws per patch or per cluster")
    p.add_argument("--grid-choices", dest="grid_choices", default=None)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=None)
    p.add_argument("--total-epochs", dest="total_epochs", type=int, default=None)
    p.set_defaults(func=cmd_disrupt)

    p = sub.add_parser("features", parents=[common], help="extract backbone features of a directory")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    backbone_flags(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("cka", parents=[common], help="linear CKA between two feature sets")
    p.add_argument("--a", required=True, help=".fmat file or image directory")
    p.add_argument("--b", required=True, help=".fmat file or image directory")
    p.add_argument("--out", default=None)
    backbone_flags(p)
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("sweep", parents=[common], help="CKA against pseudo-patch grid size")
    p.add_argument("--input", required=True)
    p.add_argument("--reference", default=None)
    p.add_argument("--grids", default=None, help="comma-separated grid sides")
    p.add_argument("--out", default=None)
    backbone_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", parents=[common], help="episodic prototype evaluation")
    p.add_argument("--input", default=None, help="<root>/<class>/<images>")
    p.add_argument("--features", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--way", type=int, default=None)
    p.add_argument("--shot", type=int, default=None)
    p.add_argument("--query", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--metric", choices=[*METRICS, *METRIC_ALIASES], default=None)
    p.add_argument("--out", default=None)
    backbone_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn", parents=[common], help="class-token attention heatmaps")
    p.add_argument("--input", required=True)
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--out", required=True)
    backbone_flags(p)
    p.set_defaults(func=cmd_attn)

    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: getattr(args, k) for k in Settings.model_fields if getattr(args, k, None) is not None}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        settings = load_settings(args.config, _overrides(args))
        setup_logging(settings.log_level)
        return args.func(args, settings)
    except TokenBreakError as e:
        log.error("%s", e)
        return e.exit_code
    except OSError as e:
        # stdout and other writes outside the atomic helpers
        log.error("i/o error: %s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
