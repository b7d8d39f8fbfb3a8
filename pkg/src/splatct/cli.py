"""Command-line interface: phantom/init/render/finetune/metrics/serve.

Exit codes: 0 success, 1 usage error (bad arguments or parameter ranges),
2 I/O error (missing or malformed files), 3 numerical failure (degenerate
data). Diagnostics go to standard error; only requested results (the metrics
table) go to standard output.

Views for ``finetune`` and ``metrics`` are described by a JSON file:
``{"views": [{"image": "v0.png", "position": [x, y, z], "target": [x, y, z],
"up": [0, 1, 0], "fov_y": 0.8}, ...]}``. Image paths resolve relative to the
JSON file; each view's resolution is taken from its image.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._png import read_png, write_png
from .sceneio import SceneFormatError, load_scene, save_scene
from .camera import DegenerateGeometryError, make_camera
from .core import InvalidParameterError
from .diffrender import LossConfig, finetune
from .metrics import composite_over, evaluate
from .phantom import make_phantom
from .priming import EmptySceneError, PrimingConfig, agp_initialize
from .raster import RenderConfig, render
from .service import (
    FULL_MASK,
    MalformedRequestError,
    OversizedRequestError,
    RenderRequest,
    SceneService,
    mask_bits,
    render_request_png,
)
from .volume import (
    CtVolume,
    DegenerateVolumeError,
    LabelVolume,
    UnknownLabelError,
    VolumeFormatError,
    build_input_channels,
    consolidate_labels,
    load_preset,
    load_transfer_functions,
    load_volume,
    normalize_hu,
    resample_isotropic,
    resample_labels,
    save_volume,
)

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _note(message: str) -> None:
    print(message, file=sys.stderr)


def _load_labels(path, vol: CtVolume) -> LabelVolume:
    """Labels ship in the same raw/meta container, integer-valued payload."""
    container = load_volume(path)
    data = container.intensities
    if np.any(data != np.round(data)) or data.min() < 0:
        raise VolumeFormatError(f"{path}: labels must be nonnegative integers")
    if container.dims != vol.dims:
        raise VolumeFormatError(
            f"labels dims {container.dims} do not match volume dims {vol.dims}")
    return LabelVolume(labels=data.astype(np.int64))


def _load_tfs(spec: str):
    if spec in ("seen", "unseen"):
        return load_preset(spec)
    return load_transfer_functions(spec)


def _render_config(args) -> RenderConfig:
    return RenderConfig(precision=args.precision, threads=args.threads)


def _load_views(path):
    """views.json -> list of (camera, target image) pairs."""
    path = Path(path)
    spec = json.loads(path.read_text(encoding="utf-8"))
    entries = spec.get("views") if isinstance(spec, dict) else None
    if not isinstance(entries, list) or not entries:
        raise VolumeFormatError(f"{path}: expected a nonempty 'views' list")
    views = []
    for i, entry in enumerate(entries):
        try:
            image = read_png(path.parent / entry["image"])
            camera = make_camera(
                position=entry["position"], target=entry["target"],
                up=entry.get("up", (0.0, 1.0, 0.0)),
                fov_y=float(entry.get("fov_y", 0.8)),
                width=image.shape[1], height=image.shape[0])
        except KeyError as exc:
            raise VolumeFormatError(f"{path}: view {i} is missing {exc}") from exc
        views.append((camera, image))
    return views


def _cmd_phantom(args) -> int:
    vol, labels = make_phantom(dims=args.dims, spacing=args.spacing)
    stem = Path(args.out_stem)
    save_volume(vol, stem.parent / (stem.name + "_vol"))
    label_vol = CtVolume(intensities=labels.labels.astype(np.float64),
                         spacing=vol.spacing, origin=vol.origin,
                         direction=vol.direction)
    save_volume(label_vol, stem.parent / (stem.name + "_labels"))
    _note(f"wrote {stem.name}_vol.raw/.meta and {stem.name}_labels.raw/.meta "
          f"({np.count_nonzero(labels.labels)} foreground voxels)")
    return 0


def _cmd_init(args) -> int:
    vol = load_volume(args.volume)
    labels = _load_labels(args.labels, vol)
    if args.iso > 0:
        labels = resample_labels(labels, vol, args.iso)
        vol = resample_isotropic(vol, args.iso)
    groups = consolidate_labels(labels)
    in6 = build_input_channels(normalize_hu(vol, labels), groups,
                               _load_tfs(args.tf), vol)
    scene = agp_initialize(in6, groups, PrimingConfig(stride=args.stride))
    save_scene(scene, args.out_scene)
    _note(f"primed {len(scene)} gaussians -> {args.out_scene}")
    return 0


def _cmd_render(args) -> int:
    scene = load_scene(args.scene)
    request = RenderRequest(position=args.position, target=args.target,
                            up=args.up, fov_y=args.fov_y, width=args.width,
                            height=args.height, group_mask=args.group_mask,
                            background=args.background)
    png = render_request_png(scene, request, _render_config(args))
    Path(args.out_png).write_bytes(png)
    _note(f"rendered {args.width}x{args.height} -> {args.out_png}")
    return 0


def _cmd_finetune(args) -> int:
    scene = load_scene(args.scene)
    views = _load_views(args.views)
    loss_cfg = LossConfig(lambda_l1=args.lambda_l1, lambda_ssim=args.lambda_ssim)
    tuned, history = finetune(scene, views, iters=args.iters, loss_cfg=loss_cfg,
                              seed=args.seed, base_lr=args.base_lr,
                              trace_path=args.trace,
                              checkpoint_path=args.checkpoint)
    save_scene(tuned, args.out_scene)
    if history:
        first, last = history[0], history[-1]
        _note(f"loss {first['total']:.6f} -> {last['total']:.6f} "
              f"over {len(history)} iterations")
    _note(f"fine-tuned scene -> {args.out_scene}")
    return 0


def _cmd_metrics(args) -> int:
    scene = load_scene(args.scene)
    views = _load_views(args.views)
    report = evaluate(scene, views, config=_render_config(args),
                      background=args.background, quantize=True)
    report.to_csv(args.out_csv)
    print(report.table())
    _note(f"metrics -> {args.out_csv}")
    return 0


def _cmd_serve(args) -> int:
    scenes = {"default": load_scene(args.scene)}
    for spec in args.variant:
        name, _, path = spec.partition("=")
        if not name or not path:
            raise MalformedRequestError(f"--variant needs NAME=PATH, got {spec!r}")
        scenes[name] = load_scene(path)
    service = SceneService(scenes, port=args.port, host=args.host,
                           config=_render_config(args), static_dir=args.static)
    _note(f"serving {', '.join(scenes)} on {service.url} (ctrl-c stops)")
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        _note("stopped")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="splatct", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress details to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("phantom", help="write the synthetic nested-ellipsoid "
                                       "volume and labels")
    p.add_argument("out_stem", help="output path stem")
    p.add_argument("--dims", nargs=3, type=int, default=(64, 64, 64),
                   metavar=("D", "H", "W"))
    p.add_argument("--spacing", nargs=3, type=float, default=(1.5, 1.5, 1.5),
                   metavar=("X", "Y", "Z"))
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("init", help="prime a scene from volume + labels + "
                                    "transfer functions")
    p.add_argument("volume", help="CT volume (.raw/.meta stem)")
    p.add_argument("labels", help="label volume (.raw/.meta stem, integer payload)")
    p.add_argument("out_scene", help="output scene file")
    p.add_argument("--tf", default="seen",
                   help="preset name (seen/unseen) or a transfer-function file")
    p.add_argument("--iso", type=float, default=1.5,
                   help="isotropic resample spacing in mm, 0 to skip")
    p.add_argument("--stride", type=int, default=1,
                   help="voxel subsampling along each axis")
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("render", help="render a scene to a PNG")
    p.add_argument("scene")
    p.add_argument("out_png")
    p.add_argument("--position", type=_triple, required=True, metavar="X,Y,Z")
    p.add_argument("--target", type=_triple, required=True, metavar="X,Y,Z")
    p.add_argument("--up", type=_triple, default=(0.0, 1.0, 0.0), metavar="X,Y,Z")
    p.add_argument("--fov-y", type=float, default=0.8, help="vertical fov, radians")
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--group-mask", type=int, default=FULL_MASK,
                   help="12-bit anatomy group visibility mask")
    p.add_argument("--background", type=_triple, default=(0.0, 0.0, 0.0),
                   metavar="R,G,B")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("finetune", help="optimize a scene against view images")
    p.add_argument("scene")
    p.add_argument("views", help="views JSON file")
    p.add_argument("out_scene")
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-lr", type=float, default=1e-3)
    p.add_argument("--lambda-l1", type=float, default=0.8)
    p.add_argument("--lambda-ssim", type=float, default=0.2)
    p.add_argument("--trace", default=None, help="per-iteration loss CSV")
    p.add_argument("--checkpoint", default=None,
                   help="scene + optimizer state written every 50 iterations")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("metrics", help="PSNR/SSIM of a scene against view images")
    p.add_argument("scene")
    p.add_argument("views", help="views JSON file")
    p.add_argument("out_csv")
    p.add_argument("--background", type=_triple, default=(0.0, 0.0, 0.0),
                   metavar="R,G,B")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("serve", help="serve renders over HTTP")
    p.add_argument("scene")
    p.add_argument("--port", type=int, default=None,
                   help="default: $SPLATCT_PORT or 8790")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--variant", action="append", default=[], metavar="NAME=PATH",
                   help="additional scene variants selectable via ?tf=NAME")
    p.add_argument("--static", default=None,
                   help="directory of static viewer files to serve")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (MalformedRequestError, OversizedRequestError, InvalidParameterError,
            DegenerateGeometryError) as exc:
        _note(f"splatct {args.command}: {exc}")
        return EXIT_USAGE
    except (VolumeFormatError, UnknownLabelError, SceneFormatError,
            json.JSONDecodeError, OSError) as exc:
        _note(f"splatct {args.command}: {exc}")
        return EXIT_IO
    except (DegenerateVolumeError, EmptySceneError, ArithmeticError,
            np.linalg.LinAlgError) as exc:
        _note(f"splatct {args.command}: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
