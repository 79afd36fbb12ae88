"""Command-line entry point for reproducible generation/evaluation runs.

Subcommands: ``generate`` (tree, optionally mesh), ``render`` (fly-through
dataset), ``evaluate`` (metrics report), ``loss`` (structure loss of
disparity/mask pairs), ``validate-mesh``. Every option resolves through the
same precedence chain — built-in default < TOML config file < environment
variable < explicit flag — and commands that write outputs also write the
fully resolved settings next to them (``run_config.toml``), so any run can
be reproduced byte-for-byte from its own output directory.

Environment overrides are spelled ``BRONCHOSIM_<COMMAND>_<KEY>``, e.g.
``BRONCHOSIM_RENDER_THREADS=8``.

Exit codes: 0 success, 1 usage error, 2 validation error (bad parameters,
infeasible geometry, malformed or inconsistent inputs), 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import tomli

from . import airway_model as am
from . import dataset_io as dio
from . import mesh_gen as mg
from . import metrics as mx
from . import renderer as rd
from . import segmentation as sg
from .errors import BronchosimError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3

ENV_PREFIX = "BRONCHOSIM"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; the contract here is 1
    def error(self, message):
        raise UsageError(message)


# option schema per command: key -> (type, default, help). ``None`` defaults
# mean "required after merging all sources".
_SCHEMAS: dict[str, dict[str, tuple]] = {
    "generate": {
        "out": (str, None, "output directory"),
        "seed": (int, 0, "tree sampling seed"),
        "generations": (int, 5, "tree depth (>= 1)"),
        "mesh": (bool, False, "also tessellate and write mesh.stl / mesh.obj"),
        "ring_segments": (int, 16, "vertices per mesh cross-section ring"),
        "rings_per_mm": (float, 0.5, "mesh rings per millimetre of airway"),
    },
    "render": {
        "tree": (str, None, "tree JSON produced by `generate`"),
        "out": (str, None, "dataset output directory"),
        "routes": (int, 4, "number of fly-through paths"),
        "route_depth": (int, 0, "bifurcation choices per route (0 = walk to a leaf)"),
        "step_mm": (float, 2.0, "camera spacing along the centerline"),
        "seed": (int, 0, "base seed; path k uses seed + k"),
        "width": (int, 256, "frame width in pixels"),
        "height": (int, 256, "frame height in pixels"),
        "fov": (float, 120.0, "vertical field of view, degrees"),
        "near_clip": (float, 0.1, "near clip distance, mm"),
        "falloff_mm": (float, 15.0, "headlight falloff distance"),
        "max_frames": (int, 0, "cap on total frames (0 = no cap)"),
        "depth_format": (str, "pfm", "depth file format: pfm or png16"),
        "threads": (int, 1, "render worker threads"),
    },
    "evaluate": {
        "dataset": (str, None, "dataset directory holding manifest.json"),
        "pred": (str, "", "prediction directory (empty: ground truth vs itself)"),
        "out": (str, "", "report directory (default: the dataset directory)"),
        "mask_threshold": (float, sg.DEFAULT_THRESHOLD, "lumen intensity threshold"),
        "mask_mode": (str, "fixed", "lumen thresholding: fixed or otsu"),
        "epsilon": (float, mx.DEFAULT_EPSILON, "regularizer for means and sigma"),
        "min_set_tol": (float, 0.0, "tolerance for the minimum-disparity set"),
        "no_align": (bool, False, "skip median alignment of predictions"),
        "allow_partial": (bool, False, "skip frames with missing members"),
    },
    "loss": {
        "disparity": (str, None, "disparity map (.pfm or 16-bit .png)"),
        "mask": (str, None, "lumen mask PNG (nonzero = lumen)"),
        "epsilon": (float, mx.DEFAULT_EPSILON, "regularizer for the means"),
        "png_scale": (float, dio.DEFAULT_PNG_DEPTH_SCALE, "counts per unit for PNG maps"),
    },
    "validate-mesh": {
        "mesh_path": (str, None, "mesh file (.stl or .obj)"),
    },
}

_REQUIRED_HINTS = {
    "out": "--out",
    "tree": "--tree",
    "dataset": "--dataset",
    "disparity": "--disparity",
    "mask": "--mask",
    "mesh_path": "the mesh path argument",
}


def _coerce(key: str, typ, raw, source: str):
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("1", "true", "yes", "on"):
            return True
        if isinstance(raw, str) and raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{source}: {key} expects a boolean, got {raw!r}")
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise UsageError(
            f"{source}: {key} expects {typ.__name__}, got {raw!r}"
        ) from None


def resolve_config(command: str, flag_values: dict, config_path: str | None) -> dict:
    """Merge defaults, config file, environment, and flags for one command.

    Flags win over ``BRONCHOSIM_*`` variables, which win over the TOML
    section named after the command, which wins over built-in defaults.
    The result contains every key of the command's schema.
    """
    schema = _SCHEMAS[command]
    values = {k: spec[1] for k, spec in schema.items()}

    if config_path:
        try:
            with open(config_path, "rb") as fh:
                doc = tomli.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}") from None
        except tomli.TOMLDecodeError as exc:
            raise UsageError(f"invalid TOML in {config_path}: {exc}") from None
        section = doc.get(command.replace("-", "_"), {})
        for k, v in section.items():
            if k not in schema:
                raise UsageError(f"{config_path}: unknown key {k!r} for {command}")
            values[k] = _coerce(k, schema[k][0], v, config_path)

    env_cmd = command.replace("-", "_").upper()
    for k, spec in schema.items():
        name = f"{ENV_PREFIX}_{env_cmd}_{k.upper()}"
        if name in os.environ:
            values[k] = _coerce(k, spec[0], os.environ[name], name)

    for k, v in flag_values.items():
        if v is not None and k in schema:
            values[k] = v

    missing = [k for k, v in values.items() if v is None]
    if missing:
        hints = ", ".join(_REQUIRED_HINTS.get(k, k) for k in missing)
        raise UsageError(f"{command}: missing required settings: {hints}")
    return values


def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_run_config(path, command: str, values: dict) -> None:
    """Serialize the fully resolved settings as a reusable config file."""
    lines = [f"[{command.replace('-', '_')}]"]
    lines += [f"{k} = {_toml_scalar(v)}" for k, v in values.items()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _emit(payload: dict, as_json: bool, text: str) -> None:
    if as_json:
        print(json.dumps(payload, indent=1, sort_keys=True))
    else:
        print(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: dict, as_json: bool) -> int:
    if cfg["generations"] < 1:
        raise UsageError("--generations must be >= 1")
    os.makedirs(cfg["out"], exist_ok=True)
    params = am.default_params(generations=cfg["generations"], seed=cfg["seed"])
    tree = am.sample_tree(params)
    tree_path = os.path.join(cfg["out"], "tree.json")
    am.save_tree(tree, tree_path)
    payload = {
        "tree": tree_path,
        "segments": len(tree.segments),
        "seed": cfg["seed"],
        "generations": cfg["generations"],
    }
    if cfg["mesh"]:
        tess = mg.TessellationParams(
            ring_segments=cfg["ring_segments"], rings_per_unit_length=cfg["rings_per_mm"]
        )
        mesh = mg.tessellate(tree, tess)
        mg.write_stl(mesh, os.path.join(cfg["out"], "mesh.stl"))
        mg.write_obj(mesh, os.path.join(cfg["out"], "mesh.obj"))
        report = mg.validate_mesh(mesh)
        payload.update(
            mesh="mesh.stl",
            triangles=report.triangle_count,
            mesh_valid=report.passes,
        )
    write_run_config(os.path.join(cfg["out"], "run_config.toml"), "generate", cfg)
    _emit(
        payload,
        as_json,
        f"wrote {tree_path} ({len(tree.segments)} segments, seed {cfg['seed']})"
        + (f"; mesh valid: {payload['mesh_valid']}" if cfg["mesh"] else ""),
    )
    return EXIT_OK


def cmd_render(cfg: dict, as_json: bool) -> int:
    if cfg["depth_format"] not in ("pfm", "png16"):
        raise UsageError("--depth-format must be pfm or png16")
    if cfg["routes"] < 1:
        raise UsageError("--routes must be >= 1")
    if cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    tree = am.load_tree(cfg["tree"])
    mesh = mg.tessellate(tree, mg.TessellationParams())
    accel = rd.build_accelerator(mesh)
    camera = rd.Camera(
        resolution=(cfg["width"], cfg["height"]),
        vertical_fov=cfg["fov"],
        near_clip=cfg["near_clip"],
    )
    camera.validate()
    shading = rd.ShadingParams(falloff_mm=cfg["falloff_mm"])

    paths = []
    total = 0
    for k in range(cfg["routes"]):
        path = rd.generate_flythrough(
            tree, mesh, step_mm=cfg["step_mm"], seed=cfg["seed"] + k, accel=accel,
            max_depth=cfg["route_depth"] or None,
        )
        if cfg["max_frames"] > 0:
            room = cfg["max_frames"] - total
            if room <= 0:
                break
            path.poses = path.poses[:room]
        paths.append(path)
        total += len(path.poses)

    os.makedirs(cfg["out"], exist_ok=True)
    manifest = rd.render_dataset(
        tree, mesh, paths, camera, cfg["out"],
        shading=shading,
        depth_format=cfg["depth_format"],
        threads=cfg["threads"],
        accel=accel,
    )
    write_run_config(os.path.join(cfg["out"], "run_config.toml"), "render", cfg)
    _emit(
        {"out": cfg["out"], "frames": len(manifest.frames), "paths": len(paths)},
        as_json,
        f"rendered {len(manifest.frames)} frames over {len(paths)} paths into {cfg['out']}",
    )
    return EXIT_OK


def cmd_evaluate(cfg: dict, as_json: bool) -> int:
    if cfg["mask_mode"] not in ("fixed", "otsu"):
        raise UsageError("--mask-mode must be fixed or otsu")
    dataset = cfg["dataset"]
    manifest_path = os.path.join(dataset, "manifest.json")
    bundle = dio.load_eval_bundle(
        manifest_path,
        pred_dir=cfg["pred"] or None,
        allow_partial=cfg["allow_partial"],
    )
    # frames without a stored mask get one by thresholding the rendered image
    manifest = dio.DatasetManifest.load(manifest_path)
    image_of = {f"frame {rec.index}": rec.image_path for rec in manifest.frames}
    for fr in bundle.frames:
        if fr.mask is None and fr.frame_id in image_of:
            img = dio.read_png8(os.path.join(dataset, image_of[fr.frame_id]))
            fr.mask = sg.airway_mask(img, cfg["mask_threshold"], cfg["mask_mode"])
    report = mx.evaluate_bundle(
        bundle,
        epsilon=cfg["epsilon"],
        min_set_tol=cfg["min_set_tol"],
        align=not cfg["no_align"],
    )
    out_dir = cfg["out"] or dataset
    os.makedirs(out_dir, exist_ok=True)
    mx.write_report_json(os.path.join(out_dir, "report.json"), report)
    mx.write_report_csv(os.path.join(out_dir, "report.csv"), report)
    write_run_config(os.path.join(out_dir, "run_config.toml"), "evaluate", cfg)
    _emit(report.to_json_dict()["aggregate"], as_json, mx.format_report_table(report))
    return EXIT_OK


def cmd_loss(cfg: dict, as_json: bool) -> int:
    disparity = dio.read_depth(cfg["disparity"], cfg["png_scale"])
    mask = sg.load_external_mask(cfg["mask"], expected_shape=disparity.shape)
    value = mx.airway_structure_loss(disparity, mask, cfg["epsilon"])
    _emit(
        {"loss": value, "disparity": cfg["disparity"], "mask": cfg["mask"]},
        as_json,
        f"airway structure loss: {value:.9g}",
    )
    return EXIT_OK


def cmd_validate_mesh(cfg: dict, as_json: bool) -> int:
    path = cfg["mesh_path"]
    ext = os.path.splitext(path)[1].lower()
    if ext == ".stl":
        mesh = mg.read_stl(path)
    elif ext == ".obj":
        mesh = mg.read_obj(path)
    else:
        raise UsageError(f"unsupported mesh extension {ext!r} (use .stl or .obj)")
    report = mg.validate_mesh(mesh)
    payload = {
        "path": path,
        "passes": report.passes,
        "vertices": report.vertex_count,
        "triangles": report.triangle_count,
        "watertight": report.watertight,
        "winding_consistent": report.winding_consistent,
        "inward_normals": report.inward_normals,
        "euler_characteristic": report.euler_characteristic,
        "self_intersections": report.self_intersections,
        "degenerate_triangles": len(report.degenerate_triangles),
    }
    _emit(payload, as_json, report.summary())
    return EXIT_OK if report.passes else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(
        prog="bronchosim",
        description="Procedural airway synthesis, rendering, and depth evaluation.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for command, schema in _SCHEMAS.items():
        p = sub.add_parser(command, help=f"{command} (see --help)", add_help=True)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        for key, (typ, default, helptext) in schema.items():
            if key == "mesh_path":
                p.add_argument("mesh_path", nargs="?", default=None, help=helptext)
            elif typ is bool:
                p.add_argument(
                    f"--{key.replace('_', '-')}",
                    action="store_const", const=True, default=None,
                    help=helptext,
                )
            else:
                p.add_argument(
                    f"--{key.replace('_', '-')}",
                    type=typ, default=None, metavar=key.upper(),
                    help=f"{helptext} (default: {default})",
                )
    return parser


_HANDLERS = {
    "generate": cmd_generate,
    "render": cmd_render,
    "evaluate": cmd_evaluate,
    "loss": cmd_loss,
    "validate-mesh": cmd_validate_mesh,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("BRONCHOSIM_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        flag_values = {
            k: v for k, v in vars(args).items() if k not in ("command", "config", "json")
        }
        cfg = resolve_config(args.command, flag_values, args.config)
        return _HANDLERS[args.command](cfg, args.json)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BronchosimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
