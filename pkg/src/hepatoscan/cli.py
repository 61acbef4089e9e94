"""Command-line entry point: segment, batch, phantom, atlas-build, evaluate."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import anatomy, pipeline
from .atlas import AtlasError, LiverShapeType, TemplateAtlas, build_template, generate_reference_atlas
from .io import FormatError, read_atlas, read_mask, read_volume, write_atlas, write_mask, write_volume
from .phantom import KINDS, Lesion, PhantomSpec, generate
from .volume import InvalidArgumentError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SOURCE = 0, 1, 2, 3

log = logging.getLogger("hepatoscan")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for I/O here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _kv(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected KEY=VALUE")
    k, v = text.split("=", 1)
    return k.strip(), v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hepatoscan", description="CT liver segmentation and densitometry")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--atlas", help="atlas directory (default: built-in reference atlas)")
        sp.add_argument("--skeleton", help="skeleton template file (default: built-in)")
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                        help="override one configuration key")
        sp.add_argument("--out", required=True)

    s = sub.add_parser("segment", help="process one study")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--id", help="study id (default: file name without .mvol)")
    common(s)

    b = sub.add_parser("batch", help="process every study of a directory or HTTP source")
    b.add_argument("--source", required=True)
    b.add_argument("--workers", type=int)
    common(b)

    ph = sub.add_parser("phantom", help="write a synthetic study")
    ph.add_argument("--kind", choices=KINDS, required=True)
    ph.add_argument("--seed", type=int, required=True)
    ph.add_argument("--liver-hu", type=float, default=50.0)
    ph.add_argument("--fov-fraction", type=float, default=1.0)
    ph.add_argument("--noise", type=float, default=10.0, help="noise sigma in HU")
    ph.add_argument("--scale", type=float, default=1.0, help="liver scale")
    ph.add_argument("--lesion-hu", type=float)
    ph.add_argument("--lesion-fraction", type=float, default=0.2)
    ph.add_argument("--out", required=True)
    ph.add_argument("--truth", help="directory for the truth mask")

    a = sub.add_parser("atlas-build", help="write a template atlas")
    g = a.add_mutually_exclusive_group(required=True)
    g.add_argument("--generate", action="store_true", help="procedural reference atlas")
    g.add_argument("--masks", help="manifest of 'id mask_file [shape_type]' lines")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="corpus statistics from a manifest and outputs")
    e.add_argument("--manifest", required=True)
    e.add_argument("--outputs", required=True)
    e.add_argument("--out", required=True)
    return p


def _config(args, **flags) -> pipeline.PipelineConfig:
    cfg = pipeline.load_config(args.config) if args.config else pipeline.PipelineConfig()
    pairs = dict(args.set)
    pairs.update({k: str(v) for k, v in flags.items() if v is not None})
    return pipeline.parse_overrides(pairs, cfg)


def _atlas(args) -> TemplateAtlas:
    return read_atlas(args.atlas) if args.atlas else pipeline.default_atlas()


def _skeleton(args) -> anatomy.SkeletonTemplate:
    return anatomy.read_skeleton(args.skeleton) if args.skeleton else anatomy.default_skeleton()


def _study_id(path: str) -> str:
    name = Path(path).name
    return name[: -len(".mvol")] if name.endswith(".mvol") else Path(path).stem


def cmd_segment(args) -> int:
    cfg = _config(args)
    atlas, skel = _atlas(args), _skeleton(args)
    vol = read_volume(args.input)
    sid = args.id or _study_id(args.input)
    out = pipeline.run_study(vol, atlas, skel, cfg, sid)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline.write_outcome(out, out_dir)
    print(f"{sid} {out.status} {out.score:.3f}")
    return EXIT_OK


def cmd_batch(args) -> int:
    cfg = _config(args, workers=args.workers)
    summary = pipeline.run_batch(args.source, cfg, args.out, _atlas(args), _skeleton(args))
    sys.stdout.write(summary.render())
    return EXIT_OK


def cmd_phantom(args) -> int:
    lesion = Lesion(args.lesion_hu, fraction=args.lesion_fraction) if args.lesion_hu is not None else None
    spec = PhantomSpec(
        kind=args.kind,
        liver_hu=args.liver_hu,
        lesion=lesion,
        noise_sigma_hu=args.noise,
        liver_scale=args.scale,
        fov_liver_fraction=args.fov_fraction,
        seed=args.seed,
    )
    vol, truth = generate(spec)
    write_volume(vol, args.out)
    if args.truth:
        d = Path(args.truth)
        d.mkdir(parents=True, exist_ok=True)
        write_mask(truth.liver_mask, d / f"{_study_id(args.out)}.truth.mask.mvol")
        if truth.lesion_mask is not None:
            write_mask(truth.lesion_mask, d / f"{_study_id(args.out)}.lesion.mask.mvol")
    return EXIT_OK


def _atlas_from_masks(manifest: str) -> TemplateAtlas:
    base = Path(manifest).parent
    templates = []
    for lineno, raw in enumerate(Path(manifest).read_text(encoding="ascii").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise FormatError("manifest", f"line {lineno}: expected 'id mask_file [shape_type]'", manifest)
        st = LiverShapeType.parse(parts[2]) if len(parts) == 3 else None
        mpath = Path(parts[1]) if Path(parts[1]).is_absolute() else base / parts[1]
        templates.append(build_template(read_mask(mpath), parts[0], st))
    return TemplateAtlas(templates)


def cmd_atlas_build(args) -> int:
    out = Path(args.out)
    if args.generate:
        atlas = generate_reference_atlas(args.seed)
        write_atlas(atlas, out)
        anatomy.write_skeleton(anatomy.build_skeleton_template(args.seed), out / "skeleton.txt")
    else:
        write_atlas(_atlas_from_masks(args.masks), out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    stats = pipeline.evaluate(args.manifest, args.outputs)
    text = stats.render()
    Path(args.out).write_text(text, encoding="ascii")
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "segment": cmd_segment,
    "batch": cmd_batch,
    "phantom": cmd_phantom,
    "atlas-build": cmd_atlas_build,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"hepatoscan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except pipeline.SourceError as exc:
        print(f"hepatoscan: source error: {exc}", file=sys.stderr)
        return EXIT_SOURCE
    except (pipeline.ConfigError, InvalidArgumentError, _UsageError) as exc:
        print(f"hepatoscan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, AtlasError, anatomy.SkeletonFormatError) as exc:
        print(f"hepatoscan: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
