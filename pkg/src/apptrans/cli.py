"""Command-line entry point binding the modules into reproducible commands.

Every command prints its resolved configuration before doing work, succeeds
with exit code 0, reports usage errors at 2 (argparse), and any runtime
failure as a single line on stderr with exit code 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import localization, pairing, synthdata, trainer
from .datamodel import load_image, load_manifest, save_image
from .networks import ContentEncoder


def _print_config(title: str, items: dict) -> None:
    print(f"[{title}]")
    for key in sorted(items):
        print(f"{key} = {items[key]}")


def _load_model(checkpoint: str):
    model, ckpt = trainer.restore(checkpoint)
    model.eval()
    return model, ckpt


def cmd_generate_synthetic(args) -> int:
    names = [n.strip() for n in args.domains.split(",") if n.strip()]
    jitter = synthdata.PoseJitter(
        rot_deg=args.rot_jitter, trans_m=args.trans_jitter,
        cluster_size=args.cluster_size, cluster_spacing_m=args.cluster_spacing)
    _print_config("generate-synthetic", {
        "scenes": args.scenes, "domains": ",".join(names), "out": args.out,
        "size": args.size, "seed": args.seed, "rot_jitter": jitter.rot_deg,
        "trans_jitter": jitter.trans_m, "cluster_size": jitter.cluster_size,
        "cluster_spacing": jitter.cluster_spacing_m,
    })
    specs = synthdata.default_appearances(names)
    manifest = synthdata.generate_dataset(
        args.scenes, specs, jitter, args.out,
        size=(args.size, args.size), seed=args.seed)
    print(f"wrote {manifest}")
    return 0


def cmd_mine_pairs(args) -> int:
    _print_config("mine-pairs", {"manifest": args.manifest, "checkpoint": args.checkpoint,
                                 "out": args.out})
    model, _ = _load_model(args.checkpoint)
    dataset = trainer.LoadedDataset.open(args.manifest)
    emb = trainer.compute_embeddings(model, dataset.images)
    assignments = pairing.refresh_source_target(dataset.records, emb)
    with Path(args.out).open("w") as f:
        for a in assignments:
            f.write(json.dumps({
                "source": dataset.records[a.source_idx].image_path,
                "target": dataset.records[a.target_idx].image_path,
                "similarity": a.similarity,
            }) + "\n")
    print(f"wrote {len(assignments)} assignments to {args.out}")
    return 0


def cmd_train(args) -> int:
    mapping = trainer.parse_config_file(args.config) if args.config else {}
    for override in args.set or []:
        if "=" not in override:
            raise trainer.ConfigError(f"--set expects KEY=VALUE, got {override!r}")
        key, _, value = override.partition("=")
        mapping[key.strip()] = value.strip()
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    mapping["out_dir"] = args.out
    config = trainer.TrainConfig.from_mapping(mapping)
    _print_config("train", dict(
        line.split("=", 1) for line in config.to_canonical_text().strip().splitlines()))
    final = trainer.fit(args.manifest, config, resume_from=args.resume,
                        log_every=args.log_every)
    print(f"final checkpoint: {final}")
    return 0


def cmd_translate(args) -> int:
    _print_config("translate", {"checkpoint": args.checkpoint, "source": args.source,
                                "target": args.target, "out": args.out})
    model, _ = _load_model(args.checkpoint)
    source = load_image(args.source, ContentEncoder.stride)
    target = load_image(args.target)
    with torch.no_grad():
        out = model.translate(source, target)
    save_image(args.out, out)
    print(f"wrote {args.out}")
    return 0


def cmd_grid(args) -> int:
    sources = [p.strip() for p in args.sources.split(",") if p.strip()]
    targets = [p.strip() for p in args.targets.split(",") if p.strip()]
    _print_config("grid", {"checkpoint": args.checkpoint, "sources": ";".join(sources),
                           "targets": ";".join(targets), "out": args.out})
    model, _ = _load_model(args.checkpoint)
    src_imgs = [load_image(p, ContentEncoder.stride) for p in sources]
    tgt_imgs = [load_image(p) for p in targets]
    rows = []
    with torch.no_grad():
        for s in src_imgs:
            rows.append(torch.cat([model.translate(s, t) for t in tgt_imgs], dim=2))
    save_image(args.out, torch.cat(rows, dim=1))
    print(f"wrote {args.out} ({len(sources)}x{len(targets)} tiles)")
    return 0


def cmd_localize_eval(args) -> int:
    _print_config("localize-eval", {"checkpoint": args.checkpoint, "queries": args.queries,
                                    "references": args.references, "out": args.out})
    model, _ = _load_model(args.checkpoint)
    ref_records = load_manifest(args.references)
    ref_root = Path(args.references).parent
    ref_with_pose = [r for r in ref_records if r.pose is not None]
    if not ref_with_pose:
        raise trainer.ValidationError("reference manifest has no posed records")
    db = localization.build_reference_db(
        [load_image(ref_root / r.image_path, ContentEncoder.stride) for r in ref_with_pose],
        [r.pose for r in ref_with_pose], model)
    query_records = load_manifest(args.queries)
    query_root = Path(args.queries).parent
    queries = []
    for r in query_records:
        if r.pose is None:
            raise trainer.ValidationError(f"query {r.image_path!r} lacks a ground-truth pose")
        queries.append(localization.Query(
            image=load_image(query_root / r.image_path, ContentEncoder.stride),
            pose=r.pose, group=r.domain.name))
    report = localization.evaluate(queries, db, model)
    print(report.format_table())
    Path(args.out).write_text(report.to_json())
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apptrans",
        description="Multi-domain image translation via appearance-adaptive convolution")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-synthetic", help="render a procedural multi-domain dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--domains", required=True, help="comma-separated names; first is the reference")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rot-jitter", type=float, default=3.0)
    p.add_argument("--trans-jitter", type=float, default=2.0)
    p.add_argument("--cluster-size", type=int, default=4)
    p.add_argument("--cluster-spacing", type=float, default=25.0)
    p.set_defaults(func=cmd_generate_synthetic)

    p = sub.add_parser("mine-pairs", help="dump source-target assignments for inspection")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mine_pairs)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="flat KEY=VALUE config file")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate one source into a target appearance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("grid", help="source-by-target translation matrix image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sources", required=True, help="comma-separated image paths (rows)")
    p.add_argument("--targets", required=True, help="comma-separated image paths (columns)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("localize-eval", help="retrieval localization recall report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True, help="manifest of query images with poses")
    p.add_argument("--references", required=True, help="manifest of posed reference images")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_localize_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "seed", None) is not None:
            torch.manual_seed(args.seed)
        return args.func(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
