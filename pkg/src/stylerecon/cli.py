"""Command line interface: ``stylerecon {make-data,train,eval,render,translate}``.

Options come from built-in defaults, then an optional YAML ``--config`` file
(sections ``data``, ``train``, ``perturb``), then explicit flags. Output paths
default to subdirectories of ``$STYLERECON_OUTPUT`` (``runs`` if unset).

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch
import yaml

from . import data, evaluation, geometry, networks, renderer, training
from .losses import LossWeights

log = logging.getLogger("stylerecon")

BRIGHTNESS_SWEEP = (0.0, 1.0, 2.0, 3.0, 4.0)


class UsageError(Exception):
    pass


def code_hash() -> str:
    """SHA-256 over the package sources, in a fixed file order."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict) or set(cfg) - {"data", "train", "perturb"}:
        raise UsageError("config must be a mapping with sections among data / train / perturb")
    return cfg


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _output_dir(arg, name) -> Path:
    return Path(arg) if arg is not None else data.environment_output_root() / name


# -- make-data ------------------------------------------------------------------------------


def resolve_toy_spec(args) -> data.ToySpec:
    section = dict(load_config(args.config).get("data", {}))
    section.update(_overrides(args, ("num_objects", "image_size", "background", "background_dir",
                                     "object_color", "test_fraction", "seed")))
    if args.shapes is not None:
        section["shapes"] = args.shapes
    if args.per_view_backgrounds:
        section["per_view_backgrounds"] = True
    if "shapes" in section:
        section["shapes"] = tuple(section["shapes"])
    try:
        return data.ToySpec(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_make_data(args) -> int:
    spec = resolve_toy_spec(args)
    out = _output_dir(args.out, "data")
    records = data.make_toy_dataset(spec)
    train_ids, test_ids = data.split_records(records, spec.test_fraction, spec.seed)
    data.save_dataset(records, out, train_ids, test_ids, extra=data.toy_spec_dict(spec))
    print(f"wrote {len(records)} objects ({len(train_ids)} train / {len(test_ids)} test) to {out}")
    return 0


# -- train ----------------------------------------------------------------------------------


def resolve_training(args) -> tuple[training.TrainConfig, data.PerturbSpec, int, dict]:
    """Resolved config, perturbation, DA iterations per cycle and the full record."""
    cfg = load_config(args.config)
    train_section = dict(cfg.get("train", {}))
    weights = dict(train_section.pop("loss_weights", {}) or {})
    weights.update(_overrides(args, ("style_w", "content_w")))
    train_section.update(_overrides(args, ("cycles", "da_iters_per_cycle", "recon_iters_per_cycle",
                                           "batch_size", "learning_rate", "seed")))
    perturb_section = dict(cfg.get("perturb", {}))
    perturb_section.update({k: v for k, v in (("azimuth_sigma", args.azimuth_sigma),
                                              ("brightness_sigma", args.brightness_sigma),
                                              ("seed", args.perturb_seed)) if v is not None})
    try:
        config = training.TrainConfig.from_dict({**train_section, "loss_weights": LossWeights(**weights)})
        perturb = data.PerturbSpec(**perturb_section)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    da_iters = config.da_iters_per_cycle
    if perturb.brightness_sigma > 0 and "da_iters_per_cycle" not in train_section:
        da_iters = training.BRIGHTNESS_DA_ITERS
    record = {"train": config.to_dict(), "perturb": asdict(perturb), "da_iters_effective": da_iters}
    return config, perturb, da_iters, record


def cmd_train(args) -> int:
    config, perturb, da_iters, record = resolve_training(args)
    data_dir = Path(args.data)
    if not (data_dir / "manifest.json").exists():
        raise UsageError(f"{data_dir} is not a dataset directory (no manifest.json)")
    out = _output_dir(args.out, "train")
    out.mkdir(parents=True, exist_ok=True)
    record.update({"data": str(data_dir.resolve()), "code_hash": code_hash(),
                   "seeds": {"train": config.seed, "perturb": perturb.seed},
                   "resume": str(args.resume) if args.resume else None})
    (out / "config.json").write_text(json.dumps(record, indent=1, sort_keys=True))
    records = data.load_dataset(data_dir, "train", with_silhouettes=False)
    train_set = data.build_training_set(records, perturb)
    state = training.run_training(config, train_set, out, resume=args.resume, da_iters=da_iters,
                                  on_cycle_end=lambda s: log.info("finished cycle %d", s.cycle_index))
    print(f"trained {state.cycle_index} cycles; checkpoints in {out}")
    return 0


# -- eval -----------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    records = data.load_dataset(args.data, args.split)
    if not records:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    if args.ground_truth:
        items = data.build_eval_items(records)
        report = evaluation.evaluate_meshes(items, [it.mesh.vertices for it in items],
                                            None, meshes=[it.mesh for it in items])
        out = _output_dir(args.out, "eval")
        report.write(out, "eval_ground_truth")
        (out / "summary.json").write_text(json.dumps({"ground_truth": report.summary()}, indent=1,
                                                     sort_keys=True))
        print(f"ground truth vs itself: mean IoU {report.mean_iou:.4f}")
        return 0
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint (or --ground-truth)")
    models = [training.load_reconstruction(p) for p in args.checkpoint]
    out = Path(args.out) if args.out else Path(args.checkpoint[0]).parent / "eval"
    sigmas = BRIGHTNESS_SWEEP if args.brightness_sweep else (args.brightness_sigma,)
    results = {}
    for sigma in sigmas:
        items = data.build_eval_items(records, data.PerturbSpec(brightness_sigma=sigma, seed=args.perturb_seed))
        reports = [evaluation.evaluate_model(m, items) for m in models]
        for k, rep in enumerate(reports):
            rep.write(out, f"eval_sigma{sigma:g}_run{k}")
        results[f"{sigma:g}"] = evaluation.average_reports(reports)
        print(f"brightness sigma {sigma:g}: mean IoU {results[f'{sigma:g}']['average']['mean_iou']:.4f}")
    if args.baseline:
        items = data.build_eval_items(records)
        base = evaluation.template_baseline(items, geometry.make_sphere_template())
        results["sphere_baseline"] = base.summary()
        print(f"sphere baseline: mean IoU {base.mean_iou:.4f}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    if args.plot and args.brightness_sweep:
        _plot_sweep(results, out / "brightness_sweep.png")
    return 0


def _plot_sweep(results, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sig = [float(s) for s in BRIGHTNESS_SWEEP]
    iou = [results[f"{s:g}"]["average"]["mean_iou"] for s in BRIGHTNESS_SWEEP]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(sig, iou, marker="o")
    ax.set_xlabel("brightness sigma")
    ax.set_ylabel("mean 3D IoU")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# -- render / translate ---------------------------------------------------------------------


def _selected(records, object_ids):
    if not object_ids:
        return records
    try:
        return data.select_records(records, object_ids)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc


def cmd_render(args) -> int:
    out = _output_dir(args.out, "render")
    out.mkdir(parents=True, exist_ok=True)
    azimuths = args.azimuth if args.azimuth else list(data.view_azimuths())
    views = renderer.views_for(azimuths, image_size=args.image_size)
    if args.mesh is not None:
        meshes = [(Path(args.mesh).stem, geometry.load_obj(args.mesh))]
    else:
        if args.checkpoint is None or args.data is None:
            raise UsageError("render needs --mesh, or --checkpoint together with --data")
        model = training.load_reconstruction(args.checkpoint)
        records = _selected(data.load_dataset(args.data, args.split, with_silhouettes=False), args.object)
        items = [it for it in data.build_eval_items(records, views=[args.input_view])]
        verts = evaluation.predict_vertices(model, items)
        meshes = [(it.object_id, geometry.Mesh(v, model.template.faces)) for it, v in zip(items, verts)]
    for name, mesh in meshes:
        cams = renderer.CameraBatch.from_views(views)
        batch = torch.as_tensor(mesh.vertices)[None].expand(len(views), -1, -1)
        with torch.no_grad():
            imgs = renderer.render_batch(batch, mesh.faces, cams)
        for k, img in enumerate(imgs):
            renderer.save_png(img.numpy(), out / f"{name}_az{azimuths[k]:05.1f}.png")
        if args.mesh is None:
            geometry.save_obj(mesh, out / f"{name}.obj")
    print(f"wrote renderings of {len(meshes)} meshes to {out}")
    return 0


def cmd_translate(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    if ckpt["i2r"] is None:
        raise UsageError(f"{args.checkpoint} holds no translator weights")
    i2r, r2i = networks.Translator(), networks.Translator()
    i2r.load_state_dict(ckpt["i2r"])
    r2i.load_state_dict(ckpt["r2i"])
    i2r.eval()
    r2i.eval()
    out = _output_dir(args.out, "translate")
    out.mkdir(parents=True, exist_ok=True)
    records = _selected(data.load_dataset(args.data, args.split, with_silhouettes=False), args.object)
    items = data.build_eval_items(records, views=args.view or None)
    with torch.no_grad():
        for it in items:
            x = it.image[None]
            pseudo = i2r(x)
            back = r2i(pseudo)
            panel = torch.cat([x[0], pseudo[0], back[0]], dim=-1)      # input | pseudo-rendering | round trip
            renderer.save_png(panel.numpy(), out / f"{it.object_id}_view{it.view:02d}.png")
    print(f"wrote {len(items)} translation panels to {out}")
    return 0


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stylerecon", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("make-data", help="synthesize a toy multi-view dataset")
    m.add_argument("--out")
    m.add_argument("--config")
    m.add_argument("--num-objects", type=int)
    m.add_argument("--shapes", nargs="+", choices=data.SHAPES)
    m.add_argument("--image-size", type=int)
    m.add_argument("--background", choices=data.BACKGROUND_MODES)
    m.add_argument("--background-dir")
    m.add_argument("--per-view-backgrounds", action="store_true")
    m.add_argument("--object-color", choices=("grey", "random"))
    m.add_argument("--test-fraction", type=float)
    m.add_argument("--seed", type=int)
    m.set_defaults(func=cmd_make_data)

    t = sub.add_parser("train", help="interleaved domain adaptation / reconstruction training")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--config")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--cycles", type=int)
    t.add_argument("--da-iters", dest="da_iters_per_cycle", type=int)
    t.add_argument("--recon-iters", dest="recon_iters_per_cycle", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--style-w", type=float)
    t.add_argument("--content-w", type=float)
    t.add_argument("--azimuth-sigma", type=float)
    t.add_argument("--brightness-sigma", type=float)
    t.add_argument("--perturb-seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="3D IoU of checkpoints on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", nargs="+", help="one per seed; results are averaged")
    e.add_argument("--ground-truth", action="store_true",
                   help="score the ground-truth meshes against themselves (pipeline sanity check)")
    e.add_argument("--out")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--brightness-sigma", type=float, default=0.0)
    e.add_argument("--brightness-sweep", action="store_true", help="evaluate at sigma 0..4")
    e.add_argument("--perturb-seed", type=int, default=0)
    e.add_argument("--baseline", action="store_true", help="also score the undeformed sphere")
    e.add_argument("--plot", action="store_true", help="plot the brightness sweep (needs matplotlib)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a mesh or a checkpoint's reconstructions")
    r.add_argument("--mesh")
    r.add_argument("--checkpoint")
    r.add_argument("--data")
    r.add_argument("--split", default="test", choices=("train", "test"))
    r.add_argument("--object", nargs="+")
    r.add_argument("--input-view", type=int, default=0)
    r.add_argument("--azimuth", type=float, nargs="+")
    r.add_argument("--image-size", type=int, default=64)
    r.add_argument("--out")
    r.set_defaults(func=cmd_render)

    x = sub.add_parser("translate", help="dump translator panels for a checkpoint")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="test", choices=("train", "test"))
    x.add_argument("--object", nargs="+")
    x.add_argument("--view", type=int, nargs="+")
    x.add_argument("--out")
    x.set_defaults(func=cmd_translate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stylerecon: error: {exc}", file=sys.stderr)
        return 2
    except (training.CheckpointError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"stylerecon: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
