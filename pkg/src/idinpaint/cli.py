"""Command-line entry point wiring the pipeline stages together.

Exit codes: 0 success, 2 usage or configuration, 3 data, 4 numerical.
Every command takes --config (YAML), --log (line-delimited JSON records)
and, where randomness matters, --seed; outputs land only under the given
--out path.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import emask, manifest as mio, metrics, synthfaces, trainer
from .artifacts import derive_seed, file_hash
from .autoencoder import load_vae, save_vae, train_autoencoder
from .config import load_config
from .control import load_backbone, load_branch, make_denoiser, save_backbone, ControlBranch, ControlGeometry
from .diffusion import make_schedule, sample_inpaint
from .errors import ArgumentError, ConfigurationError, DataError, GeometryError, NumericalError
from .identity import embed, load_encoder, save_encoder, pretrain_encoder


def _print(obj) -> None:
    sys.stdout.write(str(obj) + "\n")


class _JsonLinesHandler(logging.FileHandler):
    """One JSON object per record, for the --log option."""

    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"ts": round(record.created, 3),
                           "level": record.levelname.lower(),
                           "logger": record.name,
                           "message": record.getMessage()}, sort_keys=True)


def cmd_make_faces(args) -> int:
    cfg = load_config(args.config).corpus
    seed = cfg.seed if args.seed is None else args.seed
    path = synthfaces.generate_corpus(
        args.out, n_identities=args.identities or cfg.identities,
        per_identity=args.per_identity or cfg.per_identity,
        size=cfg.image_size, seed=seed)
    _print(path)
    return 0


def cmd_make_masks(args) -> int:
    cfg = load_config(args.config).masks
    pad = cfg.pad_frac if args.pad_frac is None else args.pad_frac
    if args.dry_run:
        rows = mio.read_manifest(args.corpus)
        for row in rows:
            image = mio.load_image(mio.resolve(args.corpus, row["image_path"]))
            lm = emask.FaceLandmarks.load(mio.resolve(args.corpus, row["landmark_path"]))
            emask.boxes_for_image(lm, (image.shape[1], image.shape[2]), pad)
        _print(f"dry run ok: {len(rows)} rows validated, nothing written")
        return 0
    path = emask.build_dataset(args.corpus, args.out, pad_frac=pad)
    _print(path)
    return 0


def cmd_analyze_masks(args) -> int:
    cfg = load_config(args.config).masks
    fill = cfg.fill if args.fill is None else args.fill
    encoder = load_encoder(args.encoder)
    report = emask.analyze_suppression(args.masks, encoder, fill=fill, out_dir=args.out)
    for region in report.ordering():
        s = report.summary[region]
        _print(f"{region}: mean={s['mean']:.4f} std={s['std']:.4f} n={s['count']}")
    _print(f"most suppressed: {report.ordering()[0]}")
    return 0


def cmd_pretrain_vae(args) -> int:
    cfg = load_config(args.config)
    tc = cfg.vae.train_config()
    if args.seed is not None:
        tc = type(tc)(**{**tc.__dict__, "seed": args.seed})
    if args.steps is not None:
        tc = type(tc)(**{**tc.__dict__, "steps": args.steps})
    vae, history = train_autoencoder(args.corpus, tc,
                                     cfg.vae.geometry(cfg.corpus.image_size))
    save_vae(vae, args.out, extra={"history": history})
    last = history[-1] if history else {}
    _print(f"{args.out} recon={last.get('recon', float('nan')):.5f}")
    return 0


def cmd_pretrain_encoder(args) -> int:
    cfg = load_config(args.config)
    tc = cfg.encoder.train_config()
    if args.seed is not None:
        tc = type(tc)(**{**tc.__dict__, "seed": args.seed})
    if args.steps is not None:
        tc = type(tc)(**{**tc.__dict__, "steps": args.steps})
    encoder, stats = pretrain_encoder(args.corpus, tc,
                                      cfg.encoder.geometry(cfg.corpus.image_size))
    save_encoder(encoder, args.out,
                 extra={k: v for k, v in stats.items() if k != "history"})
    _print(f"{args.out} accuracy={stats['accuracy']:.4f} gap={stats['gap']:.4f}")
    return 0


def cmd_pretrain_backbone(args) -> int:
    cfg = load_config(args.config)
    tc = cfg.backbone.train_config()
    if args.seed is not None:
        tc = type(tc)(**{**tc.__dict__, "seed": args.seed})
    if args.steps is not None:
        tc = type(tc)(**{**tc.__dict__, "steps": args.steps})
    vae = load_vae(args.vae)
    backbone, history = trainer.pretrain_backbone(args.masks, vae, tc)
    save_backbone(backbone, args.out,
                  extra={"history": history, "timesteps": tc.timesteps,
                         "beta_start": tc.beta_start, "beta_end": tc.beta_end})
    _print(f"{args.out} loss={history[-1]['loss']:.5f}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tc = cfg.train.train_config()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    if overrides:
        tc = trainer.TrainConfig(**{**tc.__dict__, **overrides})
    vae = load_vae(args.vae)
    encoder = load_encoder(args.encoder)
    backbone = load_backbone(args.backbone)
    if args.dry_run:
        data = trainer.load_train_data(args.masks, encoder, tc.mask_regions)
        trainer.build_batch(data, tc, step=1)
        _print(f"dry run ok: {len(data.images)} samples, nothing written")
        return 0
    summary = trainer.train(args.masks, vae, encoder, backbone, args.out,
                            config=tc, resume=args.resume)
    if not summary["frozen_unchanged"]:
        raise NumericalError("frozen component weights changed during training")
    _print(summary["checkpoint"])
    return 0


def _load_models(args):
    vae = load_vae(args.vae)
    encoder = load_encoder(args.encoder)
    backbone = load_backbone(args.backbone)
    if args.branch is not None:
        branch = load_branch(args.branch)
    else:
        branch = ControlBranch(ControlGeometry(
            embedding_dim=encoder.geometry.embedding_dim,
            latent_size=backbone.geometry.latent_size,
            base_channels=backbone.geometry.base_channels,
            time_dim=backbone.geometry.time_dim))
        _print("note: no --branch given, using a zero-initialized branch (baseline)")
    return vae, encoder, backbone, branch


def _schedule_for(args, backbone_path):
    from .artifacts import load_checkpoint

    cfg = load_config(args.config).train
    blob = load_checkpoint(backbone_path, "backbone")
    extra = blob.get("extra", {})
    steps = extra.get("timesteps", cfg.timesteps)
    return make_schedule(steps, extra.get("beta_start", cfg.beta_start),
                         extra.get("beta_end", cfg.beta_end))


def _identity_embedding(args, encoder, image_size: int) -> torch.Tensor:
    if (args.ref_image is None) == (args.embedding is None):
        raise ArgumentError("give exactly one identity source: --ref-image or --embedding")
    if args.ref_image is not None:
        ref = mio.load_image(args.ref_image, image_size)
        with torch.no_grad():
            return embed(ref, encoder)
    raw = json.loads(Path(args.embedding).read_text()) if str(args.embedding).endswith(".json") \
        else torch.load(args.embedding, map_location="cpu", weights_only=False)
    e = torch.as_tensor(raw, dtype=torch.float32).flatten()
    n = float(e.norm())
    if n < 1e-8:
        raise DataError(f"embedding in {args.embedding} has zero norm")
    return e / n


def cmd_inpaint(args) -> int:
    vae, encoder, backbone, branch = _load_models(args)
    sched = _schedule_for(args, args.backbone)
    denoiser = make_denoiser(backbone, branch)
    seed = 0 if args.seed is None else args.seed

    if args.grid is not None:
        if args.manifest is None:
            raise ArgumentError("--grid needs --manifest")
        grid_img, sims, names = metrics.identity_grid(
            args.manifest, vae, encoder, backbone, branch, sched,
            region=args.region, n=args.grid, seed=seed)
        out = Path(args.out)
        mio.save_image(grid_img, out)
        diag = float(np.mean(np.diag(sims)))
        off = float((sims.sum() - np.trace(sims)) / (sims.size - len(sims)))
        sidecar = {"identities": names, "similarity": sims.tolist(),
                   "diag_mean": diag, "offdiag_mean": off, "seed": seed,
                   "region": args.region}
        out.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
        _print(f"{out} diag={diag:.4f} offdiag={off:.4f}")
        return 0

    if args.manifest is not None:
        rows = mio.read_manifest(args.manifest)
        if args.limit is not None:
            rows = rows[:args.limit]
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        key = f"{args.region}_mask"
        records = []
        with torch.no_grad():
            for row in rows:
                image = mio.load_image(mio.resolve(args.manifest, row["image_path"]),
                                       vae.geometry.image_size)
                mask = mio.load_mask(mio.resolve(args.manifest, row[key]))
                e_cond = embed(image, encoder)
                out = sample_inpaint(denoiser, image, mask, e_cond, vae, sched,
                                     seed=derive_seed("inpaint", seed, row["image_path"]))
                stem = Path(row["image_path"]).name
                mio.save_image(out, out_dir / stem)
                sim = float((embed(out, encoder) * e_cond).sum())
                records.append({"image": stem, "identity_similarity": sim})
        (out_dir / "inpaint_records.json").write_text(
            json.dumps({"region": args.region, "seed": seed, "records": records},
                       indent=1, sort_keys=True))
        _print(out_dir)
        return 0

    if args.image is None or args.mask is None:
        raise ArgumentError("single-image mode needs --image and --mask")
    image = mio.load_image(args.image, vae.geometry.image_size)
    mask = mio.load_mask(args.mask)
    e_cond = _identity_embedding(args, encoder, vae.geometry.image_size)
    with torch.no_grad():
        out = sample_inpaint(denoiser, image, mask, e_cond, vae, sched, seed=seed)
        sim = float((embed(out, encoder) * e_cond).sum())
    out_path = Path(args.out)
    mio.save_image(out, out_path)
    sidecar = {"image": str(args.image), "mask": str(args.mask), "seed": seed,
               "identity_similarity": sim,
               "model_hashes": {"vae": file_hash(args.vae),
                                "encoder": file_hash(args.encoder),
                                "backbone": file_hash(args.backbone),
                                "branch": file_hash(args.branch) if args.branch else None}}
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    _print(f"{out_path} similarity={sim:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config).eval
    encoder = load_encoder(args.encoder)
    report = metrics.evaluate(args.gen, args.manifest, encoder,
                              region=args.region or cfg.region,
                              kid_subset_size=cfg.kid_subset_size,
                              kid_subsets=cfg.kid_subsets, out_path=args.out)
    _print(f"id={report['identity_similarity']['mean']:.4f} fid={report['fid']:.4f} "
           f"kid={report['kid']:.6f} scored={report['counts']['scored']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idinpaint",
                                description="identity-conditioned face inpainting pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, steps=False):
        sp.add_argument("--config", default=None, help="YAML config file")
        sp.add_argument("--log", default=None,
                        help="append line-delimited JSON log records to this path")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        if steps:
            sp.add_argument("--steps", type=int, default=None)

    sp = sub.add_parser("make-faces", help="generate the synthetic face corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--identities", type=int, default=None)
    sp.add_argument("--per-identity", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_make_faces)

    sp = sub.add_parser("make-masks", help="build region masks from landmarks")
    sp.add_argument("--corpus", required=True, help="corpus manifest (JSONL)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--pad-frac", type=float, default=None)
    sp.add_argument("--dry-run", action="store_true")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_make_masks)

    sp = sub.add_parser("analyze-masks", help="region suppression analysis")
    sp.add_argument("--masks", required=True, help="mask manifest (JSONL)")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fill", type=float, default=None)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_analyze_masks)

    sp = sub.add_parser("pretrain-vae", help="train the autoencoder")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    common(sp, steps=True)
    sp.set_defaults(func=cmd_pretrain_vae)

    sp = sub.add_parser("pretrain-encoder", help="train the recognition encoder")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    common(sp, steps=True)
    sp.set_defaults(func=cmd_pretrain_encoder)

    sp = sub.add_parser("pretrain-backbone", help="train the unconditional denoiser")
    sp.add_argument("--masks", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--out", required=True)
    common(sp, steps=True)
    sp.set_defaults(func=cmd_pretrain_backbone)

    sp = sub.add_parser("train", help="train the control branch")
    sp.add_argument("--masks", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--backbone", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--dry-run", action="store_true")
    common(sp, steps=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("inpaint", help="inpaint masked regions")
    sp.add_argument("--vae", required=True)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--backbone", required=True)
    sp.add_argument("--branch", default=None)
    sp.add_argument("--image", default=None)
    sp.add_argument("--mask", default=None)
    sp.add_argument("--ref-image", default=None)
    sp.add_argument("--embedding", default=None)
    sp.add_argument("--manifest", default=None, help="batch mode: mask manifest")
    sp.add_argument("--region", default="eyes", choices=("eyes", "nose", "mouth"))
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--grid", type=int, default=None, help="cross-identity grid size")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_inpaint)

    sp = sub.add_parser("evaluate", help="score generated images")
    sp.add_argument("--gen", required=True, help="directory of generated images")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--region", default=None)
    sp.add_argument("--out", default=None)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0

    handler = None
    clilog = logging.getLogger("idinpaint.cli")
    if getattr(args, "log", None):
        handler = _JsonLinesHandler(args.log)
        pkg_logger = logging.getLogger("idinpaint")
        pkg_logger.addHandler(handler)
        if pkg_logger.getEffectiveLevel() > logging.INFO:
            pkg_logger.setLevel(logging.INFO)
        clilog.info("command %s started", args.command)

    code = 1
    try:
        code = args.func(args)
    except (ArgumentError, ConfigurationError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        code = 2
    except (DataError, GeometryError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        code = 3
    except NumericalError as exc:
        sys.stderr.write(f"error: {exc}\n")
        code = 4
    finally:
        if handler is not None:
            clilog.info("command %s exited with code %d", args.command, code)
            logging.getLogger("idinpaint").removeHandler(handler)
            handler.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
