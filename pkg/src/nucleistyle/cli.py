"""Command-line entry point: ``nucleistyle {synth,cluster,train-gan,augment,evaluate,report}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config

logger = logging.getLogger("nucleistyle")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3


class UserError(Exception):
    pass


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise UserError(f"{what} {p} does not exist")
    return p


def _domain_labels(cfg):
    """Cluster labels if clustering ran, otherwise the corpus's own domains.csv."""
    from .data import read_domains_csv

    clusters = Path(cfg.paths.output_root) / "clusters.csv"
    if clusters.exists():
        return read_domains_csv(clusters), clusters
    domains = Path(cfg.paths.data_root) / "domains.csv"
    if domains.exists():
        return read_domains_csv(domains), domains
    return None, None


def _parallel_features(extractor, images, jobs):
    if jobs <= 1:
        return extractor.transform(images)
    from joblib import Parallel, delayed

    return np.stack(Parallel(n_jobs=jobs)(delayed(extractor.features)(im) for im in images))


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, args):
    from .data import SynthCorpusConfig, generate_synth_corpus, write_corpus

    s = cfg.synth
    synth = SynthCorpusConfig(num_domains=s.num_domains, images_per_domain=s.images_per_domain,
                              image_size=s.image_size, nuclei_count_range=s.nuclei_count_range,
                              nuclei_radius_range=s.nuclei_radius_range, styles=s.styles, seed=s.seed)
    samples = generate_synth_corpus(synth)
    write_corpus(cfg.paths.data_root, samples)
    if synth.placement_records:
        print(f"{len(synth.placement_records)} image(s) received fewer nuclei than requested")
    print(f"wrote {len(samples)} samples ({s.num_domains} domains) to {cfg.paths.data_root}")
    return EXIT_OK


def cmd_cluster(cfg, args):
    from .clustering import DomainClusterer, HsvHistogram, PcaEmbedding, cluster_purity, dark_clusters
    from .data import load_corpus, read_domains_csv
    from .report import pca_scatter, save_grid

    root = _require_dir(cfg.paths.data_root, "data root")
    samples = load_corpus(root, with_masks=False)
    if not samples:
        raise UserError(f"no images found under {root}")
    c = cfg.clustering
    images = [s.image for s in samples]
    extractor = HsvHistogram(bins=c.bins, clahe_v=True, clip_limit=c.clip_limit,
                             tile_grid=tuple(c.tile_grid))
    feats = _parallel_features(extractor, images, args.jobs)
    try:
        model = DomainClusterer(n_clusters=c.k, n_init=c.n_init, random_state=c.seed).fit(feats)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    labels = model.labels_
    pca = PcaEmbedding(2).fit(feats) if len(feats) >= 3 and np.ptp(feats, axis=0).any() else None
    coords = pca.transform(feats) if pca is not None else np.zeros((len(feats), 2))

    out = Path(cfg.paths.output_root)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "clusters.csv", ["sample_id", "domain", "pc1", "pc2"],
               [[s.id, int(l), f"{x:.6f}", f"{y:.6f}"] for s, l, (x, y) in zip(samples, labels, coords)])
    ids, counts = np.unique(labels, return_counts=True)
    _write_csv(out / "cluster_counts.csv", ["domain", "count"], [[int(i), int(n)] for i, n in zip(ids, counts)])
    pca_scatter(out / "pca.png", coords, labels)
    rows = []
    for i in ids:
        members = [images[j] for j in np.flatnonzero(labels == i)[: c.exemplars]]
        members += [np.ones_like(images[0])] * (c.exemplars - len(members))
        rows.append(members)
    if len({im.shape for im in images}) == 1:
        save_grid(out / "cluster_grid.png", rows)

    summary = {
        "k": c.k,
        "inertia": model.inertia_,
        "counts": {int(i): int(n) for i, n in zip(ids, counts)},
        "largest_fraction": float(counts.max() / counts.sum()),
        "dark_clusters": dark_clusters(images, labels, c.dark_threshold),
    }
    planted = root / "domains.csv"
    if planted.exists():
        truth = read_domains_csv(planted)
        if all(s.id in truth for s in samples):
            summary["purity"] = cluster_purity(labels, [truth[s.id] for s in samples])
    (out / "cluster_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"clustered {len(samples)} images into {c.k} domains: "
          + ", ".join(f"{int(i)}:{int(n)}" for i, n in zip(ids, counts)))
    print(f"largest cluster fraction: {summary['largest_fraction']:.3f}")
    if "purity" in summary:
        print(f"purity vs planted labels: {summary['purity']:.3f}")
    return EXIT_OK


def _gan_estimator(cfg):
    from .gan import StyleTransferGAN

    n, w = cfg.gan.net, cfg.gan.weights
    return StyleTransferGAN(
        image_size=n.image_size, content_channels=n.content_channels, attr_dim=n.attr_dim,
        width=n.width, dis_width=n.dis_width, n_res=n.n_res, lr=n.lr, beta1=n.beta1, beta2=n.beta2,
        batch_size=n.batch_size, n_iter=n.n_iter, w_cc=w.w_cc, w_c=w.w_c, w_d=w.w_d,
        w_recon=w.w_recon, w_latent=w.w_latent, w_kl=w.w_kl, seed=n.seed,
        checkpoint_dir=str(cfg.paths.checkpoint), checkpoint_every=cfg.gan.checkpoint_every,
        log_every=cfg.gan.log_every)


def _latest_checkpoint(path):
    p = Path(path)
    if p.is_file():
        return p
    found = sorted(p.glob("gan_step*.pt")) if p.is_dir() else []
    return found[-1] if found else None


def _labelled_images(cfg, samples):
    labels, source = _domain_labels(cfg)
    if labels is None:
        raise UserError("no clusters.csv or domains.csv found; run `cluster` first")
    missing = [s.id for s in samples if s.id not in labels]
    if missing:
        raise UserError(f"{source} lacks labels for {len(missing)} sample(s), e.g. {missing[0]}")
    return np.array([labels[s.id] for s in samples]), source


def _limit_threads(jobs):
    import torch

    torch.set_num_threads(max(1, jobs))


def cmd_train_gan(cfg, args):
    from .clustering import enhance_image
    from .data import load_corpus
    from .gan import NonFiniteLossError

    _limit_threads(args.jobs)
    root = _require_dir(cfg.paths.data_root, "data root")
    samples = load_corpus(root, with_masks=False)
    y, source = _labelled_images(cfg, samples)
    if len(np.unique(y)) < 2:
        raise UserError(f"training needs at least two domains; {source} has {len(np.unique(y))}")
    images = [s.image for s in samples]
    if cfg.clustering.clahe_policy == "features_and_dark_clusters":
        summary = Path(cfg.paths.output_root) / "cluster_summary.json"
        dark = json.loads(summary.read_text())["dark_clusters"] if summary.exists() else []
        images = [enhance_image(im, cfg.clustering.clip_limit, tuple(cfg.clustering.tile_grid))
                  if lab in dark else im for im, lab in zip(images, y)]
    ckpt_dir = Path(cfg.paths.checkpoint)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    gan = _gan_estimator(cfg)
    gan.num_domains = max(int(y.max()) + 1, cfg.clustering.k if source.name == "clusters.csv" else 0)
    resume = None
    if args.resume:
        resume = _latest_checkpoint(ckpt_dir)
        if resume is None:
            raise UserError(f"--resume given but no checkpoint in {ckpt_dir}")
    try:
        gan.fit(images, y, resume_from=resume, max_steps=args.max_steps)
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    last = gan.log_[-1] if gan.log_ else {}
    print(f"trained to step {gan.step_}; checkpoint in {ckpt_dir}")
    for name, value in last.items():
        if name != "step":
            print(f"  {name:10s} {value:.5f}")
    return EXIT_OK


def _load_gan(cfg):
    from .gan import StyleTransferGAN

    path = _latest_checkpoint(cfg.paths.checkpoint)
    if path is None:
        raise UserError(f"no checkpoint found at {cfg.paths.checkpoint}")
    try:
        return StyleTransferGAN.load(path), path
    except Exception as exc:
        raise UserError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_augment(cfg, args):
    from .augment import AugmentPolicy, apply_policy, co_crop
    from .data import LabeledSample, load_corpus, write_sample
    from .report import save_grid

    _limit_threads(args.jobs)
    root = _require_dir(cfg.paths.data_root, "data root")
    gan, ckpt = _load_gan(cfg)
    samples = load_corpus(root, with_masks=True)
    if not samples:
        raise UserError(f"no images found under {root}")
    labels, _ = _domain_labels(cfg)
    if labels is not None:
        samples = [LabeledSample(s.image, s.masks, labels.get(s.id), s.id) for s in samples]
    a = cfg.augment
    try:
        policy = AugmentPolicy(a.style_prob, tuple(a.standard_ops), a.seed, a.exclude_self_domain)
    except ValueError as exc:
        raise UserError(str(exc)) from exc

    out = Path(cfg.paths.output_root) / "augmented"
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for k in range(a.copies):
        rng = np.random.default_rng([a.seed, k])
        augmented, records = apply_policy(gan, samples, policy, rng)
        for aug, rec in zip(augmented, records):
            if not rec.styled:
                continue
            new_id = f"{rec.source_id}__aug{k}"
            write_sample(out, LabeledSample(aug.image, aug.masks, aug.domain, new_id))
            manifest.append([new_id, rec.source_id, rec.domain_drawn, rec.seed])
    _write_csv(Path(cfg.paths.output_root) / "manifest.csv",
               ["sample_id", "source_id", "domain_drawn", "seed"], manifest)

    grid = style_grid(gan, samples, a.grid_rows, seed=a.seed, crop=co_crop)
    save_grid(Path(cfg.paths.output_root) / "style_grid.png", grid)
    print(f"wrote {len(manifest)} style-augmented samples to {out} (checkpoint {ckpt.name})")
    return EXIT_OK


def style_grid(gan, samples, max_rows=0, seed=0, crop=None):
    """Rows: one source per domain. Columns: original, then each target domain.

    Column ``d + 1`` of a row whose source is in domain ``d`` is its self-reconstruction.
    """
    size = gan.config_.image_size
    k = gan.num_domains_
    sources = {}
    for s in samples:
        d = s.domain if s.domain is not None else 0
        sources.setdefault(d, s)
    rows_src = [sources[d] for d in sorted(sources)]
    if max_rows:
        rows_src = rows_src[:max_rows]
    rng = np.random.default_rng(seed)
    z_fixed = rng.standard_normal((k, gan.config_.attr_dim))
    rows = []
    for s in rows_src:
        s = crop(s, size) if crop else s
        x = s.image[None]
        d_src = s.domain if s.domain is not None else 0
        content = gan.encode_content(x)
        row = [s.image]
        for d in range(k):
            if d == d_src:
                z = gan.encode_attribute(x, [d], eps=np.zeros((1, gan.config_.attr_dim))).mu
            else:
                z = z_fixed[d:d + 1]
            row.append(np.clip(gan.generate(content, z, [d])[0], 0, 1))
        rows.append(row)
    return rows


def cmd_evaluate(cfg, args):
    from .data import load_corpus, write_submission
    from .metrics import score_corpus
    from .predictors import make_predictor
    from .tta import PredictorContractError, TtaConfig, tta_predict

    root = _require_dir(cfg.paths.data_root, "data root")
    samples = load_corpus(root, with_masks=True)
    if not samples:
        raise UserError(f"no images found under {root}")
    spec = args.predictor or cfg.evaluate.predictor
    e = cfg.evaluate
    try:
        kwargs = {"threshold": e.blob_threshold, "sigma": e.blob_sigma, "min_size": e.blob_min_size} \
            if spec == "blob" else {}
        predictor = make_predictor(spec, samples=samples if spec == "oracle" else None, **kwargs)
    except Exception as exc:
        raise UserError(f"cannot load predictor {spec!r}: {exc}") from exc
    tta = None
    if args.tta:
        t = cfg.tta
        tta = TtaConfig(tuple(t.rot90), tuple(t.flips), tuple(t.scales), t.jitter_draws,
                        t.merge_iou_threshold, t.vote_fraction, t.seed)
    out = Path(cfg.paths.output_root)
    out.mkdir(parents=True, exist_ok=True)
    suffix = "_tta" if tta else ""

    def predict(image):
        if tta is not None:
            return tta_predict(predictor, image, tta)
        res = predictor(image)
        return res[0] if isinstance(res, tuple) else res

    if not args.submission_only:
        missing = [s.id for s in samples if s.masks is None or len(s.masks) == 0]
        if missing:
            raise UserError(f"{len(missing)} sample(s) lack ground truth, e.g. {missing[0]}; "
                            "use --submission-only for export")
        try:
            rows, mean = score_corpus(predictor, samples, tta=tta, report_path=out / f"scores{suffix}.csv")
        except (KeyError, RuntimeError, PredictorContractError) as exc:
            raise UserError(f"predictor {spec!r} failed: {exc}") from exc
        print(f"mean score over {len(rows)} images: {mean:.4f}")
    if args.submission_only or args.submission:
        path = Path(args.submission) if args.submission else out / f"submission{suffix}.csv"
        write_submission(path, {s.id: predict(s.image) for s in samples})
        print(f"wrote submission {path}")
    return EXIT_OK


def cmd_report(cfg, args):
    from .report import loss_curves, pca_scatter

    out = Path(cfg.paths.output_root)
    made = []
    clusters = out / "clusters.csv"
    if clusters.exists():
        with open(clusters, newline="") as fh:
            rows = list(csv.DictReader(fh))
        coords = np.array([[float(r["pc1"]), float(r["pc2"])] for r in rows])
        pca_scatter(out / "pca.png", coords, [int(r["domain"]) for r in rows])
        made.append("pca.png")
    log_path = Path(cfg.paths.checkpoint) / "train_log.csv"
    if log_path.exists():
        with open(log_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        log = {c: np.array([float(r[c]) for r in rows]) for c in rows[0]} if rows else {}
        if log:
            loss_curves(out / "loss_curves.png", log)
            made.append("loss_curves.png")
    if not made:
        raise UserError("nothing to report: run `cluster` or `train-gan` first")
    print("wrote " + ", ".join(made))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "cluster": cmd_cluster,
    "train-gan": cmd_train_gan,
    "augment": cmd_augment,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _global_options(parser, suppress=False):
    # on subcommands the defaults are suppressed so they never clobber values given up front
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="YAML config file")
    parser.add_argument("--preset", choices=["toy", "paper"], default=d(None),
                        help="scale preset applied before the file")
    parser.add_argument("--set", dest="sub_overrides" if suppress else "overrides", action="append",
                        default=d([]), metavar="KEY=VALUE",
                        help="override a config value, e.g. --set gan.net.n_iter=100")
    parser.add_argument("--jobs", type=int, default=d(1), help="worker cap for parallel stages")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser():
    parser = argparse.ArgumentParser(prog="nucleistyle", description=__doc__)
    _global_options(parser)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write the synthetic corpus")
    sub.add_parser("cluster", parents=[common], help="cluster images into modalities")
    p = sub.add_parser("train-gan", parents=[common], help="train the style-transfer model")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    sub.add_parser("augment", parents=[common], help="write style-augmented samples and the style grid")
    p = sub.add_parser("evaluate", parents=[common], help="score a predictor and/or export a submission")
    p.add_argument("--predictor", help="oracle | empty | blob | exec:<command>")
    p.add_argument("--tta", action="store_true", help="use test-time augmentation")
    p.add_argument("--submission", help="also write a submission CSV here")
    p.add_argument("--submission-only", action="store_true", help="export without scoring")
    sub.add_parser("report", parents=[common], help="re-draw report figures")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = args.overrides + getattr(args, "sub_overrides", [])
        cfg = load_config(args.config, args.preset, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UserError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
