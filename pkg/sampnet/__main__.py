from __future__ import annotations

import json
import logging
import sys
from argparse import ArgumentParser, Namespace
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np
import polars as pl
from tqdm import tqdm

from sampnet.annotations import load_annotations
from sampnet.bias import filter_and_split, write_bias_report
from sampnet.config import load_train_config, write_train_config
from sampnet.consts import BETAS_FILENAME, SALIENCY_SUFFIX
from sampnet.dataset import CompositionDataset, describe_scores, format_score_summary, load_image, write_betas, write_split
from sampnet.errors import NumericError, ValidationError
from sampnet.fileformats import read_checkpoint, write_checkpoint, write_feature_array
from sampnet.saliency import spectral_residual
from sampnet.stats import (
    batch_consistency_report, kendalls_w, null_p_value, pairwise_spearman, read_rating_table, w_null_distribution,
)
from sampnet.synth import read_synth_spec, synth_generate
from sampnet.trainer import evaluate, train, write_training_log
from sampnet.utils import atomic_open
from sampnet.visualize import visualize_image, write_gray_png


log = logging.getLogger('sampnet')
cli_tracker = partial(tqdm, leave=False)
IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg', '.bmp')


def run_synth(args: Namespace) -> None:
    spec = read_synth_spec(args.spec)
    synth_generate(spec, args.seed, args.out, tracker=cli_tracker)


def _image_files(source: Path) -> list[Path]:
    if source.is_file():
        return [source]
    if not source.is_dir():
        raise ValidationError(f"'{source}' is neither an image nor a directory")
    files = sorted(path for path in source.iterdir() if path.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValidationError(f"No images in '{source}'")
    return files


def run_saliency(args: Namespace) -> None:
    files = _image_files(Path(args.input))
    rasters = [(path, load_image(path)) for path in files]
    out = Path(args.out)
    for path, raster in cli_tracker(rasters, desc="saliency"):
        saliency_map = spectral_residual(raster)
        write_gray_png(saliency_map.values, out / f"{path.stem}.png")
        if args.f32:
            write_feature_array(saliency_map.values[None], out / f"{path.stem}{SALIENCY_SUFFIX}")
    log.info("Wrote %s saliency maps to '%s'", len(rasters), out)


def run_prepare(args: Namespace) -> None:
    annotations = Path(args.annotations)
    images = load_annotations(annotations)
    source = CompositionDataset(annotations.parent, tuple(images))
    train_images, test_images, report = filter_and_split(images, args.seed, test_fraction=args.test_fraction)
    out = Path(args.out)
    write_bias_report(report, out)
    write_split(source, train_images, out / 'train')
    write_split(source, test_images, out / 'test')
    write_betas(report.betas(), out / 'train' / BETAS_FILENAME)
    print(f"all:   {format_score_summary(describe_scores(images))}")
    if train_images:
        print(f"train: {format_score_summary(describe_scores(train_images))}")
    if test_images:
        print(f"test:  {format_score_summary(describe_scores(test_images))}")
    biased = report.biased_categories()
    print(f"biased categories: {', '.join(biased) if biased else '-'}")


def run_train(args: Namespace) -> None:
    config = load_train_config(args.config)
    dataset = CompositionDataset.from_directory(args.data)
    result = train(dataset, config, tracker=cli_tracker)
    out = Path(args.out)
    write_checkpoint(result.final, out / 'final.ckpt')
    write_checkpoint(result.best, out / 'best.ckpt')
    write_training_log(result.records, out / 'train_log.jsonl')
    write_train_config(config, out / 'config.txt')


def run_eval(args: Namespace) -> None:
    checkpoint = read_checkpoint(args.checkpoint)
    dataset = CompositionDataset.from_directory(args.data)
    result = evaluate(checkpoint, dataset, tracker=cli_tracker)
    report_path = Path(args.report)
    with atomic_open(report_path) as file:
        file.write(json.dumps(result.report.as_dict(), sort_keys=True) + '\n')
    with atomic_open(report_path.with_name(report_path.name + '.txt')) as file:
        file.write(result.report.format_text() + '\n')
    ground_truth = np.stack([image.distribution.probs for image in dataset.images])
    with atomic_open(report_path.with_name(report_path.name + '.predictions.csv')) as file:
        result.predictions_frame(ground_truth).write_csv(file)


def run_raters(args: Namespace) -> None:
    table = read_rating_table(args.table)
    out = Path(args.out)
    summary: dict[str, object] = {'raters': table.raters, 'items': table.items}
    w = kendalls_w(table)
    null = w_null_distribution(table, args.n_perm, args.seed)
    summary['w'] = w
    summary['p_value'] = null_p_value(w, null)

    pairs = pairwise_spearman(table, args.n_perm, args.seed)
    summary['mean_spearman_rho'] = float(np.mean([rho for _, _, rho, _ in pairs]))
    summary['mean_spearman_p'] = float(np.mean([p for *_, p in pairs]))

    batch_frames = []
    if table.items >= args.batch_size:
        for method in ('kendall', 'spearman'):
            consistency = batch_consistency_report(
                table, args.batch_size, args.q, args.seed, method=method, n_perm=args.n_perm, tracker=cli_tracker,
            )
            summary[f'{method}_batch_fraction'] = consistency.fraction
            if method == 'kendall':
                summary['mean_batch_w'] = consistency.mean_w
            batch_frames.append(pl.DataFrame({
                'method': [method] * len(consistency.w),
                'batch': list(range(len(consistency.w))),
                'w': consistency.w.tolist(),
                'p_value': consistency.p_values.tolist(),
                'significant': consistency.rejected.tolist(),
            }))
    else:
        log.warning("Table has %s items, fewer than one batch of %s; skipping batch analysis",
                    table.items, args.batch_size)

    counts, edges = np.histogram(null, bins=20, range=(0.0, 1.0))
    with atomic_open(out / 'w_null.csv') as file:
        pl.DataFrame({'w': null.tolist()}).write_csv(file)
    with atomic_open(out / 'w_null_hist.csv') as file:
        pl.DataFrame({'low': edges[:-1].tolist(), 'high': edges[1:].tolist(), 'count': counts.tolist()}).write_csv(file)
    with atomic_open(out / 'pairwise_spearman.csv') as file:
        pl.DataFrame(
            {
                'rater_a': [j for j, _, _, _ in pairs], 'rater_b': [k for _, k, _, _ in pairs],
                'rho': [rho for _, _, rho, _ in pairs], 'p_value': [p for *_, p in pairs],
            },
        ).write_csv(file)
    if batch_frames:
        with atomic_open(out / 'batches.csv') as file:
            pl.concat(batch_frames).write_csv(file)
    with atomic_open(out / 'raters.json') as file:
        file.write(json.dumps(summary, sort_keys=True) + '\n')
    with atomic_open(out / 'raters.txt') as file:
        file.write(''.join(f"{key:<24} {value}\n" for key, value in summary.items()))


def run_visualize(args: Namespace) -> None:
    checkpoint = read_checkpoint(args.checkpoint)
    visualize_image(checkpoint, args.image, args.out, pattern=args.pattern)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser('sampnet', description='Image composition assessment with multi-pattern pooling.')
    parser.add_argument('--verbose', '-v', action='store_true', help='log debug messages')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='write a synthetic composition dataset')
    synth.add_argument('--spec', required=True, type=Path)
    synth.add_argument('--seed', type=int, default=0)
    synth.add_argument('--out', required=True, type=Path)
    synth.set_defaults(handler=run_synth)

    saliency = commands.add_parser('saliency', help='spectral-residual saliency maps')
    saliency.add_argument('--in', dest='input', required=True, type=Path)
    saliency.add_argument('--out', required=True, type=Path)
    saliency.add_argument('--f32', action='store_true', help=f'also write {SALIENCY_SUFFIX} arrays')
    saliency.set_defaults(handler=run_saliency)

    prepare = commands.add_parser('prepare', help='content-bias analysis and train/test split')
    prepare.add_argument('--annotations', required=True, type=Path)
    prepare.add_argument('--out', required=True, type=Path)
    prepare.add_argument('--seed', type=int, default=0)
    prepare.add_argument('--test-fraction', type=float, default=0.1)
    prepare.set_defaults(handler=run_prepare)

    train_parser = commands.add_parser('train', help='train a model')
    train_parser.add_argument('--config', required=True, type=Path)
    train_parser.add_argument('--data', required=True, type=Path)
    train_parser.add_argument('--out', required=True, type=Path)
    train_parser.set_defaults(handler=run_train)

    eval_parser = commands.add_parser('eval', help='evaluate a checkpoint')
    eval_parser.add_argument('--checkpoint', required=True, type=Path)
    eval_parser.add_argument('--data', required=True, type=Path)
    eval_parser.add_argument('--report', required=True, type=Path)
    eval_parser.set_defaults(handler=run_eval)

    raters = commands.add_parser('raters', help='rater consistency statistics')
    raters.add_argument('--table', required=True, type=Path)
    raters.add_argument('--out', required=True, type=Path)
    raters.add_argument('--seed', type=int, default=0)
    raters.add_argument('--batch-size', type=int, default=100)
    raters.add_argument('--q', type=float, default=0.05)
    raters.add_argument('--n-perm', type=int, default=999)
    raters.set_defaults(handler=run_raters)

    visualize = commands.add_parser('visualize', help='pattern weights and overlay for one image')
    visualize.add_argument('--checkpoint', required=True, type=Path)
    visualize.add_argument('--image', required=True, type=Path)
    visualize.add_argument('--out', required=True, type=Path)
    visualize.add_argument('--pattern', type=int, default=None, metavar='P',
                           help='draw the partitions of pattern P (1..8) instead of the dominant one')
    visualize.set_defaults(handler=run_visualize)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        args.handler(args)
    except NumericError as exc:
        log.error("Numeric failure: %s", exc)
        return 2
    except (ValidationError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
