"""Command-line entry points.

Exit codes: 0 success, 1 generic failure, 2 unreadable/corrupt checkpoint,
3 bad input (image, instruction, paths). Outputs are PNG images and UTF-8
JSON reports/logs.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import imageops
from .checkpoint import CheckpointError, load_checkpoint

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_CHECKPOINT = 2
EXIT_INPUT = 3


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except Exception as exc:
        raise ValueError(f"size must look like 512x384, got {text!r}") from exc


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Language-guided image restyling: data prep, training, inference,
    evaluation and serving."""


@main.command("toy-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n-styles", default=32, show_default=True)
@click.option("--n-contents", default=16, show_default=True)
@click.option("--size", default="64x64", show_default=True)
@click.option("--seed", default=0, show_default=True)
def toy_corpus_cmd(out_dir, n_styles, n_contents, size, seed):
    """Generate the procedural texture/scene corpus on disk."""
    from .toy import write_toy_corpus

    try:
        root = write_toy_corpus(out_dir, n_styles, n_contents, _parse_size(size), seed)
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))
    click.echo(f"wrote toy corpus under {root}")


@main.command("prepare")
@click.option("--contents", "contents_dir", required=True, type=click.Path(exists=True))
@click.option("--styles", "styles_manifest", required=True, type=click.Path(exists=True))
@click.option("--n-test", required=True, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--size", default="512x384", show_default=True, help="content resize WxH")
@click.option("--out", "out_path", required=True, type=click.Path())
def prepare_cmd(contents_dir, styles_manifest, n_test, seed, size, out_path):
    """Build a train/test split manifest over the two corpora."""
    from .data import load_content_corpus, load_style_corpus, make_split

    try:
        contents = load_content_corpus(contents_dir, _parse_size(size))
        styles = load_style_corpus(styles_manifest)
        split = make_split(len(styles), len(contents), n_test, seed)
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))
    Path(out_path).write_text(split.to_json(), encoding="utf-8")
    click.echo(
        f"split: {len(split.train_style_ids)}/{len(split.test_style_ids)} styles, "
        f"{len(split.train_content_ids)}/{len(split.test_content_ids)} contents -> {out_path}"
    )


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--contents", "contents_dir", required=True, type=click.Path())
@click.option("--styles", "styles_manifest", required=True, type=click.Path())
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--size", default="512x384", show_default=True, help="content resize WxH")
@click.option("--resume-from", default=None, type=click.Path())
@click.option("-o", "--override", "overrides", multiple=True, help="config override key=value")
def train_cmd(config_path, contents_dir, styles_manifest, run_dir, size, resume_from, overrides):
    """Run the training schedule from a JSON config file."""
    from .data import load_content_corpus, load_style_corpus
    from .training import TrainConfig, apply_overrides, fit

    if not Path(config_path).exists():
        _fail(EXIT_INPUT, f"config file {config_path} not found")
    try:
        config = apply_overrides(TrainConfig.from_file(config_path), list(overrides))
        config.validate()
    except (ValueError, json.JSONDecodeError) as exc:
        _fail(EXIT_INPUT, f"invalid config: {exc}")
    try:
        contents = load_content_corpus(contents_dir, _parse_size(size))
        styles = load_style_corpus(styles_manifest)
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))
    try:
        _, paths = fit(contents, styles, config, run_dir, resume_from=resume_from)
    except CheckpointError as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    except Exception as exc:
        _fail(EXIT_GENERIC, f"training failed: {exc}")
    click.echo(f"trained; {len(paths)} checkpoints under {run_dir}")


@main.command("infer")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--content", "content_path", required=True, type=click.Path())
@click.option("--instruction", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--size", default=None, help="resize WxH; default keeps nearest /16 dims")
def infer_cmd(checkpoint, content_path, instruction, out_path, size):
    """Restyle one image with one instruction in a single forward pass."""
    if not instruction.strip():
        _fail(EXIT_INPUT, "instruction must be non-empty")
    try:
        bundle = load_checkpoint(checkpoint)
    except CheckpointError as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    try:
        img = imageops.load_image(content_path)
    except Exception as exc:
        _fail(EXIT_INPUT, f"cannot read {content_path}: {exc}")
    if size:
        try:
            img = imageops.load_image(content_path, target_size=_parse_size(size))
        except ValueError as exc:
            _fail(EXIT_INPUT, str(exc))
    else:
        h, w = img.shape[:2]
        tw, th = imageops.nearest_divisible(w), imageops.nearest_divisible(h)
        if (tw, th) != (w, h):
            img = imageops.load_image(content_path, target_size=(tw, th))
    model = bundle.model
    model.eval()
    try:
        result = model.stylize(img, instruction)
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))
    imageops.save_image(result, out_path)
    click.echo(f"wrote {out_path}")


@main.command("eval")
@click.option("--results", "results_dir", required=True, type=click.Path())
@click.option("--semi-gt", "semi_gt_dir", required=True, type=click.Path())
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--csv", "csv_path", default=None, type=click.Path())
@click.option("--extractor-seed", default=0, show_default=True)
@click.option("--embedder-seed", default=0, show_default=True)
def eval_cmd(results_dir, semi_gt_dir, manifest, out_path, csv_path, extractor_seed, embedder_seed):
    """Score a results directory against semi-ground-truth."""
    from .evaluation import HashingEmbedder, RandomConvExtractor, evaluate

    for p in (results_dir, semi_gt_dir, manifest):
        if not Path(p).exists():
            _fail(EXIT_INPUT, f"path {p} not found")
    report = evaluate(
        results_dir,
        semi_gt_dir,
        manifest,
        extractor=RandomConvExtractor(seed=extractor_seed),
        embedder=HashingEmbedder(seed=embedder_seed),
    )
    Path(out_path).write_text(report.to_json(), encoding="utf-8")
    if csv_path:
        report.write_csv(csv_path)
    agg = report.aggregate
    click.echo(
        "pairs {pairs:.0f}  MSE {mse:.5f}  SSIM {ssim:.3f}  FAD {fad:.5f}  VLS {vls:.3f}  RS {rs:.3f}".format(
            **agg
        )
    )
    if not report.per_pair:
        _fail(EXIT_GENERIC, "no pair ids shared between results and semi-gt")


@main.command("serve")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--host", default=None, help="default CLVA_HOST or 127.0.0.1")
@click.option("--port", default=None, type=int, help="default CLVA_PORT or 8000")
def serve_cmd(checkpoint, host, port):
    """Run the HTTP stylization service."""
    import os

    import uvicorn

    from .service import create_app

    host = host or os.environ.get("CLVA_HOST", "127.0.0.1")
    port = port or int(os.environ.get("CLVA_PORT", "8000"))
    app = create_app(checkpoint_path=checkpoint)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
