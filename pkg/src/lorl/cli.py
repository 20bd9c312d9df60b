"""Experiment orchestration CLI.

Subcommands: generate, train, eval, retrieve, refexp, visualize, inspect.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import datagen, metrics, training
from .datagen import DataError, DatasetSpec, GenerationError, load_dataset, write_dataset
from .executor import answer_key, execute
from .training import TrainConfig, build_state, load_checkpoint, run_training, save_checkpoint

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4

# Reference training presets at desk scale.
PRESETS = {
    "sa-household": dict(model_tag="slot-attention", family="household",
                         alpha=1.0, beta=0.1, batch_size=64, n1=90, n2=20, n3=80,
                         num_slots=7),
    "sa-chairs": dict(model_tag="slot-attention", family="composite-chair",
                      alpha=1.0, beta=0.1, batch_size=64, n1=50, n2=0, n3=200,
                      num_slots=11),
    "monet-chairs": dict(model_tag="monet", family="composite-chair",
                         alpha=0.01, beta=1.0, batch_size=64, n1=100, n2=0, n3=200,
                         num_slots=11),
}


class ConfigError(ValueError):
    pass


def _run(fn) -> int:
    try:
        fn()
        return 0
    except (ConfigError, click.ClickException, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GenerationError, metrics.EvaluationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


@click.group()
def main():
    """LORL experiments: data generation, staged training, evaluation."""


@main.command()
@click.option("--family", type=click.Choice(["household", "composite-chair"]), required=True)
@click.option("--scenes", type=int, default=100, show_default=True)
@click.option("--image-size", type=int, default=64, show_default=True)
@click.option("--questions-per-image", type=int, default=None,
              help="Defaults: 9 (household), 8 (composite-chair).")
@click.option("--out", type=click.Path(), default=None,
              help="Output directory; defaults under $LORL_CACHE.")
@click.option("--seed", type=int, default=17, show_default=True)
def generate(family, scenes, image_size, questions_per_image, out, seed):
    """Generate a synthetic dataset in the standard directory layout."""

    def go():
        nonlocal out
        if out is None:
            cache = os.environ.get("LORL_CACHE")
            if cache is None:
                raise ConfigError("--out not given and LORL_CACHE is not set")
            out = Path(cache) / f"{family}-{scenes}-{image_size}-{seed}"
        qpi = questions_per_image or (9 if family == "household" else 8)
        spec = DatasetSpec(family=family, image_size=image_size, n_scenes=scenes,
                           questions_per_image=qpi, seed=seed,
                           max_objects=6 if family == "household" else 6)
        ds = write_dataset(spec, out)
        click.echo(f"wrote {len(ds)} scenes, {len(ds.questions)} questions to {out}")

    sys.exit(_run(go))


def _load_cfg(preset, config, seed, overrides) -> TrainConfig:
    if preset is not None:
        kwargs = dict(PRESETS[preset])
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        if seed is not None:
            kwargs["seed"] = seed
        return TrainConfig(**kwargs)
    if config is not None:
        if seed is not None:
            overrides = dict(overrides, seed=seed)
        return TrainConfig.from_file(config, overrides)
    raise ConfigError("provide --preset or --config")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--config", type=click.Path(exists=True), default=None,
              help="Flat key = value config file; flags override file values.")
@click.option("--out", type=click.Path(), required=True, help="Checkpoint directory.")
@click.option("--resume", is_flag=True, help="Resume from the checkpoint in --out.")
@click.option("--seed", type=int, default=None)
@click.option("--n1", type=int, default=None)
@click.option("--n2", type=int, default=None)
@click.option("--n3", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--image-size", type=int, default=None)
@click.option("--num-slots", type=int, default=None)
@click.option("--deterministic", is_flag=True, help="Single-worker, fixed thread count.")
def train(data_dir, preset, config, out, resume, seed, n1, n2, n3, batch_size,
          image_size, num_slots, deterministic):
    """Run the three-stage schedule, checkpointing each epoch."""

    def go():
        if deterministic:
            torch.set_num_threads(1)
        dataset = load_dataset(data_dir)
        out_dir = Path(out)
        if resume and (out_dir / "manifest.json").exists():
            state, cfg = load_checkpoint(out_dir)
        else:
            overrides = dict(n1=n1, n2=n2, n3=n3, batch_size=batch_size,
                             image_size=image_size, num_slots=num_slots)
            cfg = _load_cfg(preset, config, seed, overrides)
            if cfg.image_size != dataset.spec.image_size:
                cfg = TrainConfig(**{**training._config_json(cfg),
                                     "image_size": dataset.spec.image_size})
            state = build_state(cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        run_training(state, dataset, cfg, log_path=out_dir / "metrics.jsonl",
                     checkpoint_dir=out_dir)
        save_checkpoint(state, cfg, out_dir)
        click.echo(f"finished at stage {state.stage}, epoch {state.epoch}")

    sys.exit(_run(go))


def _encode_all(state, dataset, seed=0):
    from .training import load_images, encode_batch

    encs = []
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for start in range(0, len(dataset), 32):
            idx = list(range(start, min(start + 32, len(dataset))))
            batch, _ = encode_batch(state.model, load_images(dataset, idx), gen)
            encs.extend(batch)
    return encs


def _mean_stderr(values):
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()),
            "stderr": float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0}


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--report", type=click.Path(), default=None)
@click.option("--coverage", type=float, default=0.2, show_default=True)
@click.option("--retrieval-k", type=int, multiple=True, default=(),
              help="Also run instance retrieval at these k.")
@click.option("--refexp/--no-refexp", "do_refexp", default=False)
@click.option("--concepts/--no-concepts", "do_concepts", default=False,
              help="Concept-quantification precision/recall.")
@click.option("--include-background", is_flag=True, help="All-pixel ARI.")
@click.option("--seed", type=int, default=0)
def eval_cmd(checkpoint, data_dir, report, coverage, retrieval_k, do_refexp,
             do_concepts, include_background, seed):
    """Segmentation + QA evaluation, with optional protocols."""

    def go():
        state, cfg = load_checkpoint(checkpoint)
        dataset = load_dataset(data_dir)
        encs = _encode_all(state, dataset, seed)
        out = {"params": {"coverage": coverage, "seed": seed,
                          "checkpoint": str(checkpoint)}}
        aris, gts, preds = [], [], []
        for enc, record in zip(encs, dataset.records):
            seg = metrics.segmentation_eval(
                np.asarray(enc.m), record, coverage, include_background)
            aris.append(seg.ari)
            gts.append(seg.gt_split)
            preds.append(seg.pred_split)
        out["ari"] = _mean_stderr(aris)
        out["gt_split"] = _mean_stderr(gts)
        out["pred_split"] = _mean_stderr(preds)

        idx = dataset.scene_index
        predicted, gold = [], []
        with torch.no_grad():
            for qa in dataset.questions:
                dist = execute(qa.program, encs[idx[qa.scene_id]], state.space)
                predicted.append(answer_key(dist.argmax_answer))
                gold.append(answer_key(qa.answer))
        out["qa_accuracy"] = {"mean": metrics.qa_accuracy(predicted, gold)}

        for k in retrieval_k:
            out[f"retrieval@{k}"] = {"mean": metrics.retrieval_eval(
                encs, dataset.records, k=k, rng=np.random.default_rng(seed))}
        if do_refexp:
            exprs = []
            for i, record in enumerate(dataset.records):
                exprs.extend(
                    (p, i) for p in datagen.gen_refexps(record, dataset.vocab, seed=i)
                )
            out["refexp_recall@0.5"] = {"mean": metrics.refexp_recall(
                exprs, encs, dataset.records, state.space)}
        if do_concepts:
            for use_obj in (True, False):
                evals = metrics.concept_quantification(
                    encs, state.space, dataset.records, use_objectness=use_obj)
                tag = "concepts" if use_obj else "concepts_no_objectness"
                out[tag] = {
                    f"@{e.threshold:g}": {"precision": e.precision, "recall": e.recall}
                    for e in evals
                }
        text = json.dumps(out, indent=1)
        if report:
            Path(report).write_text(text)
        click.echo(text)

    sys.exit(_run(go))


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--k", type=int, multiple=True, default=(1, 3, 5), show_default=True)
@click.option("--samples", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0)
def retrieve(checkpoint, data_dir, k, samples, seed):
    """Instance retrieval: same-category fraction among k nearest neighbours."""

    def go():
        state, _ = load_checkpoint(checkpoint)
        dataset = load_dataset(data_dir)
        encs = _encode_all(state, dataset, seed)
        for kk in k:
            acc = metrics.retrieval_eval(encs, dataset.records, k=kk,
                                         n_samples=samples,
                                         rng=np.random.default_rng(seed))
            click.echo(f"retrieval@{kk}: {acc:.4f}")

    sys.exit(_run(go))


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--iou", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0)
def refexp(checkpoint, data_dir, iou, seed):
    """Referring-expression recall at an IoU threshold."""

    def go():
        state, _ = load_checkpoint(checkpoint)
        dataset = load_dataset(data_dir)
        encs = _encode_all(state, dataset, seed)
        exprs = []
        for i, record in enumerate(dataset.records):
            exprs.extend((p, i) for p in datagen.gen_refexps(record, dataset.vocab, seed=i))
        recall = metrics.refexp_recall(exprs, encs, dataset.records, state.space, iou=iou)
        click.echo(f"refexp recall@{iou:g}: {recall:.4f}")

    sys.exit(_run(go))


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--scenes", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0)
def visualize(checkpoint, data_dir, out, scenes, seed):
    """Per-scene PNG: input | reconstruction | colour-coded mask map."""
    from PIL import Image as PILImage
    from .perception import compose_image

    def go():
        state, _ = load_checkpoint(checkpoint)
        dataset = load_dataset(data_dir)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        palette = np.array(
            [[230, 60, 60], [60, 180, 75], [60, 90, 220], [240, 200, 50],
             [150, 60, 200], [70, 210, 210], [240, 130, 40], [130, 130, 130],
             [250, 120, 180], [110, 80, 40], [0, 128, 100]], dtype=np.uint8)
        encs = _encode_all(state, dataset, seed)
        for i in range(min(scenes, len(dataset))):
            image = dataset.image(i)
            with torch.no_grad():
                recon = compose_image(encs[i]).numpy()
            assign = metrics.pixel_assign(np.asarray(encs[i].m))
            mask_rgb = palette[assign % len(palette)]
            row = np.concatenate([
                (image * 255).astype(np.uint8),
                (np.clip(recon, 0, 1) * 255).astype(np.uint8),
                mask_rgb,
            ], axis=1)
            PILImage.fromarray(row).save(out_dir / f"{dataset.records[i].image_id}.png")
        click.echo(f"wrote {min(scenes, len(dataset))} visualizations to {out_dir}")

    sys.exit(_run(go))


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
def inspect(checkpoint):
    """Print a checkpoint's manifest: model tag, config, stage, step counts."""

    def go():
        manifest = json.loads((Path(checkpoint) / "manifest.json").read_text())
        click.echo(json.dumps(manifest, indent=1))

    sys.exit(_run(go))


if __name__ == "__main__":
    main()
