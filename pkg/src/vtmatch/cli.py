"""Command-line surface: data generation, training, evaluation,
retrieval, explanation dumps and gradient checking.

Config precedence is flag > config file > default; the effective config
is echoed to stderr before each run. Machine-readable output goes to
stdout (or files), summaries to stderr. Exit codes: 0 success,
1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import diffcore as dc
from . import retrieval, training
from .data import (
    DataError,
    SyntheticConfig,
    gen_synthetic,
    load_dataset,
    save_dataset,
)
from .hierarchy import AblationFlags, ModelDims, ModelParams
from .training import TrainConfig, fit, load_checkpoint


class ValidationFailure(click.ClickException):
    exit_code = 1


def _echo_config(name, cfg_dict):
    click.echo(f"[{name}] effective config: {json.dumps(cfg_dict, sort_keys=True)}",
               err=True)


def _merged(config_path, defaults, overrides):
    """flag > file > default; overrides holds only flags the user passed."""
    merged = dict(defaults)
    if config_path:
        try:
            merged.update(json.loads(Path(config_path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationFailure(f"cannot read config {config_path}: {exc}")
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


@click.group()
def cli():
    """Conditioned video/text matching toolkit."""


@cli.command("gen-data")
@click.option("--pairs", type=int, default=16, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--clips-min", type=int, default=2, show_default=True)
@click.option("--clips-max", type=int, default=3, show_default=True)
@click.option("--frames-min", type=int, default=3, show_default=True)
@click.option("--frames-max", type=int, default=6, show_default=True)
@click.option("--words-min", type=int, default=3, show_default=True)
@click.option("--words-max", type=int, default=6, show_default=True)
@click.option("--d-f", type=int, default=16, show_default=True)
@click.option("--d-w", type=int, default=16, show_default=True)
@click.option("--concepts", type=int, default=8, show_default=True)
@click.option("--noise-sigma", type=float, default=0.1, show_default=True)
@click.option("--distractor-fraction", type=float, default=0.3, show_default=True)
@click.option("--distractor-style",
              type=click.Choice(["companion", "background", "concept", "noise"]),
              default="companion", show_default=True)
def cmd_gen_data(pairs, seed, out, clips_min, clips_max, frames_min, frames_max,
                 words_min, words_max, d_f, d_w, concepts, noise_sigma,
                 distractor_fraction, distractor_style):
    """Generate a synthetic planted-correlation corpus."""
    cfg = SyntheticConfig(
        n_pairs=pairs,
        clips_per_video=(clips_min, clips_max),
        frames_per_clip=(frames_min, frames_max),
        words_per_sentence=(words_min, words_max),
        d_f=d_f, d_w=d_w,
        n_concepts=concepts,
        noise_sigma=noise_sigma,
        distractor_fraction=distractor_fraction,
        distractor_style=distractor_style,
        seed=seed,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ValidationFailure(str(exc))
    _echo_config("gen-data", vars(cfg) | {
        "clips_per_video": list(cfg.clips_per_video),
        "frames_per_clip": list(cfg.frames_per_clip),
        "words_per_sentence": list(cfg.words_per_sentence),
    })
    dataset = gen_synthetic(cfg)
    manifest = save_dataset(dataset, out)
    n_clips = sum(len(v.clips) for v, _ in dataset.pairs)
    click.echo(f"wrote {len(dataset)} pairs ({n_clips} clips) to {manifest}", err=True)
    click.echo(str(manifest))


TRAIN_DEFAULTS = {
    "epochs": 50,
    "batch_pairs": 16,
    "learning_rate": 1e-3,
    "margin_video": 0.2,
    "margin_clip": 0.2,
    "seed": 0,
    "d_e": 32,
    "n_f": 16,
    "ablation": "",
}


def _load_data(data):
    try:
        return load_dataset(data)
    except DataError as exc:
        raise ValidationFailure(str(exc))


@cli.command("train")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path())
@click.option("--epochs", type=int)
@click.option("--batch-pairs", type=int)
@click.option("--learning-rate", "--lr", type=float)
@click.option("--margin-video", type=float)
@click.option("--margin-clip", type=float)
@click.option("--seed", type=int)
@click.option("--d-e", type=int)
@click.option("--n-f", type=int)
@click.option("--ablation", type=str,
              help="comma-separated: no-attn,no-global,no-2nd-h,no-m-match")
@click.option("--resume", type=click.Path(exists=True))
@click.option("--threads", type=int, default=1, show_default=True)
def cmd_train(data, out, config_path, resume, threads, **overrides):
    """Train a model; writes checkpoint.ckpt and loss.jsonl under --out."""
    del threads  # training is single-threaded for determinism
    merged = _merged(config_path, TRAIN_DEFAULTS, overrides)
    dataset = _load_data(data)
    d_f = dataset.pairs[0][0].d_f
    d_w = dataset.pairs[0][1].d_w
    try:
        flags = AblationFlags.parse(merged["ablation"])
        cfg = TrainConfig(
            batch_pairs=int(merged["batch_pairs"]),
            margin_video=float(merged["margin_video"]),
            margin_clip=float(merged["margin_clip"]),
            learning_rate=float(merged["learning_rate"]),
            epochs=int(merged["epochs"]),
            seed=int(merged["seed"]),
            ablation=flags,
            dims=ModelDims(d_f=d_f, d_w=d_w, d_e=int(merged["d_e"]),
                           n_f=int(merged["n_f"])),
        ).validate()
        if cfg.batch_pairs > len(dataset):
            raise ValueError(
                f"batch_pairs {cfg.batch_pairs} exceeds dataset size {len(dataset)}")
    except ValueError as exc:
        raise ValidationFailure(str(exc))
    _echo_config("train", merged | {"d_f": d_f, "d_w": d_w})
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.ckpt"
    _, history = fit(dataset, cfg, checkpoint_path=ckpt,
                     log_path=out_dir / "loss.jsonl", resume_from=resume)
    if history:
        click.echo(f"final loss {history[-1].total:.6f} after {len(history)} epochs",
                   err=True)
    click.echo(str(ckpt))


def _load_model(checkpoint):
    try:
        params, header, _ = load_checkpoint(checkpoint)
    except (OSError, ValueError) as exc:
        raise ValidationFailure(f"cannot load checkpoint: {exc}")
    return params, header


@cli.command("eval")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--direction", type=click.Choice(["t2v", "v2t", "both"]),
              default="both", show_default=True)
@click.option("--k-shortlist", type=int, default=retrieval.DEFAULT_SHORTLIST,
              show_default=True)
@click.option("--exhaustive", is_flag=True,
              help="rerank the whole corpus (k-shortlist = corpus size)")
@click.option("--mode", type=click.Choice(["paragraph", "sentence", "clip"]),
              default="paragraph", show_default=True)
@click.option("--ablation", type=str, default="")
@click.option("--threads", type=int, default=1, show_default=True)
def cmd_eval(data, checkpoint, direction, k_shortlist, exhaustive, mode,
             ablation, threads):
    """Retrieval metrics (R@1, R@5, MdR) in one or both directions."""
    dataset = _load_data(data)
    params, _ = _load_model(checkpoint)
    try:
        flags = AblationFlags.parse(ablation)
    except ValueError as exc:
        raise ValidationFailure(str(exc))
    k = len(dataset) if exhaustive else k_shortlist
    _echo_config("eval", {"direction": direction, "k_shortlist": k,
                          "mode": mode, "ablation": ablation, "threads": threads})
    directions = ["t2v", "v2t"] if direction == "both" else [direction]
    report = {}
    for d in directions:
        metrics = retrieval.evaluate(dataset, params, direction=d,
                                     k_shortlist=k, mode=mode, flags=flags,
                                     threads=threads)
        report[d] = metrics.to_dict()
        click.echo(
            f"{d}: R@1={metrics.recall_at[1]:.3f} R@5={metrics.recall_at[5]:.3f} "
            f"MdR={metrics.median_rank:.1f}", err=True)
    click.echo(json.dumps(report, indent=2, sort_keys=True))


@cli.command("retrieve")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--query-id", required=True)
@click.option("--direction", type=click.Choice(["t2v", "v2t"]), default="t2v",
              show_default=True)
@click.option("--k-shortlist", type=int, default=retrieval.DEFAULT_SHORTLIST,
              show_default=True)
@click.option("--top", type=int, default=5, show_default=True)
@click.option("--mode", type=click.Choice(["paragraph", "sentence", "clip"]),
              default="paragraph", show_default=True)
def cmd_retrieve(data, checkpoint, query_id, direction, k_shortlist, top, mode):
    """Ranked ids with conditioned scores for one query."""
    dataset = _load_data(data)
    params, _ = _load_model(checkpoint)
    if direction == "t2v":
        queries = {p.id: p for _, p in dataset.pairs}
        corpus = [v for v, _ in dataset.pairs]
    else:
        queries = {v.id: v for v, _ in dataset.pairs}
        corpus = [p for _, p in dataset.pairs]
    if query_id not in queries:
        raise ValidationFailure(f"query id {query_id!r} not in dataset")
    query = queries[query_id]
    index = retrieval.build_index(corpus, params)
    short = retrieval.shortlist(retrieval.static_embed(query, params), index,
                                min(k_shortlist, len(corpus)))
    by_id = {c.id: c for c in corpus}
    ranked = retrieval.rerank(query, [by_id[i] for i in short], params, mode)
    for rank, (cid, score) in enumerate(ranked[:top], start=1):
        click.echo(f"{rank}\t{cid}\t{score:.6f}")


@cli.command("explain")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--pair-id", required=True)
@click.option("--out", type=click.Path(), help="write the dump here instead of stdout")
def cmd_explain(data, checkpoint, pair_id, out):
    """Attention explanation dump for one video/paragraph pair."""
    dataset = _load_data(data)
    params, _ = _load_model(checkpoint)
    match = [(v, p) for v, p in dataset.pairs if v.id == pair_id]
    if not match:
        raise ValidationFailure(f"pair id {pair_id!r} not in dataset")
    video, paragraph = match[0]
    dump = json.dumps(retrieval.explain(video, paragraph, params).to_dict(),
                      indent=2, sort_keys=True)
    if out:
        Path(out).write_text(dump + "\n")
        click.echo(f"wrote explanation to {out}", err=True)
    else:
        click.echo(dump)


@cli.command("gradcheck")
@click.option("--d-e", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=3, show_default=True)
@click.option("--eps", type=float, default=1e-5, show_default=True)
@click.option("--threshold", type=float, default=1e-4, show_default=True)
def cmd_gradcheck(d_e, seed, eps, threshold):
    """Finite-difference check of the full loss on a seeded micro-batch."""
    cfg = SyntheticConfig(
        n_pairs=2, clips_per_video=(2, 2), frames_per_clip=(2, 3),
        words_per_sentence=(2, 3), d_f=6, d_w=6, n_concepts=4,
        noise_sigma=0.2, distractor_fraction=0.2, seed=seed,
    )
    dataset = gen_synthetic(cfg)
    dims = ModelDims(d_f=6, d_w=6, d_e=d_e, n_f=4)
    params = ModelParams.init(dims, seed=seed)
    tcfg = TrainConfig(batch_pairs=2, dims=dims, seed=seed)

    def loss_fn(_named):
        t1, t2, t3 = training._loss_terms(dataset.pairs, params, tcfg)
        return t1 + t2 + t3

    err = dc.grad_check(loss_fn, params.named_parameters(), eps=eps)
    click.echo(f"max relative error: {err:.3e}")
    if not err < threshold:
        raise ValidationFailure(
            f"gradient check failed: {err:.3e} >= threshold {threshold:.1e}")
    click.echo("gradient check passed", err=True)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.Abort:
        sys.exit(1)
    except (DataError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except Exception as exc:  # runtime failure
        click.echo(f"runtime failure: {exc}", err=True)
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
