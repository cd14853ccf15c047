"""Command-line entry point.

    python app/main.py <command> [--preset tiny|desk|paper-150m] [--config run.json] [flags]

Commands that read a checkpoint (generate, eval --checkpoint, sweep-kinf)
start from the checkpoint's stored config when no --preset is named; a
config whose model differs from the checkpoint's is rejected (exit 2).

Commands: gen-data, train, generate, eval, sweep-kinf, compare, param-count.
Every command writes resolved_config.json into its output directory. Exit
codes: 0 success, 2 configuration, 3 numeric failure, 4 storage / I/O.
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pandas as pd

from config.settings import OBJECTIVES, PRESETS, RunConfig, cache_dir, clone, load_run_config
from core.errors import CAMError, ConfigError
from core.logging_setup import configure_logging
from core.rng import RngStream
from data.dataset import Dataset
from data.embedding_file import read_embeddings, write_embeddings
from data.synthetic import sample_process, spec_from_config
from inference.generator import export_traces, generate_batch
from metrics.conditional import ModelSampler, conditional_accuracy
from metrics.frechet import window_features
from metrics.mmd import mmd_rbf
from metrics.protocol import accumulation_curve, fed_protocol, reference_windows, stack_traces
from models.cam_model import count_parameters
from reports.charts import bar_chart, comparison_table, format_comparison, line_chart, write_csv
from storage.checkpoint import checkpoint_config, load_checkpoint
from training.train_state import new_train_state
from training.trainer import Trainer

logger = logging.getLogger("cam")

DEFAULT_KINF_GRID = (0.0, 0.005, 0.01, 0.02, 0.03, 0.05)
AUGMENTED_OBJECTIVES = ("cam", "givt_noise")
MMD_MAX_SAMPLES = 2000
EVAL_COLUMNS = ["model", "seed", "FED", "FED_acc", "MMD", "tau"]
DEFAULT_STEPS_GRID = (10, 25, 50, 100)


# ---------------------------------------------------------------- data helpers

def synthetic_dataset(cfg: RunConfig, purpose: str = "gen_data") -> Dataset:
    spec = spec_from_config(cfg.process)
    return sample_process(spec, cfg.process.num_sequences, cfg.process.length, RngStream(cfg.seed).split(purpose))


def training_dataset(cfg: RunConfig, data_path=None) -> tuple[Dataset, dict | None]:
    dataset = read_embeddings(data_path) if data_path else synthetic_dataset(cfg)
    if not cfg.process.normalize:
        return dataset, None
    dataset = dataset.normalize()
    return dataset, {"mean": dataset.mean, "std": dataset.std}


def reference_dataset(cfg: RunConfig, reference_path=None) -> Dataset:
    if reference_path:
        return read_embeddings(reference_path)
    return synthetic_dataset(cfg, "reference")


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, out_path=None) -> Path:
    out_path = Path(out_path or Path(cfg.out_dir) / "data.came")
    dataset = synthetic_dataset(cfg)
    write_embeddings(out_path, dataset)
    cfg.dump(out_path.parent)
    frames = dataset.frames().double()
    summary = pd.DataFrame({"mean": frames.mean(0).numpy(), "std": frames.std(0).numpy()})
    summary.index.name = "dim"
    print(f"{len(dataset)} sequences x {cfg.process.length} frames ({cfg.process.kind}, dim {dataset.dim}) -> {out_path}")
    print(summary.to_string(float_format=lambda v: f"{v:.4f}"))
    return out_path


def cmd_train(cfg: RunConfig, data_path=None, resume=None, progress: bool = True) -> Path:
    out_dir = Path(cfg.out_dir)
    dataset, normalization = training_dataset(cfg, data_path)
    if resume:
        state = load_checkpoint(resume, expected=cfg, device=cfg.train.device)
        for name in ("total_steps", "checkpoint_every", "log_every", "prefetch"):
            setattr(state.config.train, name, getattr(cfg.train, name))
        state.config.out_dir = cfg.out_dir
    else:
        state = new_train_state(cfg, normalization)
    state.config.dump(out_dir)
    trainer = Trainer(state, dataset, out_dir, progress=progress)
    trainer.fit()
    print(f"final checkpoint: {trainer.checkpoint_path} (step {state.step}, loss {state.running.get('last_loss', float('nan')):.5f})")
    return trainer.checkpoint_path


def cmd_generate(cfg: RunConfig, checkpoint, out_dir=None) -> Path:
    out_dir = Path(out_dir or Path(cfg.out_dir) / "traces")
    state = load_checkpoint(checkpoint, expected=cfg, device=cfg.train.device)
    cfg.dump(out_dir)
    traces = generate_batch(state.model, cfg.generation)
    traces = [t.to_data_space(state.normalization) for t in traces]
    export_traces(traces, out_dir, cfg.generation, extra={
        "checkpoint": str(checkpoint),
        "objective": state.objective,
        "train_step": state.step,
    })
    print(f"{len(traces)} traces of length {cfg.generation.target_length} ({state.objective}) -> {out_dir}")
    return out_dir


def _traces_model_name(traces_dir: Path) -> str:
    meta = traces_dir / "traces.meta.json"
    if meta.exists():
        return json.loads(meta.read_text()).get("objective", traces_dir.name)
    return traces_dir.name


def evaluate_traces(cfg: RunConfig, traces, reference: Dataset, model_name: str) -> tuple[dict, pd.DataFrame]:
    """FED, FED_acc, MMD on first-window features and the accumulation tau."""
    metrics = cfg.metrics
    fed = fed_protocol(traces, reference, metrics.window, metrics)
    data = stack_traces(traces)
    model_feats = window_features(data[:MMD_MAX_SAMPLES, :metrics.window], metrics.feature_seed)
    ref_windows = reference_windows(reference, metrics.window, min(MMD_MAX_SAMPLES, metrics.reference_size),
                                    RngStream(metrics.feature_seed).split("mmd"))
    mmd = mmd_rbf(model_feats, window_features(ref_windows, metrics.feature_seed))
    curve = accumulation_curve(data, reference, metrics.accumulation_stride)
    row = {"model": model_name, "seed": cfg.seed, "FED": fed.fed, "FED_acc": fed.fed_acc, "MMD": mmd, "tau": curve.tau}
    return row, curve.frame


def cmd_eval(cfg: RunConfig, traces_dir, reference_path=None, checkpoint=None, out_dir=None) -> pd.DataFrame:
    traces_dir = Path(traces_dir)
    out_dir = Path(out_dir or Path(cfg.out_dir) / "eval")
    cfg.dump(out_dir)
    traces = read_embeddings(traces_dir / "clean.came").sequences
    reference = reference_dataset(cfg, reference_path)
    row, curve = evaluate_traces(cfg, traces, reference, _traces_model_name(traces_dir))
    frame = pd.DataFrame([row], columns=EVAL_COLUMNS)
    write_csv(frame, out_dir / "eval_metrics.csv", "eval_metrics/1")
    write_csv(curve, out_dir / "accumulation.csv", "accumulation/1")
    line_chart(curve, "position", ["distance"], out_dir / "accumulation.svg",
               title=f"Error accumulation (tau={row['tau']:.3f})", y_title="Frechet distance")
    bar_chart(frame, "model", ["FED", "FED_acc"], out_dir / "fed.svg", title="FED vs FED_acc")

    if reference_path is not None:
        logger.warning("reference %s has no oracle process; conditional metrics omitted", reference_path)
    elif checkpoint is None:
        logger.warning("no --checkpoint given; conditional metrics omitted")
    else:
        state = load_checkpoint(checkpoint, expected=cfg, device=cfg.train.device)
        sampler = ModelSampler(state.model, cfg.generation.num_steps_denoise, normalization=state.normalization)
        accuracy = conditional_accuracy(sampler, spec_from_config(cfg.process), cfg.metrics.conditional_probes,
                                        RngStream(cfg.seed).split("conditional"), cfg.metrics.conditional_prefix,
                                        cfg.metrics.conditional_draws)
        write_csv(accuracy.probes, out_dir / "conditional.csv", "conditional_accuracy/1")
        print(f"conditional accuracy: mean_err {accuracy.mean_err:.4f}, mean_rel_err {accuracy.mean_rel_err:.4f}, "
              f"cov_err {accuracy.cov_err:.4f}")
    print(frame.to_string(index=False))
    return frame


def cmd_sweep_kinf(cfg: RunConfig, checkpoint, grid=DEFAULT_KINF_GRID, reference_path=None, out_dir=None) -> pd.DataFrame:
    out_dir = Path(out_dir or Path(cfg.out_dir) / "sweep_kinf")
    cfg.dump(out_dir)
    state = load_checkpoint(checkpoint, expected=cfg, device=cfg.train.device)
    reference = reference_dataset(cfg, reference_path)
    rows = []
    for k_inf in grid:
        gen_cfg = clone(cfg).generation
        gen_cfg.k_inf = float(k_inf)
        gen_cfg.validate()
        traces = [t.to_data_space(state.normalization) for t in generate_batch(state.model, gen_cfg)]
        fed = fed_protocol(traces, reference, cfg.metrics.window, cfg.metrics)
        rows.append({"k_inf": float(k_inf), "FED": fed.fed, "FED_acc": fed.fed_acc,
                     "FED_std": fed.fed_std, "FED_acc_std": fed.fed_acc_std})
        logger.info("k_inf=%g: FED %.4f FED_acc %.4f", k_inf, fed.fed, fed.fed_acc)
    frame = pd.DataFrame(rows)
    write_csv(frame, out_dir / "sweep_kinf.csv", "sweep_kinf/1")
    line_chart(frame, "k_inf", ["FED", "FED_acc"], out_dir / "sweep_kinf.svg", title="Influence of k_inf", y_title="FED")
    best = frame.loc[frame["FED_acc"].idxmin(), "k_inf"]
    print(frame.to_string(index=False))
    print(f"argmin FED_acc at k_inf={best:g}")
    return frame


def variant_config(cfg: RunConfig, objective: str, seed: int) -> RunConfig:
    cell = clone(cfg)
    cell.seed = seed
    cell.train.seed = seed
    cell.generation.seed = seed
    cell.train.objective = objective
    cell.train.noise_augmentation = objective in AUGMENTED_OBJECTIVES
    return cell.validate()


def select_num_steps(cell: RunConfig, model, reference: Dataset, grid, normalization=None) -> tuple[int, pd.DataFrame]:
    """Denoising step count with the lowest FED on a validation stream kept
    apart from the stream the reported traces come from."""
    rows = []
    for steps in grid:
        gen_cfg = clone(cell).generation
        gen_cfg.num_steps_denoise = int(steps)
        gen_cfg.validate()
        rng = RngStream(gen_cfg.seed).split("validate_steps")
        traces = [t.to_data_space(normalization) for t in generate_batch(model, gen_cfg, rng=rng)]
        fed = fed_protocol(traces, reference, cell.metrics.window, cell.metrics)
        rows.append({"num_steps": int(steps), "FED": fed.fed, "FED_acc": fed.fed_acc})
        logger.info("%s num_steps=%d: validation FED %.4f", cell.train.objective, steps, fed.fed)
    frame = pd.DataFrame(rows)
    return int(frame.loc[frame["FED"].idxmin(), "num_steps"]), frame


def run_cell(cfg: RunConfig, objective: str, seed: int, dataset: Dataset, normalization, reference: Dataset,
             steps_grid=None) -> dict:
    """Train (or reuse a finished run of) one variant/seed and score its traces.

    With `steps_grid`, diffusion-head variants are scored at the step count
    that wins on the validation stream.
    """
    cell = variant_config(cfg, objective, seed)
    run_dir = cache_dir() / "compare" / f"{cell.config_hash()[:12]}-{objective}-seed{seed}-steps{cell.train.total_steps}"
    cell.out_dir = str(run_dir)
    checkpoint = run_dir / "checkpoint.ckpt"
    state = None
    if checkpoint.exists():
        state = load_checkpoint(checkpoint, expected=cell, device=cell.train.device)
        if state.step < cell.train.total_steps:
            state = None
    if state is None:
        state = new_train_state(cell, normalization)
        cell.dump(run_dir)
        Trainer(state, dataset, run_dir, progress=False).fit()
    has_sampler = state.model.head_kind == "sampler"
    if steps_grid and has_sampler:
        best, selection = select_num_steps(cell, state.model, reference, steps_grid, state.normalization)
        write_csv(selection, run_dir / "steps_selection.csv", "steps_selection/1")
        cell.generation.num_steps_denoise = best
    traces = [t.to_data_space(state.normalization) for t in generate_batch(state.model, cell.generation)]
    row, _ = evaluate_traces(cell, traces, reference, objective)
    row["num_steps"] = cell.generation.num_steps_denoise if has_sampler else None
    row["run_dir"] = str(run_dir)
    return row


def cmd_compare(cfg: RunConfig, variants=OBJECTIVES, seeds=(0,), workers: int = 1, data_path=None,
                reference_path=None, out_dir=None, steps_grid=None) -> pd.DataFrame:
    if steps_grid and min(steps_grid) < 1:
        raise ConfigError(f"denoising step counts must be >= 1, got {list(steps_grid)}", "steps_grid")
    out_dir = Path(out_dir or Path(cfg.out_dir) / "compare")
    cfg.dump(out_dir)
    dataset, normalization = training_dataset(cfg, data_path)
    reference = reference_dataset(cfg, reference_path)
    cells = [(objective, seed) for objective in variants for seed in seeds]

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        futures = [pool.submit(run_cell, cfg, objective, seed, dataset, normalization, reference, steps_grid)
                   for objective, seed in cells]
        rows = []
        for (objective, seed), future in zip(cells, futures):
            try:
                rows.append(future.result())
            except Exception as e:
                logger.error("cell %s seed %d failed: %s", objective, seed, e)
                rows.append({"model": objective, "seed": seed, "error": str(e)})

    results = pd.DataFrame(rows).reindex(columns=EVAL_COLUMNS + ["num_steps", "run_dir", "error"])
    write_csv(results, out_dir / "compare_results.csv", "compare_results/1")
    table = comparison_table(results)
    write_csv(table, out_dir / "comparison.csv", "comparison/1")
    bar_chart(table, "model", ["FED_mean", "FED_acc_mean"], out_dir / "comparison.svg",
              title="FED and FED_acc per model", errors={"FED_mean": "FED_std", "FED_acc_mean": "FED_acc_std"})
    print(format_comparison(table).to_string(index=False))
    return table


def cmd_param_count(cfg: RunConfig) -> pd.DataFrame:
    rows = []
    for objective in ("cam", "givt"):
        count = count_parameters(cfg.model, objective)
        rows.append({"preset": cfg.preset, "head": "gmm" if objective == "givt" else "sampler",
                     "parameters": count, "millions": round(count / 1e6, 2)})
    frame = pd.DataFrame(rows)
    print(frame.to_string(index=False))
    return frame


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS),
                        help="named preset (default: desk, or the checkpoint's own config when one is given)")
    common.add_argument("--config", help="JSON document merged over the preset")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--device")
    common.add_argument("--log-level", default="INFO")
    common.add_argument("--objective", choices=OBJECTIVES)
    common.add_argument("--modes", type=int, help="GMM head modes")
    common.add_argument("--dim", type=int, help="embedding dimension")
    common.add_argument("--steps", type=int, help="training steps")
    common.add_argument("--k-inf", type=float, dest="k_inf")
    common.add_argument("--num-steps", type=int, dest="num_steps", help="denoising steps per position")
    common.add_argument("--temperature", type=float)
    common.add_argument("--num-traces", type=int, dest="num_traces")
    common.add_argument("--length", type=int, help="sequence length (gen-data) or trace length")

    parser = argparse.ArgumentParser(prog="cam", description="Continuous autoregressive sequence models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="sample a synthetic dataset")
    p.add_argument("--data", help="output embedding file")

    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("--data", help="embedding file to train on (default: sample the configured process)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("generate", parents=[common], help="generate traces from a checkpoint")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", parents=[common], help="score exported traces")
    p.add_argument("--traces", required=True, help="directory written by generate")
    p.add_argument("--reference", help="reference embedding file (default: sample the configured process)")
    p.add_argument("--checkpoint", help="checkpoint for conditional accuracy against the process oracle")

    p = sub.add_parser("sweep-kinf", parents=[common], help="FED / FED_acc over a grid of k_inf")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", type=float, nargs="+", default=list(DEFAULT_KINF_GRID))
    p.add_argument("--reference")

    p = sub.add_parser("compare", parents=[common], help="train and score every baseline over seeds")
    p.add_argument("--variants", nargs="+", choices=OBJECTIVES, default=list(OBJECTIVES))
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--steps-grid", type=int, nargs="*", dest="steps_grid",
                   help=f"denoising step counts to pick from per diffusion-head variant "
                        f"(bare flag: {' '.join(map(str, DEFAULT_STEPS_GRID))})")
    p.add_argument("--data")
    p.add_argument("--reference")

    sub.add_parser("param-count", parents=[common], help="analytic parameter count of a preset")
    return parser


def flag_overrides(args) -> dict:
    """Nested override document from command-line flags."""
    overrides: dict = {}

    def put(path, value):
        if value is None:
            return
        node = overrides
        *parents, leaf = path.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value

    if args.seed is not None:
        for path in ("seed", "train.seed", "generation.seed"):
            put(path, args.seed)
    put("out_dir", args.out)
    put("train.device", args.device)
    if args.objective is not None:
        put("train.objective", args.objective)
        put("train.noise_augmentation", args.objective in AUGMENTED_OBJECTIVES)
    put("model.gmm.num_modes", args.modes)
    if args.dim is not None:
        for path in ("model.backbone.input_dim", "model.sampler.input_dim", "model.gmm.output_dim", "process.dim"):
            put(path, args.dim)
    put("train.total_steps", args.steps)
    put("generation.k_inf", args.k_inf)
    put("generation.num_steps_denoise", args.num_steps)
    put("generation.temperature", args.temperature)
    put("generation.num_traces", args.num_traces)
    if args.length is not None:
        put("process.length" if args.command == "gen-data" else "generation.target_length", args.length)
    return overrides


def resolve_config(args) -> RunConfig:
    """Commands reading a checkpoint start from the config it was trained
    with unless a preset is named; flags still apply on top."""
    checkpoint = getattr(args, "checkpoint", None)
    base = checkpoint_config(checkpoint) if checkpoint and args.preset is None else None
    return load_run_config(args.preset or "desk", args.config, flag_overrides(args), base=base)


def run(args) -> int:
    cfg = resolve_config(args)
    command = args.command
    if command == "gen-data":
        cmd_gen_data(cfg, args.data)
    elif command == "train":
        cmd_train(cfg, args.data, args.resume)
    elif command == "generate":
        cmd_generate(cfg, args.checkpoint)
    elif command == "eval":
        cmd_eval(cfg, args.traces, args.reference, args.checkpoint)
    elif command == "sweep-kinf":
        cmd_sweep_kinf(cfg, args.checkpoint, args.grid, args.reference)
    elif command == "compare":
        steps_grid = DEFAULT_STEPS_GRID if args.steps_grid == [] else args.steps_grid
        cmd_compare(cfg, args.variants, args.seeds, args.workers, args.data, args.reference, steps_grid=steps_grid)
    elif command == "param-count":
        cmd_param_count(cfg)
    else:
        raise ConfigError(f"unknown command {command!r}", "command")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return run(args)
    except CAMError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("I/O failure: %s", e)
        return 4


if __name__ == "__main__":
    sys.exit(main())
