"""Command-line pipeline: data, density, training, evaluation, ablation, theory, plots.

Every command writes into ``--out`` (created if absent) together with a
manifest holding the resolved config and sha256 hashes of the files it
produced: ``manifest.txt`` for training, ``manifest-<command>.txt`` otherwise. Exit codes: 0 success, 1 validation or usage error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from badgan import density as dens
from badgan import theory
from badgan.config import PRESETS, load_config, parse_config, preset, serialize_config
from badgan.datasets import Dataset, make_dataset, read_csv, write_csv
from badgan.models import (
    ModelBundle,
    SaturationError,
    load_checkpoint,
    median_nn_distance,
    oracle_complement_sampler,
    save_checkpoint,
)
from badgan.objectives import ConfigurationError
from badgan.trainer import (
    TrainConfig,
    TrainingDiverged,
    boundary_grid,
    evaluate,
    feature_grid,
    train,
    train_supervised,
)

DATA_FILE = "data.csv"
DENSITY_FILE = "density.txt"
CONFIG_FILE = "config.cfg"
CHECKPOINT_FILE = "checkpoint.txt"
LOG_FILE = "log.csv"
MANIFEST_FILE = "manifest.txt"
GRID_RESOLUTION = 100

ABLATION_TOKENS = ("fm", "ld", "pt", "vi", "ent")
ABLATION_COLUMNS = ("setting", "FM", "PT", "VI", "Ent", "LD", "q", "errors", "error_rate", "max_logp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="badgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument(
            "--config", type=Path, help=f"config file or preset name ({', '.join(PRESETS)})"
        )
        sp.add_argument("--seed", type=int, help="override the training seed")
        sp.add_argument("--out", type=Path, default=Path("."), help="output directory")
        sp.add_argument("--dataset", help="override the dataset (spins or circles)")

    for name in ("gen-data", "fit-density", "train"):
        common(sub.add_parser(name))
    for name in ("eval", "theory-check", "export-plots"):
        sp = sub.add_parser(name)
        sp.add_argument("--checkpoint", type=Path, required=True, help="run directory")
        sp.add_argument("--out", type=Path, help="output directory (default: the run directory)")
    abl = sub.add_parser("ablate")
    common(abl)
    abl.add_argument("--grid", required=True, help="comma list of settings, e.g. fm,fm+ld,fm+pt+ent")
    return p


# -- helpers ----------------------------------------------------------------


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config: TrainConfig | None, artifacts: list[str]) -> Path:
    lines = [f"# badgan {command}"]
    if config is not None:
        lines.append(serialize_config(config).rstrip("\n"))
        lines.append("")
    lines.append("[artifacts]")
    for name in sorted(artifacts):
        lines.append(f"{name} = {sha256_file(out / name)}")
    # training owns manifest.txt; later commands on the same run directory get their own file
    path = out / (MANIFEST_FILE if command == "train" else f"manifest-{command}.txt")
    path.write_text("\n".join(lines) + "\n")
    return path


def resolve_config(args) -> TrainConfig:
    if args.config is None:
        config = TrainConfig()
    elif not args.config.exists() and str(args.config) in PRESETS:
        config = preset(str(args.config))
    else:
        config = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    return replace(config, **overrides) if overrides else config


def dataset_for(config: TrainConfig) -> Dataset:
    return make_dataset(
        config.dataset,
        n_per_class=config.n_per_class or None,
        noise_sigma=None if config.noise_sigma < 0 else config.noise_sigma,
        n_labeled_per_class=config.n_labeled_per_class,
        test_fraction=config.test_fraction,
        seed=config.data_seed,
    )


def fit_density_for(ds: Dataset) -> dens.DensityModel:
    return dens.fit_kde(ds.training_inputs)


def run_training(config: TrainConfig, out: Path) -> dict:
    """Train one config into ``out``; returns the final log record."""
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset_for(config)
    density = fit_density_for(ds)
    bundle, log = train(config, ds, density)
    write_csv(ds, out / DATA_FILE)
    dens.save(density, out / DENSITY_FILE)
    (out / CONFIG_FILE).write_text(serialize_config(config))
    save_checkpoint(bundle, out / CHECKPOINT_FILE)
    log.write(out / LOG_FILE)
    write_manifest(out, "train", config, [DATA_FILE, DENSITY_FILE, CONFIG_FILE, CHECKPOINT_FILE, LOG_FILE])
    return log.last if log.records else {}


class Run:
    """Artifacts of a completed training run directory."""

    def __init__(self, run_dir: Path):
        run_dir = Path(run_dir)
        missing = [f for f in (CONFIG_FILE, CHECKPOINT_FILE, DATA_FILE) if not (run_dir / f).exists()]
        if missing:
            raise ConfigurationError(f"{run_dir}: missing run artifacts {missing}")
        self.dir = run_dir
        self.config = load_config(run_dir / CONFIG_FILE)
        self.bundle: ModelBundle = load_checkpoint(run_dir / CHECKPOINT_FILE)
        self.dataset = read_csv(run_dir / DATA_FILE)
        dpath = run_dir / DENSITY_FILE
        self.density = dens.load(dpath) if dpath.exists() else fit_density_for(self.dataset)

    def generated(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.config.generator_mode == "oracle_complement" or self.bundle.gen is None:
            radius = self.config.oracle_radius_factor * median_nn_distance(self.dataset.unlabeled_x)
            return oracle_complement_sampler(self.dataset.box, self.dataset.unlabeled_x, radius, n, rng)
        gen = self.bundle.gen
        return gen(gen.sample_latent(n, rng)).values


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(dataset_for(config), args.out / DATA_FILE)
    write_manifest(args.out, "gen-data", config, [DATA_FILE])
    return 0


def cmd_fit_density(args) -> int:
    config = resolve_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    data = args.out / DATA_FILE
    ds = read_csv(data) if data.exists() else dataset_for(config)
    if not data.exists():
        write_csv(ds, data)
    model = fit_density_for(ds)
    dens.save(model, args.out / DENSITY_FILE)
    write_manifest(args.out, "fit-density", config, [DATA_FILE, DENSITY_FILE])
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    rec = run_training(config, args.out)
    print(f"step {rec.get('step')} test_error_rate {rec.get('test_error_rate')}")
    return 0


def cmd_eval(args) -> int:
    run = Run(args.checkpoint)
    out = args.out or run.dir
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(run.config.seed)
    ds = run.dataset
    errors, rate = evaluate(run.bundle.disc, ds.test_x, ds.test_y)
    fake = run.generated(len(ds.test_x), rng)
    ratios = theory.assumption_ratios(run.bundle.disc, ds.test_x, fake)
    grid = boundary_grid(run.bundle.disc, ds.box, GRID_RESOLUTION)
    rows = [
        ("test_errors", errors),
        ("test_error_rate", rate),
        ("ratio_true", ratios.ratio_true),
        ("ratio_fake", ratios.ratio_fake),
        ("boundary_fake_fraction", grid.boundary_fake_fraction()),
        ("max_generated_logp", float(np.max(run.density.log_density(fake)))),
    ]
    text = "".join(f"{k} {v!r}\n" for k, v in rows)
    (out / "eval.txt").write_text(text)
    (out / "boundary_grid.csv").write_text(grid.to_csv())
    write_manifest(out, "eval", run.config, ["eval.txt", "boundary_grid.csv"])
    sys.stdout.write(text)
    return 0


def parse_setting(setting: str, base: TrainConfig) -> TrainConfig:
    """Map e.g. ``fm+pt+ent`` or ``fm+ld+q100`` onto loss weights."""
    tokens = [t for t in setting.strip().lower().split("+") if t]
    if not tokens:
        raise ConfigurationError("empty ablation setting")
    q = base.q_centile
    flags = set()
    for t in tokens:
        if t.startswith("q") and t[1:].replace(".", "", 1).isdigit():
            q = float(t[1:])
        elif t in ABLATION_TOKENS:
            flags.add(t)
        else:
            raise ConfigurationError(f"unknown ablation token {t!r} in {setting!r}")
    if "pt" in flags and "vi" in flags:
        raise ConfigurationError("pt and vi are alternative entropy terms")
    method = "pt" if "pt" in flags else "vi" if "vi" in flags else "none"
    return replace(
        base,
        generator_mode="learned",
        w_fm=1.0 if "fm" in flags else 0.0,
        w_ld=1.0 if "ld" in flags else 0.0,
        w_cond_ent=1.0 if "ent" in flags else 0.0,
        w_ent_gen=1.0 if method != "none" else 0.0,
        entropy_method=method,
        q_centile=q,
    )


def _ablation_job(job: tuple[str, str, str]) -> dict:
    setting, cfg_text, out = job
    config = parse_config(cfg_text)
    rec = run_training(config, Path(out))
    return {
        "setting": setting,
        "FM": int(config.w_fm > 0),
        "PT": int(config.entropy_method == "pt"),
        "VI": int(config.entropy_method == "vi"),
        "Ent": int(config.w_cond_ent > 0),
        "LD": int(config.w_ld > 0),
        "q": config.q_centile,
        "errors": rec.get("test_errors", ""),
        "error_rate": rec.get("test_error_rate", float("nan")),
        "max_logp": rec.get("max_logp", float("nan")),
    }


def ablation_threads() -> int:
    raw = os.environ.get("BADGAN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"BADGAN_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigurationError("BADGAN_THREADS must be >= 1")
    return n


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    settings = [s.strip() for s in args.grid.split(",") if s.strip()]
    if not settings:
        raise ConfigurationError("--grid lists no settings")
    configs = [(s, parse_setting(s, base)) for s in settings]
    args.out.mkdir(parents=True, exist_ok=True)
    jobs = [
        (s, serialize_config(c), str(args.out / s.replace("+", "_"))) for s, c in configs
    ]
    threads = min(ablation_threads(), len(jobs))
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            rows = list(pool.map(_ablation_job, jobs))
    else:
        rows = [_ablation_job(j) for j in jobs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in ABLATION_COLUMNS])
    (args.out / "ablation.csv").write_text(buf.getvalue())
    write_manifest(args.out, "ablate", base, ["ablation.csv"])
    sys.stdout.write(buf.getvalue())
    return 0


def theory_report(run: Run, n_pairs: int = 10_000, supervised_steps: int = 1000) -> theory.TheoryReport:
    cfg, ds, disc = run.config, run.dataset, run.bundle.disc
    rng = np.random.default_rng(cfg.seed)
    report = theory.TheoryReport()

    fake = run.generated(max(len(ds.test_x), 500), rng)
    ratios = theory.assumption_ratios(disc, ds.test_x, fake)
    report.add("ratio_true", ratios.ratio_true, ">= 0.9", ratios.ratio_true >= 0.9)
    report.add("ratio_fake", ratios.ratio_fake, ">= 0.9", ratios.ratio_fake >= 0.9)

    sup = train_supervised(cfg, ds, supervised_steps)
    grid, _, _ = _eval_points(ds)
    star = theory.construct_perfect_solution(sup, grid)
    report.add("perfect_p_fake_dev", star.max_p_fake_deviation, "< 1e-12", star.max_p_fake_deviation < 1e-12)
    report.add(
        "perfect_posterior_dev", star.max_posterior_deviation, "< 1e-12", star.max_posterior_deviation < 1e-12
    )
    star_test = theory.construct_perfect_solution(sup, ds.test_x)
    e_sup, _ = evaluate(sup, ds.test_x, ds.test_y)
    e_star = theory.count_errors(star_test.predict(), ds.test_y)
    report.add("perfect_error_gap", abs(e_sup - e_star), "== 0", e_sup == e_star)

    gen_f = disc.features(fake).values
    probe_f = disc.features(run.generated(500, rng)).values
    lemma = theory.lemma_bound_check(disc, probe_f, gen_f, rng=rng)
    report.add("lemma_max_violation", lemma.max_violation, "< 0", lemma.satisfied)
    report.add("lemma_triple_failures", lemma.triple_failures, "== 0", lemma.triple_failures == 0)

    test_f = disc.features(ds.test_x).values
    regions = theory.build_regions(test_f, ds.test_y)
    with np.errstate(all="ignore"):
        prop2 = theory.proposition2_check(disc, regions)
    report.add("prop2_min_fraction", prop2.min_fraction, ">= 0.97", prop2.min_fraction >= 0.97)

    all_f = np.concatenate([test_f, gen_f])
    lo, hi = theory.feature_box(all_f)
    conv = theory.convexity_probe(disc, lo, hi, n_pairs, rng)
    report.add("convexity_violations", conv.violations, "== 0", conv.violations == 0 and not conv.inconclusive)

    if regions.num_classes >= 2:
        frac = theory.disjointness_check(regions, rng=rng)
        report.add("disjoint_fraction", frac, ">= 0.99", frac >= 0.99)
    return report


def _eval_points(ds: Dataset, n: int = 10_000):
    r = int(round(np.sqrt(n)))
    xs = np.linspace(ds.box.lo[0], ds.box.hi[0], r)
    ys = np.linspace(ds.box.lo[1], ds.box.hi[1], r)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], 1), xs, ys


def cmd_theory_check(args) -> int:
    run = Run(args.checkpoint)
    out = args.out or run.dir
    out.mkdir(parents=True, exist_ok=True)
    report = theory_report(run)
    (out / "theory.txt").write_text(report.to_text())
    (out / "theory.csv").write_text(report.to_csv())
    write_manifest(out, "theory-check", run.config, ["theory.txt", "theory.csv"])
    sys.stdout.write(report.to_text())
    return 0


def cmd_export_plots(args) -> int:
    from badgan import plots

    run = Run(args.checkpoint)
    out = args.out or run.dir
    out.mkdir(parents=True, exist_ok=True)
    ds, disc = run.dataset, run.bundle.disc
    rng = np.random.default_rng(run.config.seed)
    grid = boundary_grid(disc, ds.box, GRID_RESOLUTION)
    generated = run.generated(500, rng)
    files = [
        plots.plot_data(ds, out / "data.svg").name,
        plots.plot_decision_boundary(grid, ds, out / "decision_boundary.svg").name,
        plots.plot_true_fake(grid, ds, out / "true_fake.svg").name,
        plots.plot_generated(ds, generated, out / "generated.svg").name,
    ]
    (out / "boundary_grid.csv").write_text(grid.to_csv())
    files.append("boundary_grid.csv")
    if disc.feature_dim == 2:
        tf = disc.features(ds.test_x).values
        gf = disc.features(generated).values
        lo, hi = theory.feature_box(np.concatenate([tf, gf]))
        fgrid = feature_grid(disc, lo, hi, GRID_RESOLUTION)
        files.append(plots.plot_feature_space(fgrid, tf, ds.test_y, gf, out / "feature_space.svg").name)
        (out / "feature_grid.csv").write_text(fgrid.to_csv())
        files.append("feature_grid.csv")
    write_manifest(out, "export-plots", run.config, files)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-density": cmd_fit_density,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "theory-check": cmd_theory_check,
    "export-plots": cmd_export_plots,
}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        build_parser().print_usage(sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ValueError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (TrainingDiverged, SaturationError, FloatingPointError) as exc:
        sys.stderr.write(f"runtime failure: {exc}\n")
        if isinstance(exc, TrainingDiverged):
            sys.stderr.write(f"diagnostic: {exc.record}\n")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
