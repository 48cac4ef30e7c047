"""Command-line entry point for reproducible experiment runs.

Subcommands: `generate` (synthetic tripod data), `train` (composition or
direct mode), `oracle-check` (exact equality checks on tiny instances),
`gradcheck` (analytic-vs-numeric gradient suite), `export` (CSV/PLY
conversion plus a manifest for the plotting component).

Exit codes: 0 success, 2 config error, 3 solver failure, 4 oracle/gradient
check failure, 5 I/O failure.
"""

from __future__ import annotations

import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import click
import numpy as np

from . import datagen
from .geometry import (PointCloud, RigidTransform, ShearTransform, apply_rigid,
                       apply_linear, random_rotation, random_shear, pairwise_cost,
                       cross_cost, write_cloud_csv, read_cloud_csv, write_cloud_ply,
                       read_cloud_ply)
from .kernels import sinkhorn, sinkhorn_divergence, distortion_sq
from .nets import (init_orthogonal, forward, backward, save_checkpoint,
                   load_checkpoint)
from .oracle import (reference_equivalence_check, composition_optimality_check,
                     finite_diff, SizeLimitError)
from .training import (TrainConfig, TrainLog, TrainingDiverged, PRESETS,
                       pretrain_isomorphism, train_composition, train_direct,
                       evaluate)

EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_ORACLE = 4
EXIT_IO = 5


class ConfigError(ValueError):
    pass


class MissingFilesError(FileNotFoundError):
    pass


@dataclass
class ExperimentSpec:
    """Everything needed to regenerate a dataset, recorded with its outputs."""

    shape: str = "s_curve"
    n_total: int = 2048
    n_eval: int = 1024
    noise: float = 0.05
    seed: int = 0
    rigid_seed: int | None = None
    shear_seed: int | None = None
    shear_magnitude: float = 0.5
    shear_diag: tuple[float, float] | None = None
    formats: tuple[str, ...] = ("csv", "ply")

    def __post_init__(self):
        if self.shape not in datagen.GENERATORS:
            raise ConfigError(f"unknown generator {self.shape!r}; "
                              f"choose from {datagen.GENERATORS}")
        if self.n_total < 2 or self.n_eval < 0:
            raise ConfigError("need n_total >= 2 and n_eval >= 0")
        if self.rigid_seed is None:
            self.rigid_seed = self.seed + 1
        if self.shear_seed is None:
            self.shear_seed = self.seed + 2
        if self.shear_diag is not None:
            self.shear_diag = (float(self.shear_diag[0]), float(self.shear_diag[1]))
            if not 0 < self.shear_diag[0] <= self.shear_diag[1]:
                raise ConfigError(f"invalid shear_diag range {self.shear_diag}")
        self.formats = tuple(self.formats)
        for f in self.formats:
            if f not in ("csv", "ply"):
                raise ConfigError(f"unknown export format {f!r}")


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(spec: ExperimentSpec, out_dir: str) -> dict:
    """Generate the tripod dataset: source X, rigid reference Z, sheared
    target Y (train + held-out rows concatenated), with the transforms and
    the full spec recorded next to the point files."""
    os.makedirs(out_dir, exist_ok=True)
    n = spec.n_total + spec.n_eval
    pts = datagen.make_cloud(spec.shape, n, spec.noise, spec.seed)
    x_cloud = PointCloud.uniform(pts)
    rigid = random_rotation(3, spec.rigid_seed)
    shear = random_shear(3, spec.shear_magnitude, spec.shear_seed,
                         diag_range=spec.shear_diag)
    z_cloud = apply_rigid(x_cloud, rigid)
    y_cloud = apply_linear(z_cloud, shear)

    files: dict[str, str] = {}
    for name, cloud in (("X", x_cloud), ("Z", z_cloud), ("Y", y_cloud)):
        if "csv" in spec.formats:
            path = os.path.join(out_dir, f"{name}.csv")
            write_cloud_csv(cloud, path)
            files[f"{name}_csv"] = path
        if "ply" in spec.formats:
            path = os.path.join(out_dir, f"{name}.ply")
            write_cloud_ply(cloud, path)
            files[f"{name}_ply"] = path

    transforms = {
        "rotation": rigid.rotation.tolist(),
        "translation": rigid.translation.tolist(),
        "shear": shear.matrix.tolist(),
        "seed": spec.seed,
        "rigid_seed": spec.rigid_seed,
        "shear_seed": spec.shear_seed,
        "shear_magnitude": spec.shear_magnitude,
        "shear_diag": list(spec.shear_diag) if spec.shear_diag else None,
        "n_total": spec.n_total,
        "n_eval": spec.n_eval,
        "shape": spec.shape,
        "noise": spec.noise,
    }
    _write_json(os.path.join(out_dir, "transforms.json"), transforms)
    _write_json(os.path.join(out_dir, "experiment.json"), asdict(spec) | {
        "formats": list(spec.formats),
        "shear_diag": list(spec.shear_diag) if spec.shear_diag else None})
    files["transforms"] = os.path.join(out_dir, "transforms.json")
    return files


def _load_dataset(data_dir: str):
    needed = [os.path.join(data_dir, f"{n}.csv") for n in ("X", "Z", "Y")]
    needed.append(os.path.join(data_dir, "transforms.json"))
    missing = [p for p in needed if not os.path.exists(p)]
    if missing:
        raise MissingFilesError(
            f"data directory {data_dir} is missing: {', '.join(missing)}")
    with open(needed[-1]) as fh:
        transforms = json.load(fh)
    clouds = tuple(read_cloud_csv(p) for p in needed[:3])
    return clouds, transforms


def _net_seeds(cfg: TrainConfig) -> tuple[int, int, int]:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[0])
    return tuple(int(s) for s in rng.integers(0, 2 ** 31 - 1, size=3))


def _apply_map(nets: list, points: np.ndarray) -> np.ndarray:
    out = points
    for net in nets:
        out = forward(net, out)
    return out


def cmd_train(data_dir: str, out_dir: str, mode: str, cfg: TrainConfig) -> dict:
    """Train in `composition` or `direct` mode and write checkpoints,
    train_log.csv, summary.json, and mapped point files."""
    if mode not in ("composition", "direct"):
        raise ConfigError(f"unknown mode {mode!r}")
    (x_all, z_all, y_all), transforms = _load_dataset(data_dir)
    n_rows = x_all.n
    if transforms["n_total"] != cfg.n_total or transforms["n_eval"] != cfg.n_eval:
        raise ConfigError(
            f"dataset has n_total={transforms['n_total']}, n_eval={transforms['n_eval']} "
            f"but the config wants {cfg.n_total}+{cfg.n_eval}")
    if n_rows != cfg.n_total + cfg.n_eval:
        raise ConfigError(f"dataset has {n_rows} rows, expected "
                          f"{cfg.n_total + cfg.n_eval}")

    split = cfg.n_total
    x_train = PointCloud.uniform(x_all.points[:split])
    z_train = PointCloud.uniform(z_all.points[:split])
    y_train = PointCloud.uniform(y_all.points[:split])
    x_eval = x_all.points[split:]
    y_eval = y_all.points[split:]

    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.json"))
    dims = [3, *cfg.hidden_dims, 3]
    iso_seed, transport_seed, direct_seed = _net_seeds(cfg)
    log = TrainLog()
    t_start = time.perf_counter()
    checkpoints: dict[str, str] = {}

    try:
        ident = cfg.identity_init_transport
        if mode == "composition":
            iso = init_orthogonal(dims, residual=True, seed=iso_seed)
            transport = init_orthogonal(dims, residual=ident, seed=transport_seed,
                                        zero_final_layer=ident)
            pretrain_isomorphism(iso, x_train, z_train, cfg, log=log)
            train_composition(iso, transport, x_train, z_train, y_train, cfg, log=log)
            nets = [iso, transport]
            for name, net in (("iso", iso), ("transport", transport)):
                path = os.path.join(out_dir, f"{name}.json")
                save_checkpoint(net, path)
                checkpoints[name] = path
        else:
            direct = init_orthogonal(dims, residual=ident, seed=direct_seed,
                                     zero_final_layer=ident)
            train_direct(direct, x_train, y_train, cfg, iters=cfg.direct_iters, log=log)
            nets = [direct]
            path = os.path.join(out_dir, "direct.json")
            save_checkpoint(direct, path)
            checkpoints["direct"] = path
    except TrainingDiverged as exc:
        for name, net in exc.last_good.items():
            save_checkpoint(net, os.path.join(out_dir, f"{name}_last_good.json"))
        raise

    runtime = time.perf_counter() - t_start
    mapped_all = _apply_map(nets, x_all.points)
    mapped_cloud = PointCloud.uniform(mapped_all)
    write_cloud_csv(mapped_cloud, os.path.join(out_dir, "mapped_points.csv"))
    write_cloud_ply(mapped_cloud, os.path.join(out_dir, "mapped_points.ply"))
    log.write_csv(os.path.join(out_dir, "train_log.csv"))

    # primary metric: divergence between the mapped full training cloud and
    # the full target training cloud; the held-out split is reported too
    # (held-out pairs cannot beat the independent-sample floor whenever the
    # learned map is a relabeled optimum, so it is informational)
    eval_train = evaluate(mapped_all[:split], y_train.points, cfg)
    eval_holdout = (evaluate(mapped_all[split:], y_eval, cfg)
                    if cfg.n_eval > 0 else eval_train)

    summary = {
        "mode": mode,
        "seed": cfg.seed,
        "eval_divergence": eval_train,
        "eval_divergence_holdout": eval_holdout,
        "runtime_seconds": runtime,
        "total_steps": len(log.records),
        "final_fitting_loss": log.records[-1].fitting_loss if log.records else None,
        "final_gm_gap": log.records[-1].gm_gap if log.records else None,
        "final_total_loss": log.records[-1].total_loss if log.records else None,
        "checkpoints": checkpoints,
        "data_dir": os.path.abspath(data_dir),
        "config": cfg.to_dict(),
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def cmd_oracle_check(seeds: list[int], n: int, instances: int, out_path: str,
                     tolerance: float = 1e-9) -> dict:
    """Exact rigid-reference equality and composition optimality on seeded
    random instances; writes a JSON report, fails on any residual above
    tolerance."""
    if n > 8:
        raise SizeLimitError(f"n={n} exceeds the enumeration guard n <= 8")
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for k in range(instances):
            sub = int(rng.integers(0, 2 ** 31 - 1))
            x = PointCloud.uniform(np.random.default_rng(sub).normal(size=(n, 3)))
            rigid = random_rotation(3, sub + 1)
            y = PointCloud.uniform(np.random.default_rng(sub + 2).normal(size=(n, 3)))
            eq = reference_equivalence_check(x, rigid, y, tolerance=tolerance)
            comp = composition_optimality_check(x, rigid, y, tolerance=tolerance)
            results.append({
                "seed": seed,
                "instance": k,
                "equivalence": eq.to_dict(),
                "composition": comp.to_dict(),
            })
    passed = all(r["equivalence"]["passed"] and r["composition"]["passed"]
                 for r in results)
    report = {
        "n": n,
        "instances_per_seed": instances,
        "seeds": list(seeds),
        "tolerance": tolerance,
        "passed": passed,
        "max_equivalence_residual": max(r["equivalence"]["residual"] for r in results),
        "max_composition_residual": max(r["composition"]["residual"] for r in results),
        "results": results,
    }
    if out_path:
        _write_json(out_path, report)
    return report


def cmd_gradcheck(out_path: str, seed: int = 0) -> dict:
    """Analytic-vs-central-difference gradient suite at the documented
    tolerances; writes a JSON report."""
    rng = np.random.default_rng(seed)
    checks = []

    def record(name, rel_err, tol):
        checks.append({"name": name, "max_rel_err": float(rel_err),
                       "tolerance": tol, "passed": bool(rel_err <= tol)})

    # distortion gradient (closed form): 1e-6
    for metric in ("sq_euclidean", "euclidean"):
        src = PointCloud.uniform(rng.normal(size=(10, 3)))
        mapped = PointCloud.uniform(rng.normal(size=(10, 3)))
        cx = pairwise_cost(src, metric, "none")
        res = distortion_sq(cx, mapped)

        def dis_value(flat, cx=cx, shape=mapped.points.shape):
            return distortion_sq(cx, PointCloud.uniform(flat.reshape(shape)),
                                 with_grad=False).value

        num = finite_diff(dis_value, mapped.points, step=1e-6)
        rel = np.abs(res.grad_mapped - num).max() / max(np.abs(num).max(), 1e-12)
        record(f"distortion_{metric}", rel, 1e-6)

    # envelope gradients at solver tol 1e-9: 1e-3
    a = PointCloud.uniform(0.5 * rng.normal(size=(8, 3)))
    b = PointCloud.uniform(0.5 * rng.normal(size=(8, 3)))
    kw = dict(max_iter=100000, tol=1e-9, anneal=True, stabilized=True)

    div = sinkhorn_divergence(a, b, "sq_euclidean", 0.1, **kw)

    def div_value(flat):
        return sinkhorn_divergence(PointCloud.uniform(flat.reshape(a.points.shape)),
                                   b, "sq_euclidean", 0.1, with_grads=False,
                                   **kw).value

    num = finite_diff(div_value, a.points, step=1e-5)
    rel = np.abs(div.grad_a - num).max() / max(np.abs(num).max(), 1e-12)
    record("sinkhorn_divergence_envelope", rel, 1e-3)

    c = cross_cost(a, b, "euclidean", "none").values
    ot = sinkhorn(c, a.weights, b.weights, 0.01, source_points=a.points,
                  target_points=b.points, metric="euclidean", **kw)

    def reg_value(flat):
        cc = cross_cost(PointCloud.uniform(flat.reshape(a.points.shape)), b,
                        "euclidean", "none").values
        return sinkhorn(cc, a.weights, b.weights, 0.01, **kw).reg_cost

    num = finite_diff(reg_value, a.points, step=1e-5)
    rel = np.abs(ot.grad_source - num).max() / max(np.abs(num).max(), 1e-12)
    record("entropic_wasserstein_envelope", rel, 1e-3)

    # MLP backprop on 20 random coordinates: 1e-5
    net = init_orthogonal([3, 16, 8, 3], residual=True, seed=seed + 1)
    x = rng.normal(size=(12, 3))
    y = rng.normal(size=(12, 3))
    out = forward(net, x)
    upstream = 2.0 * (out - y) / 12
    grads = backward(net, upstream)
    analytic = np.concatenate([g.ravel() for g in grads.weights]
                              + [g.ravel() for g in grads.biases])
    flat0 = net.flat_params()

    def net_loss(flat):
        probe = net.copy()
        probe.set_flat_params(flat)
        return float(np.sum((forward(probe, x) - y) ** 2) / 12)

    coords = rng.choice(flat0.size, size=20, replace=False)
    num = finite_diff(net_loss, flat0, step=1e-5, indices=coords)
    rel = np.max(np.abs(analytic[coords] - num) / np.maximum(np.abs(num), 1e-8))
    record("mlp_backprop", rel, 1e-5)

    report = {"seed": seed, "passed": all(c["passed"] for c in checks),
              "checks": checks}
    if out_path:
        _write_json(out_path, report)
    return report


def cmd_export(run_dir: str, fmt: str = "both") -> dict:
    """Convert point files between CSV and PLY and write a manifest naming
    the comparison panels (target / composed / direct) plus logs and
    summaries for the plotting component."""
    if fmt not in ("csv", "ply", "both"):
        raise ConfigError(f"unknown format {fmt!r}")
    if not os.path.isdir(run_dir):
        raise MissingFilesError(f"run directory {run_dir} does not exist")

    point_files: dict[str, str] = {}
    for name in ("X", "Z", "Y"):
        csv_path = os.path.join(run_dir, f"{name}.csv")
        ply_path = os.path.join(run_dir, f"{name}.ply")
        if not os.path.exists(csv_path) and not os.path.exists(ply_path):
            raise MissingFilesError(
                f"{run_dir} has neither {name}.csv nor {name}.ply; expected the "
                f"outputs of `gmot generate` (X/Z/Y point files)")
        if os.path.exists(csv_path):
            cloud = read_cloud_csv(csv_path)
            if fmt in ("ply", "both") and not os.path.exists(ply_path):
                write_cloud_ply(cloud, ply_path)
        else:
            cloud = read_cloud_ply(ply_path)
            if fmt in ("csv", "both"):
                write_cloud_csv(cloud, csv_path)
        point_files[name] = csv_path if os.path.exists(csv_path) else ply_path

    manifest = {
        "run_dir": os.path.abspath(run_dir),
        "source": point_files["X"],
        "reference": point_files["Z"],
        "target": point_files["Y"],
        "panels": {"target": point_files["Y"]},
        "train_logs": {},
        "summaries": {},
    }
    for mode, key in (("composition", "composed"), ("direct", "direct")):
        mode_dir = os.path.join(run_dir, mode)
        mapped = os.path.join(mode_dir, "mapped_points.csv")
        if os.path.exists(mapped):
            manifest["panels"][key] = mapped
            if fmt in ("ply", "both"):
                ply_path = os.path.join(mode_dir, "mapped_points.ply")
                if not os.path.exists(ply_path):
                    write_cloud_ply(read_cloud_csv(mapped), ply_path)
        for fname, field in (("train_log.csv", "train_logs"),
                             ("summary.json", "summaries")):
            path = os.path.join(mode_dir, fname)
            if os.path.exists(path):
                manifest[field][mode] = path
    transforms = os.path.join(run_dir, "transforms.json")
    if os.path.exists(transforms):
        manifest["transforms"] = transforms
    out_path = os.path.join(run_dir, "manifest.json")
    _write_json(out_path, manifest)
    manifest["manifest_path"] = out_path
    return manifest


# ---------------------------------------------------------------------------
# click wiring
# ---------------------------------------------------------------------------

def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, SizeLimitError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except MissingFilesError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    except TrainingDiverged as exc:
        click.echo(f"solver failure: {exc}", err=True)
        sys.exit(EXIT_SOLVER)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)


@click.group()
def main():
    """Distortion-minimizing transport-map experiments."""


@main.command("generate")
@click.option("--shape", default="s_curve", show_default=True,
              type=click.Choice(datagen.GENERATORS))
@click.option("--n-total", default=2048, show_default=True, type=int)
@click.option("--n-eval", default=1024, show_default=True, type=int)
@click.option("--noise", default=0.05, show_default=True, type=float)
@click.option("--seed", required=True, type=int)
@click.option("--rigid-seed", default=None, type=int)
@click.option("--shear-seed", default=None, type=int)
@click.option("--shear-magnitude", default=0.5, show_default=True, type=float)
@click.option("--shear-diag", nargs=2, type=float, default=None,
              help="Anisotropic diagonal scaling range composed with the shear.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--formats", default="csv,ply", show_default=True)
def generate_cmd(shape, n_total, n_eval, noise, seed, rigid_seed, shear_seed,
                 shear_magnitude, shear_diag, out_dir, formats):
    """Write the synthetic source/reference/target point clouds."""
    def go():
        spec = ExperimentSpec(shape=shape, n_total=n_total, n_eval=n_eval,
                              noise=noise, seed=seed, rigid_seed=rigid_seed,
                              shear_seed=shear_seed, shear_magnitude=shear_magnitude,
                              shear_diag=shear_diag,
                              formats=tuple(formats.split(",")))
        files = cmd_generate(spec, out_dir)
        click.echo(f"wrote {len(files)} files to {out_dir}")
    _run(go)


def _train_one(args):
    data_dir, out_dir, mode, cfg_dict = args
    cfg = TrainConfig.from_dict(cfg_dict)
    return cmd_train(data_dir, out_dir, mode, cfg)


@main.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--mode", default="composition", show_default=True,
              type=click.Choice(["composition", "direct"]))
@click.option("--preset", default="desk", show_default=True,
              type=click.Choice(sorted(PRESETS)))
@click.option("--config", "config_path", default=None, type=click.Path(),
              help="JSON TrainConfig overriding the preset entirely.")
@click.option("--seed", "seeds", required=True, multiple=True, type=int)
@click.option("--jobs", default=1, show_default=True, type=int)
def train_cmd(data_dir, out_dir, mode, preset, config_path, seeds, jobs):
    """Train the composition map or the direct baseline on generated data."""
    def go():
        tasks = []
        for seed in seeds:
            if config_path is not None:
                cfg = TrainConfig.load(config_path)
                cfg.seed = seed
            else:
                cfg = PRESETS[preset](seed=seed)
            base = out_dir or os.path.join(data_dir, mode)
            dest = base if len(seeds) == 1 else os.path.join(base, f"seed_{seed}")
            tasks.append((data_dir, dest, mode, cfg.to_dict()))
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                summaries = list(pool.map(_train_one, tasks))
        else:
            summaries = [_train_one(t) for t in tasks]
        for s in summaries:
            click.echo(f"seed {s['seed']} [{s['mode']}]: "
                       f"eval_divergence={s['eval_divergence']:.6f} "
                       f"({s['runtime_seconds']:.1f}s)")
    _run(go)


@main.command("oracle-check")
@click.option("--seed", "seeds", multiple=True, type=int, default=(0,),
              show_default=True)
@click.option("--n", default=6, show_default=True, type=int)
@click.option("--instances", default=50, show_default=True, type=int)
@click.option("--out", "out_path", default="oracle_report.json", show_default=True,
              type=click.Path())
def oracle_check_cmd(seeds, n, instances, out_path):
    """Brute-force equality checks; nonzero exit on any failure."""
    report = _run(cmd_oracle_check, list(seeds), n, instances, out_path)
    click.echo(f"oracle-check: {'PASS' if report['passed'] else 'FAIL'} "
               f"(max residuals: eq={report['max_equivalence_residual']:.2e}, "
               f"comp={report['max_composition_residual']:.2e})")
    if not report["passed"]:
        sys.exit(EXIT_ORACLE)


@main.command("gradcheck")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", default="gradcheck_report.json",
              show_default=True, type=click.Path())
def gradcheck_cmd(seed, out_path):
    """Gradient suite: analytic vs central finite differences."""
    report = _run(cmd_gradcheck, out_path, seed=seed)
    for c in report["checks"]:
        click.echo(f"  {c['name']}: rel_err={c['max_rel_err']:.2e} "
                   f"tol={c['tolerance']} {'ok' if c['passed'] else 'FAIL'}")
    if not report["passed"]:
        sys.exit(EXIT_ORACLE)


@main.command("export")
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--format", "fmt", default="both", show_default=True,
              type=click.Choice(["csv", "ply", "both"]))
def export_cmd(run_dir, fmt):
    """Convert CSV/PLY point files and write the plotting manifest."""
    manifest = _run(cmd_export, run_dir, fmt)
    click.echo(f"manifest: {manifest['manifest_path']} "
               f"(panels: {sorted(manifest['panels'])})")


if __name__ == "__main__":
    main()
