"""Command-line surface: frame / simulate / fit / report / audit.

All outputs are deterministic functions of (config, seed): no timestamps,
fixed float formatting, fixed file layout. Exit codes: 0 success, 2 config
or input error, 3 statistical-quality failure (some R-hat >= 1.05).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import os
import sys

import numpy as np

from .displace import (
    JitterScheme,
    read_normalizing_table,
    write_location_records,
    write_normalizing_table,
)
from .evaluation import (
    ALL_SCENARIOS,
    Scenario,
    ScenarioResult,
    SimulationConfig,
    World,
    apply_regime,
    build_world,
    assemble_world,
    disclosure_audit,
    make_covariate_raster,
    make_demo_geography,
    make_density_raster,
    make_truth,
    run_scenario,
    simulate_outcomes,
)
from .frame import (
    Raster,
    read_ascii_grid,
    read_masterframe,
    write_ascii_grid,
    write_masterframe,
    STRATUM_NAMES,
)
from .geo import read_geography, write_geography
from .lgm import ObservationSet, write_samples

EXIT_OK, EXIT_CONFIG, EXIT_QUALITY = 0, 2, 3
RHAT_LIMIT = 1.05


class ConfigError(ValueError):
    pass


class QualityError(RuntimeError):
    pass


def _get(parser: configparser.ConfigParser, section: str, key: str, cast, default=None):
    if not parser.has_option(section, key):
        if default is not None:
            return default
        raise ConfigError(f"missing required field [{section}] {key}")
    raw = parser.get(section, key)
    try:
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"field [{section}] {key} = {raw!r}: {exc}") from exc


def load_config(path) -> tuple[SimulationConfig, dict]:
    """Parse the INI run configuration; unknown values raise ConfigError
    naming the offending field."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read(path)
    if not cp.has_section("run") or not cp.has_option("run", "seed"):
        raise ConfigError("missing required field [run] seed")
    seed = _get(cp, "run", "seed", int)

    paths = {}
    for key in ("geography", "density", "covariate"):
        if cp.has_option("inputs", key):
            p = cp.get("inputs", key)
            if not os.path.exists(p):
                raise ConfigError(f"field [inputs] {key}: file not found {p}")
            paths[key] = p

    scheme = JitterScheme(
        urban_radius=_get(cp, "scheme", "urban_radius", float, 2.0),
        rural_radii=tuple(
            float(v) for v in _get(cp, "scheme", "rural_radii", str, "5 10").split()
        ),
        rural_probs=tuple(
            float(v) for v in _get(cp, "scheme", "rural_probs", str, "0.99 0.01").split()
        ),
        restrict_to_area=_get(cp, "scheme", "restrict_to_area", bool, True),
    )
    scen_raw = _get(cp, "scenarios", "ids", str, " ".join(ALL_SCENARIOS))
    scenarios = tuple(scen_raw.split())
    for sid in scenarios:
        try:
            Scenario.from_id(sid)
        except Exception as exc:
            raise ConfigError(f"field [scenarios] ids: {exc}") from exc

    burn = _get(cp, "inference", "burn_in", int, -1)
    cfg = SimulationConfig(
        seed=seed,
        areas_per_side=_get(cp, "geometry", "areas_per_side", int, 2),
        area_side=_get(cp, "geometry", "area_side", float, 12.0),
        cellsize=_get(cp, "geometry", "cellsize", float, 1.0),
        target_urban_fraction=_get(cp, "frame", "target_urban_fraction", float, 0.35),
        eas_per_block=_get(cp, "frame", "eas_per_block", int, 125),
        clusters_per_block=_get(cp, "frame", "clusters_per_block", int, 4),
        trials=_get(cp, "frame", "trials", int, 25),
        weight_mode=_get(cp, "frame", "weight_mode", str, "uniform"),
        selection=_get(cp, "frame", "selection", str, "uniform"),
        scheme=scheme,
        mask_fraction=_get(cp, "eval", "mask_fraction", float, 0.5),
        beta0=_get(cp, "truth", "beta0", float, -1.5),
        beta1=_get(cp, "truth", "beta1", float, 0.15),
        truth_log_sd=_get(cp, "truth", "log_sd", float, float(np.log(0.7))),
        truth_range_fraction=_get(cp, "truth", "range_fraction", float, 0.3),
        mesh_spacing=_get(cp, "field", "mesh_spacing", float, 2.0),
        mesh_extension=(
            None
            if not cp.has_option("field", "mesh_extension")
            else _get(cp, "field", "mesh_extension", float)
        ),
        prior_phi_sd=(
            _get(cp, "field", "prior_sd1", float, 1.5),
            _get(cp, "field", "prior_sd2", float, 1.5),
        ),
        prior_range_fraction=_get(cp, "field", "prior_range_fraction", float, 0.2),
        grid_steps=_get(cp, "inference", "grid_steps", int, 5),
        grid_span=_get(cp, "inference", "grid_span", float, 2.5),
        posterior_draws=_get(cp, "inference", "posterior_draws", int, 1000),
        chains=_get(cp, "inference", "chains", int, 4),
        iterations=_get(cp, "inference", "iterations", int, 200),
        burn_in=None if burn < 0 else burn,
        thin=_get(cp, "inference", "thin", int, 1),
        grid_policy=_get(cp, "inference", "grid_policy", str, "every"),
        normalizer_draws=_get(cp, "inference", "normalizer_draws", int, 1000),
        aggregate_factor=_get(cp, "eval", "aggregate_factor", int, 5),
        scenarios=scenarios,
    )
    if cfg.weight_mode not in ("uniform", "pps"):
        raise ConfigError(f"field [frame] weight_mode: unknown mode {cfg.weight_mode!r}")
    if cfg.grid_policy not in ("every", "freeze"):
        raise ConfigError(f"field [inference] grid_policy: unknown policy {cfg.grid_policy!r}")
    return cfg, paths


def _load_inputs(cfg: SimulationConfig, paths: dict):
    geo = read_geography(paths["geography"]) if "geography" in paths else make_demo_geography(
        cfg.areas_per_side, cfg.area_side
    )
    density = read_ascii_grid(paths["density"]) if "density" in paths else make_density_raster(
        geo, cfg.cellsize, cfg.seed
    )
    covariate = (
        read_ascii_grid(paths["covariate"])
        if "covariate" in paths
        else make_covariate_raster(density, cfg.seed)
    )
    return geo, density, covariate


def _content_hash(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()[:16]


def _ensure_norm_table(world: World, out_dir: str):
    """Disk-cached normalizer table keyed by frame, scheme, draws, and seed."""
    cfg = world.cfg
    key = _content_hash(
        world.frame.xy.tobytes(),
        world.frame.area_id.tobytes(),
        world.frame.stratum.tobytes(),
        repr(cfg.scheme).encode(),
        str(cfg.normalizer_draws).encode(),
        str(cfg.seed).encode(),
    )
    cache_dir = os.path.join(out_dir, "cache")
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"normtable_{key}.csv")
    if os.path.exists(path):
        world.norm_table = read_normalizing_table(path)
    else:
        write_normalizing_table(world.ensure_norm_table(), path)
    return world.norm_table


def _world_from_dir(cfg: SimulationConfig, out_dir: str) -> World:
    """Reassemble the world from artifacts written by `frame`."""
    need = ["geography.txt", "density.asc", "covariate.asc", "masterframe.csv", "clusters.csv"]
    for name in need:
        if not os.path.exists(os.path.join(out_dir, name)):
            raise ConfigError(f"missing input {name} in {out_dir}; run `geomask frame` first")
    geo = read_geography(os.path.join(out_dir, "geography.txt"))
    density = read_ascii_grid(os.path.join(out_dir, "density.asc"))
    covariate = read_ascii_grid(os.path.join(out_dir, "covariate.asc"))
    frame = read_masterframe(os.path.join(out_dir, "masterframe.csv"))
    rows = []
    with open(os.path.join(out_dir, "clusters.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(int(row["ea_id"]))
    from .frame import ClusterSample

    rows = np.asarray(rows, dtype=int)
    clusters = ClusterSample(
        frame_rows=rows,
        ea_ids=frame.ea_id[rows],
        points=frame.xy[rows].copy(),
        area_id=frame.area_id[rows],
        stratum=frame.stratum[rows],
    )
    return assemble_world(cfg, geo, density, covariate, frame, clusters)


def _eval_raster(world: World, values: np.ndarray) -> Raster:
    cov = world.covariate
    return Raster(cov.xll, cov.yll, cov.cellsize, values.reshape(world.eval_shape))


def cmd_frame(cfg: SimulationConfig, paths: dict, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    geo, density, covariate = _load_inputs(cfg, paths)
    world = build_world(cfg, geo, density, covariate)
    write_geography(world.geo, os.path.join(out_dir, "geography.txt"))
    write_ascii_grid(world.density, os.path.join(out_dir, "density.asc"))
    write_ascii_grid(world.covariate, os.path.join(out_dir, "covariate.asc"))
    write_ascii_grid(
        Raster(world.density.xll, world.density.yll, world.density.cellsize,
               world.strata.astype(float)),
        os.path.join(out_dir, "strata.asc"),
    )
    write_masterframe(world.frame, os.path.join(out_dir, "masterframe.csv"))
    with open(os.path.join(out_dir, "clusters.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "ea_id", "area_id", "stratum", "x", "y"])
        for k in range(len(world.clusters)):
            w.writerow(
                [
                    k,
                    world.clusters.ea_ids[k],
                    world.clusters.area_id[k],
                    STRATUM_NAMES[int(world.clusters.stratum[k])],
                    f"{world.clusters.points[k, 0]:.17g}",
                    f"{world.clusters.points[k, 1]:.17g}",
                ]
            )
    with open(os.path.join(out_dir, "frame.log"), "w") as fh:
        fh.write(f"seed {cfg.seed}\n")
        for (i, j), idx in world.frame.blocks.items():
            fh.write(f"block area={i} stratum={STRATUM_NAMES[j]} eas={len(idx)}\n")
        fh.write(f"total_eas {len(world.frame)}\n")
        fh.write(f"total_clusters {len(world.clusters)}\n")
    return EXIT_OK


def cmd_simulate(cfg: SimulationConfig, out_dir: str) -> int:
    world = _world_from_dir(cfg, out_dir)
    truth = make_truth(world, cfg.seed)
    obs = simulate_outcomes(truth, world, np.random.default_rng((cfg.seed, 41)))
    with open(os.path.join(out_dir, "truth_params.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value"])
        w.writerow(["beta0", f"{truth.beta0:.17g}"])
        w.writerow(["beta1", f"{truth.beta1:.17g}"])
        w.writerow(["phi1", f"{truth.phi[0]:.17g}"])
        w.writerow(["phi2", f"{truth.phi[1]:.17g}"])
    with open(os.path.join(out_dir, "truth_w.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "w"])
        for m, v in enumerate(truth.w):
            w.writerow([m, f"{v:.17g}"])
    for name in ("field", "logit", "prob"):
        write_ascii_grid(
            _eval_raster(world, truth.surfaces[name]),
            os.path.join(out_dir, f"truth_{name}.asc"),
        )
    with open(os.path.join(out_dir, "observations.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "y", "n"])
        for k in range(len(obs.y)):
            w.writerow([k, int(obs.y[k]), int(obs.trials[k])])
    for family, regime in (("exact", "exact"), ("jittered", "jittered-DA"), ("masked", "masked-DA")):
        data = apply_regime(
            world.clusters, regime, world.geo, world.frame, cfg.scheme,
            seed=cfg.seed, mask_fraction=cfg.mask_fraction,
        )
        write_location_records(data.records, os.path.join(out_dir, f"records_{family}.csv"))
    return EXIT_OK


def _load_observations(world: World, out_dir: str) -> ObservationSet:
    path = os.path.join(out_dir, "observations.csv")
    if not os.path.exists(path):
        raise ConfigError(f"missing input observations.csv in {out_dir}; run `geomask simulate` first")
    ys, ns = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ys.append(float(row["y"]))
            ns.append(float(row["n"]))
    return ObservationSet(
        y=np.asarray(ys), trials=np.asarray(ns), points=world.clusters.points,
        covariate=world.cluster_z, stratum=world.clusters.stratum,
    )


def _write_scenario_outputs(world: World, result: ScenarioResult, scen_dir: str):
    os.makedirs(scen_dir, exist_ok=True)
    with open(os.path.join(scen_dir, "params.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "median", "q025", "q975"])
        for name, (med, lo, hi) in result.param_summary.items():
            w.writerow([name, f"{med:.17g}", f"{lo:.17g}", f"{hi:.17g}"])
    with open(os.path.join(scen_dir, "diagnostics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "rhat"])
        for name, val in result.rhats.items():
            w.writerow([name, f"{val:.17g}"])
    with open(os.path.join(scen_dir, "mse.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["surface", "resolution", "mse", "bias2", "variance"])
        for row in result.mse_rows:
            w.writerow(
                [row.surface, row.resolution, f"{row.mse:.17g}", f"{row.bias2:.17g}",
                 f"{row.variance:.17g}"]
            )
    with open(os.path.join(scen_dir, "disclosure.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["cluster_id", "kind", "candidates", "top_prob", "ratio", "unique", "p95",
             "ratio5", "ratio2"]
        )
        for r in result.disclosure:
            w.writerow(
                [r.cluster_id, r.kind, r.candidates, f"{r.top_prob:.17g}",
                 f"{r.ratio:.17g}", int(r.unique), int(r.p95), int(r.ratio5), int(r.ratio2)]
            )
    with open(os.path.join(scen_dir, "location_posteriors.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "ea_id", "probability"])
        for cid in sorted(result.location_posteriors):
            ids, probs = result.location_posteriors[cid]
            for e, p in zip(ids, probs):
                w.writerow([cid, int(e), f"{p:.17g}"])
    summaries = result.surfaces(world)
    for key in ("prob_q2.5", "prob_q50", "prob_q97.5", "field_q2.5", "field_q50", "field_q97.5"):
        if key in summaries:
            write_ascii_grid(
                _eval_raster(world, summaries[key]),
                os.path.join(scen_dir, key.replace(".", "_") + ".asc"),
            )


def cmd_fit(cfg: SimulationConfig, out_dir: str, scenario_id: str) -> int:
    scenario = Scenario.from_id(scenario_id)
    world = _world_from_dir(cfg, out_dir)
    if scenario.regime == "jittered-DA":
        _ensure_norm_table(world, out_dir)
    truth = make_truth(world, cfg.seed)
    obs = _load_observations(world, out_dir)
    result = run_scenario(world, truth, obs, scenario, cfg.seed)
    scen_dir = os.path.join(out_dir, f"scenario_{scenario.id}")
    _write_scenario_outputs(world, result, scen_dir)
    # per-chain sample stores
    per_chain = np.array_split(np.arange(len(result.beta_draws)), cfg.chains)
    for c, idx in enumerate(per_chain):
        write_samples(
            os.path.join(scen_dir, f"samples_chain{c + 1}.csv"),
            result.beta_draws[idx], result.phi_draws[idx], result.w_draws[idx],
        )
    worst = result.worst_rhat
    if worst >= RHAT_LIMIT:
        raise QualityError(
            f"scenario {scenario.id}: max R-hat {worst:.3f} >= {RHAT_LIMIT}; "
            f"diagnostics written to {scen_dir}"
        )
    return EXIT_OK


def cmd_report(out_dir: str) -> int:
    scen_dirs = sorted(
        d for d in os.listdir(out_dir)
        if d.startswith("scenario_") and os.path.isdir(os.path.join(out_dir, d))
    ) if os.path.isdir(out_dir) else []
    if not scen_dirs:
        raise ConfigError(f"no scenario outputs under {out_dir}")
    rep_dir = os.path.join(out_dir, "report")
    os.makedirs(rep_dir, exist_ok=True)
    with open(os.path.join(rep_dir, "params_all.csv"), "w", newline="") as out:
        w = csv.writer(out)
        w.writerow(["scenario", "parameter", "median", "q025", "q975"])
        for d in scen_dirs:
            sid = d.removeprefix("scenario_")
            with open(os.path.join(out_dir, d, "params.csv"), newline="") as fh:
                for row in csv.DictReader(fh):
                    w.writerow([sid, row["parameter"], row["median"], row["q025"], row["q975"]])
    with open(os.path.join(rep_dir, "mse_all.csv"), "w", newline="") as out:
        w = csv.writer(out)
        w.writerow(["scenario", "surface", "resolution", "mse", "bias2", "variance"])
        for d in scen_dirs:
            sid = d.removeprefix("scenario_")
            with open(os.path.join(out_dir, d, "mse.csv"), newline="") as fh:
                for row in csv.DictReader(fh):
                    w.writerow(
                        [sid, row["surface"], row["resolution"], row["mse"], row["bias2"],
                         row["variance"]]
                    )
    with open(os.path.join(rep_dir, "disclosure_all.csv"), "w", newline="") as out:
        w = csv.writer(out)
        w.writerow(["scenario", "cluster_id", "kind", "candidates", "top_prob", "ratio",
                    "unique", "p95", "ratio5", "ratio2"])
        for d in scen_dirs:
            sid = d.removeprefix("scenario_")
            path = os.path.join(out_dir, d, "disclosure.csv")
            if not os.path.exists(path):
                continue
            with open(path, newline="") as fh:
                for row in csv.DictReader(fh):
                    w.writerow([sid] + [row[k] for k in
                                        ("cluster_id", "kind", "candidates", "top_prob",
                                         "ratio", "unique", "p95", "ratio5", "ratio2")])
    return EXIT_OK


def cmd_audit(cfg: SimulationConfig, out_dir: str, scenario_id: str) -> int:
    scenario = Scenario.from_id(scenario_id)
    world = _world_from_dir(cfg, out_dir)
    regime_data = apply_regime(
        world.clusters, scenario.regime, world.geo, world.frame, cfg.scheme,
        seed=cfg.seed, mask_fraction=cfg.mask_fraction,
    )
    posteriors = {}
    post_path = os.path.join(out_dir, f"scenario_{scenario.id}", "location_posteriors.csv")
    if os.path.exists(post_path):
        by_cluster: dict[int, list[tuple[int, float]]] = {}
        with open(post_path, newline="") as fh:
            for row in csv.DictReader(fh):
                by_cluster.setdefault(int(row["cluster_id"]), []).append(
                    (int(row["ea_id"]), float(row["probability"]))
                )
        for cid, pairs in by_cluster.items():
            ids = np.array([p[0] for p in pairs])
            probs = np.array([p[1] for p in pairs])
            posteriors[cid] = (ids, probs)
    rows = disclosure_audit(regime_data, world.clusters, world.frame, cfg.scheme,
                            posteriors or None)
    audit_path = os.path.join(out_dir, f"audit_{scenario.id}.csv")
    with open(audit_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "kind", "candidates", "top_prob", "ratio", "unique",
                    "p95", "ratio5", "ratio2"])
        for r in rows:
            w.writerow([r.cluster_id, r.kind, r.candidates, f"{r.top_prob:.17g}",
                        f"{r.ratio:.17g}", int(r.unique), int(r.p95), int(r.ratio5),
                        int(r.ratio2)])
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geomask",
                                 description="Spatial inference for jittered or masked cluster surveys")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("frame", "simulate", "fit", "report", "audit"):
        p = sub.add_parser(name)
        if name != "report":
            p.add_argument("--config", required=True)
            p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        if name in ("fit", "audit"):
            p.add_argument("--scenario", required=True)
        if name == "fit":
            p.add_argument("--chains", type=int, default=None)
            p.add_argument("--iterations", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.out)
        cfg, paths = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "fit":
            if args.chains is not None:
                cfg.chains = args.chains
            if args.iterations is not None:
                cfg.iterations = args.iterations
        if args.command == "frame":
            return cmd_frame(cfg, paths, args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.command == "fit":
            return cmd_fit(cfg, args.out, args.scenario)
        if args.command == "audit":
            return cmd_audit(cfg, args.out, args.scenario)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except QualityError as exc:
        print(f"quality: {exc}", file=sys.stderr)
        return EXIT_QUALITY


if __name__ == "__main__":
    sys.exit(main())
