#
# Copyright (C) 2025-2026
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.
#

import argparse
import logging
import os.path as op
import sys
from typing import List, Optional

import numpy as np
import pandas as pd
import yaml
from filelock import Timeout
from pydantic import BaseModel, validator

from . import dataset, experiments, predictive
from .baselines import covariance_estimators
from .inference import FitOptions, fit, get_embeddings, infer_posteriors, load_model, save_model
from .linalg import NumericalError
from .selection import select_rank
from .simulate import load_preset, save_truth, simulate
from .utils import metadata_header, output_lock, parse_ranks, write_csv, write_matrix_csv

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

_fit_flags = dict(
    tol="rel_tol",
    max_iters="max_outer_iters",
    inner_tol="inner_tol",
    max_inner_iters="max_inner_iters",
    jitter="jitter",
    init_scale="init_scale",
    seed="seed",
)


class RunConfig(BaseModel):
    command: str
    out: str
    data: Optional[str] = None
    seed: int = 0
    rank: Optional[int] = None
    ranks: Optional[List[int]] = None
    selected: Optional[str] = None
    threshold: float = 0.95
    scope: str = "intra"
    signed: bool = False
    mean_tol: float = 1e-4
    top: Optional[int] = None
    methods: List[str] = ["empirical", "ledoit_wolf", "proposed"]
    preset: str = "community"
    overrides: dict = {}
    seeds: int = 10
    experiment: str = "table"
    models: List[str] = []
    filter_zero: bool = False
    groups: Optional[str] = None
    shared_only: bool = False
    drop_sentinel: bool = False

    @validator("rank")
    def _rank(cls, v):
        if v is not None and v < 1:
            raise ValueError("rank must be at least 1")
        return v

    @validator("ranks")
    def _ranks(cls, v):
        if v is not None and (not v or min(v) < 1):
            raise ValueError("ranks must be a non-empty list of positive integers")
        return v

    @validator("threshold")
    def _threshold(cls, v):
        if not 0 < v <= 1:
            raise ValueError("threshold must lie in (0, 1]")
        return v

    @validator("mean_tol")
    def _mean_tol(cls, v):
        if v < 0:
            raise ValueError("mean tolerance must be non-negative")
        return v

    @validator("top")
    def _top(cls, v):
        if v is not None and v < 1:
            raise ValueError("top must be at least 1")
        return v

    @validator("scope")
    def _scope(cls, v):
        if v not in ("intra", "inter"):
            raise ValueError("scope must be intra or inter")
        return v

    @validator("methods", each_item=True)
    def _method(cls, v):
        if v not in covariance_estimators:
            raise ValueError(f"unknown method {v!r}, choose from {sorted(covariance_estimators)}")
        return v

    @validator("seeds")
    def _seeds(cls, v):
        if v < 1:
            raise ValueError("at least one seed is needed")
        return v

    @validator("experiment")
    def _experiment(cls, v):
        if v not in ("table", "counts", "dims", "rank", "embedding", "timing"):
            raise ValueError(f"unknown experiment {v!r}")
        return v


def _parse_overrides(pairs):
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"expected key=value, got {pair!r}")
        overrides[key.strip()] = yaml.safe_load(value)
    return overrides


def _fit_options(args):
    fields = {}
    if args.options:
        with open(args.options, encoding="utf-8") as f:
            fields.update(yaml.safe_load(f) or {})
    for flag, field in _fit_flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            fields[field] = value
    return FitOptions(**fields)


def _run_config(args):
    fields = {k: v for k, v in vars(args).items() if v is not None and k in RunConfig.__fields__}
    if getattr(args, "ranks", None):
        fields["ranks"] = parse_ranks(args.ranks)
    if getattr(args, "methods", None):
        fields["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "model", None):
        fields["models"] = args.model
    fields["overrides"] = _parse_overrides(getattr(args, "set", None))
    return RunConfig(**fields)


def _flags(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("log_level", "out")}


def _load_data(cfg):
    ds = dataset.load_dataset(cfg.data)
    if cfg.filter_zero:
        ds, removed = dataset.filter_zero_features(ds)
        logging.info("Filtered %d all-zero features", sum(len(r) for r in removed))
    if cfg.groups:
        gm = dataset.load_group_map(cfg.groups)
        ds = dataset.aggregate_by_groups(ds, gm, shared_only=cfg.shared_only, drop_sentinel=cfg.drop_sentinel)
    return ds


def _read_selected(path):
    with open(path, encoding="utf-8") as f:
        try:
            return int(f.read().strip())
        except ValueError:
            raise ValueError(f"{path}: no rank found")


def _write_embeddings(out, labels, embeddings, header):
    for k, emb in enumerate(embeddings):
        frame = pd.DataFrame(emb, columns=[f"z{j}" for j in range(emb.shape[1])])
        frame.insert(0, "condition", labels[k])
        write_csv(op.join(out, f"embeddings_k{k}.csv"), frame, header)


def _abundance_frame(ds):
    """Relative abundance of every species per condition, and its change from the first condition."""
    frame = pd.DataFrame(dict(species=ds.species_labels))
    for k, label in enumerate(ds.condition_labels):
        frame[f"abundance_{label}"] = dataset.relative_abundance(ds, k)
    for k, label in enumerate(ds.condition_labels[1:], start=1):
        try:
            frame[f"change_{label}"] = dataset.relative_abundance_change(ds, 0, k)
        except ValueError as e:
            logging.warning("%s: no relative abundance change (%s)", label, e)
    return frame


def cmd_fit(cfg, opts, header):
    if cfg.rank is None and cfg.selected is None:
        raise ValueError("fit needs --rank or --selected")
    rank = cfg.rank if cfg.rank is not None else _read_selected(cfg.selected)
    ds = _load_data(cfg)
    model = fit(ds, rank, opts)
    save_model(model, op.join(cfg.out, "model.json"))
    trace = pd.DataFrame(dict(iteration=np.arange(1, len(model.report.elbo_trace) + 1), elbo=model.report.elbo_trace))
    write_csv(op.join(cfg.out, "elbo.csv"), trace, header)
    _write_embeddings(cfg.out, ds.condition_labels, [get_embeddings(model, k) for k in range(ds.K)], header)
    try:
        write_csv(op.join(cfg.out, "relative_abundance.csv"), _abundance_frame(ds), header)
    except ValueError as e:
        logging.warning("no relative abundance written: %s", e)
    return EXIT_OK if model.report.converged else EXIT_NOT_CONVERGED


def cmd_select(cfg, opts, header):
    if not cfg.ranks:
        raise ValueError("select needs --ranks")
    ds = _load_data(cfg)
    result = select_rank(ds, cfg.ranks, opts)
    dof_note = "# dof per condition = sum_l d_l*d_z + d_z + d_z*(d_z+1)/2"
    write_csv(op.join(cfg.out, "sweep.csv"), pd.DataFrame(result.table()), header + "\n" + dof_note)
    for rank, reason in sorted(result.failures.items()):
        logging.warning("d_z=%d failed: %s", rank, reason)
    with open(op.join(cfg.out, "selected_rank.txt"), "w", encoding="utf-8") as f:
        f.write(f"{result.selected}\n")
    return EXIT_OK


def cmd_simulate(cfg, opts, header):
    sim_cfg = load_preset(cfg.preset, dict(cfg.overrides, seed=cfg.seed))
    points = simulate(sim_cfg)
    for i, (ds, truth) in enumerate(points):
        out = cfg.out
        if len(points) > 1:
            dim, rate = ds.dims[0], sim_cfg.rates[i // len(sim_cfg.sweep_dims)]
            out = op.join(cfg.out, f"rate{rate:g}_dim{dim}")
        dataset.save_dataset(ds, out, header)
        save_truth(truth, op.join(out, "truth.json"), ds.species_labels, ds.condition_labels)
    return EXIT_OK


def _networks(model, k, cfg):
    """Per-species networks (or a single one over every feature) of condition `k`."""
    params = model.params
    if cfg.scope == "inter":
        labels = [f"{s}:{f}" for s, feats in zip(model.species_labels, model.feature_labels) for f in feats]
        corr = predictive.to_correlation(predictive.inter_covariance(params, k).covariance)
        return {"all": predictive.threshold_network(corr, cfg.threshold, labels, cfg.signed)}
    nets = {}
    for l, species in enumerate(model.species_labels):
        corr = predictive.to_correlation(predictive.intra_covariance(params, k, l).covariance)
        nets[species] = predictive.threshold_network(corr, cfg.threshold, model.feature_labels[l], cfg.signed)
    return nets


def _composition(model, k, species, prefix=False):
    """Predicted composition of `species` in condition `k`, indexed by vertex label."""
    l = model.species_index(species)
    labels = [f"{species}:{f}" if prefix else f for f in model.feature_labels[l]]
    return pd.Series(predictive.composition_distribution(model.params, k, l), index=labels)


def _mean_difference(model_a, k_a, model_b, k_b, key, cfg, labels):
    species = model_a.species_labels if cfg.scope == "inter" else [key]
    prefix = cfg.scope == "inter"
    a = pd.concat([_composition(model_a, k_a, s, prefix) for s in species])
    b = pd.concat([_composition(model_b, k_b, s, prefix) for s in species])
    return b.reindex(labels).to_numpy() - a.reindex(labels).to_numpy()


def _hellinger_frame(model_a, k_a, model_b, k_b):
    rows = []
    for species in model_a.species_labels:
        p = _composition(model_a, k_a, species)
        q = _composition(model_b, k_b, species).reindex(p.index)
        if q.isna().any():
            raise ValueError(f"{species}: the two models do not share the same features")
        rows.append(dict(species=species, hellinger=predictive.hellinger(p.to_numpy(), q.to_numpy())))
    return pd.DataFrame(rows)


def cmd_covnet(cfg, opts, header):
    if not cfg.models:
        raise ValueError("covnet needs at least one --model")
    stems = [op.splitext(op.basename(path))[0] for path in cfg.models]
    if len(set(stems)) != len(stems):
        stems = [f"{i}_{stem}" for i, stem in enumerate(stems)]
    sources = []
    for path, stem in zip(cfg.models, stems):
        model = load_model(path)
        for k, label in enumerate(model.condition_labels):
            sources.append((model, k, f"{stem}_{label}"))

    networks = []
    for model, k, name in sources:
        nets = _networks(model, k, cfg)
        for key, net in nets.items():
            write_matrix_csv(op.join(cfg.out, f"corr_{name}_{key}.csv"), net.correlation, net.labels, header)
            write_csv(op.join(cfg.out, f"edges_{name}_{key}.csv"), predictive.edge_frame(net), header)
            write_csv(op.join(cfg.out, f"degrees_{name}_{key}.csv"), predictive.degree_frame(net), header)
        networks.append(nets)

    if len(sources) == 2:
        (model_a, k_a, _), (model_b, k_b, _) = sources
        if sorted(networks[0]) != sorted(networks[1]):
            raise ValueError("the two models do not cover the same species")
        frames, summary = [], []
        for key, net_a in networks[0].items():
            dd = predictive.degree_difference(net_a, networks[1][key])
            mean_diff = _mean_difference(model_a, k_a, model_b, k_b, key, cfg, dd.labels)
            frame = predictive.degree_difference_frame(dd, mean_diff)
            frame.insert(0, "species", key)
            frames.append(frame)
            summary.append(dict(species=key, increases=dd.increases, decreases=dd.decreases))
            logging.info("%s: %d vertices increase, %d decrease", key, dd.increases, dd.decreases)
        combined = pd.concat(frames, ignore_index=True)
        combined = combined.sort_values("degree_difference", ascending=False, kind="stable")
        write_csv(op.join(cfg.out, "degree_diff.csv"), combined, header)
        write_csv(op.join(cfg.out, "degree_diff_summary.csv"), pd.DataFrame(summary), header)
        effects = pd.concat(
            [predictive.treatment_effects(frame, cfg.mean_tol, cfg.top) for frame in frames], ignore_index=True
        )
        write_csv(op.join(cfg.out, "treatment_effects.csv"), effects, header)
        write_csv(op.join(cfg.out, "hellinger.csv"), _hellinger_frame(model_a, k_a, model_b, k_b), header)
    elif len(sources) > 2:
        logging.warning("degree differences need exactly two networks, got %d", len(sources))
    return EXIT_OK


def cmd_compare(cfg, opts, header):
    seeds = list(range(cfg.seed, cfg.seed + cfg.seeds))
    rank = cfg.rank
    scored = header + "\n" + experiments.SCALE_NOTE
    if cfg.experiment == "table":
        sim_cfg = load_preset(cfg.preset, cfg.overrides)
        if sim_cfg.preset not in ("community", "rank"):
            raise ValueError(f"the comparison table needs a community dataset, preset {cfg.preset!r} is not one")
        per_seed, summary = experiments.compare_methods(sim_cfg, seeds, cfg.methods, opts)
        write_csv(op.join(cfg.out, "compare_seeds.csv"), per_seed, scored)
        write_csv(op.join(cfg.out, "compare.csv"), summary, scored)
    elif cfg.experiment in ("counts", "dims"):
        sim_cfg = load_preset("sweep", cfg.overrides)
        if cfg.experiment == "counts":
            latent_dims = [rank] if rank else sim_cfg.sweep_latent_dims or [sim_cfg.d_z]
            per_seed, summary = experiments.counts_sweep(
                sim_cfg.rates, sim_cfg.dims[0], seeds, latent_dims, sim_cfg.replicates, cfg.methods, opts
            )
        else:
            per_seed, summary = experiments.dims_sweep(
                sim_cfg.sweep_dims, sim_cfg.rate, seeds, rank or sim_cfg.d_z, sim_cfg.replicates, cfg.methods, opts
            )
        write_csv(op.join(cfg.out, f"{cfg.experiment}_sweep_seeds.csv"), per_seed, scored)
        write_csv(op.join(cfg.out, f"{cfg.experiment}_sweep.csv"), summary, scored)
    elif cfg.experiment == "rank":
        sim_cfg = load_preset("rank", cfg.overrides)
        true_ranks = [rank] if rank else [4, 8, 12]
        candidates = cfg.ranks or list(range(2, 15))
        selections, curves = experiments.rank_study(
            true_ranks, candidates, seeds, sim_cfg.dims, sim_cfg.rate, sim_cfg.replicates, opts
        )
        write_csv(op.join(cfg.out, "rank_selection.csv"), selections, header)
        write_csv(op.join(cfg.out, "rank_curves.csv"), curves, scored)
    elif cfg.experiment == "embedding":
        sim_cfg = load_preset(
            "classes",
            dict(
                dict(class_means=[[0.0, 0.0], [3.0, 3.0], [-2.0, -2.0]], shared_loadings=True, pooled=True),
                **cfg.overrides,
            ),
        )
        frame = experiments.embedding_study(seeds, sim_cfg, rank or sim_cfg.d_z, opts)
        write_csv(op.join(cfg.out, "embedding.csv"), frame, header)
    else:
        sizes = [(200, 64), (400, 64), (200, 128)]
        frame = experiments.iteration_timing(sizes, cfg.seeds, rank or 5, opts=opts)
        write_csv(op.join(cfg.out, "timing.csv"), frame, header)
    return EXIT_OK


def cmd_embed(cfg, opts, header):
    if len(cfg.models) != 1:
        raise ValueError("embed needs exactly one --model")
    model = load_model(cfg.models[0])
    ds = _load_data(cfg)
    state = infer_posteriors(model, ds, opts)
    _write_embeddings(cfg.out, ds.condition_labels, [c.m for c in state.conditions], header)
    return EXIT_OK


_commands = dict(
    fit=cmd_fit,
    select=cmd_select,
    simulate=cmd_simulate,
    covnet=cmd_covnet,
    compare=cmd_compare,
    embed=cmd_embed,
)


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-l", "--log-level", default="WARNING")
    common.add_argument("-o", "--out", default=".")
    common.add_argument("-s", "--seed", type=int)
    common.add_argument("--options", help="YAML file of fit options, overridden by the flags")
    common.add_argument("--tol", type=float, help="relative ELBO change that stops the fit")
    common.add_argument("--max-iters", type=int)
    common.add_argument("--inner-tol", type=float)
    common.add_argument("--max-inner-iters", type=int)
    common.add_argument("--jitter", type=float)
    common.add_argument("--init-scale", type=float)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("-d", "--data", required=True, help="manifest JSON")
    data.add_argument("--filter-zero", action="store_true")
    data.add_argument("--groups", help="YAML map of species → feature → group")
    data.add_argument("--shared-only", action="store_true")
    data.add_argument("--drop-sentinel", action="store_true")

    parser = argparse.ArgumentParser(prog="fuselvm")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common, data])
    p.add_argument("-r", "--rank", type=int)
    p.add_argument("--selected", help="selected_rank.txt written by select")

    p = sub.add_parser("select", parents=[common, data])
    p.add_argument("--ranks", required=True, help="2:12, 5:50:5 or 2,4,8")

    p = sub.add_parser("simulate", parents=[common])
    p.add_argument("-p", "--preset", default="community")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = sub.add_parser("covnet", parents=[common])
    p.add_argument("-m", "--model", action="append", required=True)
    p.add_argument("-t", "--threshold", type=float, default=0.95)
    p.add_argument("--scope", choices=("intra", "inter"), default="intra")
    p.add_argument("--signed", action="store_true")
    p.add_argument("--mean-tol", type=float, help="largest composition change still counted as no change")
    p.add_argument("--top", type=int, help="vertices kept per treatment effect")

    p = sub.add_parser("compare", parents=[common])
    p.add_argument("-p", "--preset", default="community")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seeds", type=int, default=10, help="number of realizations")
    p.add_argument("--methods", default="empirical,ledoit_wolf,proposed")
    p.add_argument("-r", "--rank", type=int)
    p.add_argument("--ranks")
    p.add_argument(
        "-e", "--experiment", default="table", choices=("table", "counts", "dims", "rank", "embedding", "timing")
    )

    p = sub.add_parser("embed", parents=[common, data])
    p.add_argument("-m", "--model", action="append", required=True)
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=args.log_level)

    try:
        cfg = _run_config(args)
        opts = _fit_options(args)
    except (ValueError, OSError) as e:
        logging.error("%s", e)
        return EXIT_ERROR

    header = metadata_header(cfg.seed, _flags(args))
    try:
        with output_lock(cfg.out):
            return _commands[cfg.command](cfg, opts, header)
    except Timeout:
        logging.error("Another instance of this application currently holds the lock of %s.", cfg.out)
    except (ValueError, NumericalError, OSError) as e:
        logging.error("%s", e)
    return EXIT_ERROR


def run():
    sys.exit(main())
