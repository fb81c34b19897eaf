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

import hashlib
import json
import logging
import os
import os.path as op
import re
from typing import List

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, validator


class CountDataset:
    """Count matrices indexed by (condition k, species l), one row per replicate.

    `counts[k][l]` is an `I_k × d_l` array of non-negative 64-bit integers. The
    arrays are made read-only so a dataset can be shared freely.
    """

    def __init__(self, counts, condition_labels, species_labels, feature_labels):
        if len(counts) != len(condition_labels):
            raise ValueError(f"{len(counts)} condition blocks but {len(condition_labels)} condition labels")
        if not counts:
            raise ValueError("dataset has no condition")
        self.condition_labels = list(condition_labels)
        self.species_labels = list(species_labels)
        self.feature_labels = [list(f) for f in feature_labels]
        if len(self.feature_labels) != len(self.species_labels):
            raise ValueError("one feature label list per species is required")
        self.counts = []
        for k, blocks in enumerate(counts):
            if len(blocks) != len(self.species_labels):
                raise ValueError(f"condition {self.condition_labels[k]}: expected {self.L} species blocks")
            row = []
            for l, block in enumerate(blocks):
                row.append(self._checked_block(block, k, l))
            n_rows = {b.shape[0] for b in row}
            if len(n_rows) != 1:
                where = f"condition {self.condition_labels[k]}"
                raise ValueError(f"{where}: inconsistent replicate counts {sorted(n_rows)} across species")
            self.counts.append(row)

    def _checked_block(self, block, k, l):
        where = f"condition {self.condition_labels[k]}, species {self.species_labels[l]}"
        block = np.asarray(block)
        if block.ndim != 2:
            raise ValueError(f"{where}: counts must be a matrix")
        if block.shape[1] != len(self.feature_labels[l]):
            raise ValueError(f"{where}: {block.shape[1]} columns but {len(self.feature_labels[l])} feature labels")
        if block.shape[1] == 0:
            raise ValueError(f"{where}: no feature")
        if not np.all(np.isfinite(block)) or not np.all(block == np.round(block)):
            raise ValueError(f"{where}: non-integer entry")
        if np.any(block < 0):
            raise ValueError(f"{where}: negative count")
        block = block.astype(np.int64)
        block.setflags(write=False)
        return block

    @property
    def K(self):
        return len(self.counts)

    @property
    def L(self):
        return len(self.species_labels)

    @property
    def dims(self):
        return [len(f) for f in self.feature_labels]

    @property
    def replicates(self):
        return [blocks[0].shape[0] for blocks in self.counts]

    def block(self, k, l):
        return self.counts[k][l]

    def totals(self, k, l):
        """Row totals N_{kl,i}."""
        return self.counts[k][l].sum(axis=1)

    def stacked(self, k):
        """All species of condition `k` side by side, `I_k × Σ d_l`."""
        return np.hstack(self.counts[k])

    def condition_index(self, k):
        if isinstance(k, str):
            if k not in self.condition_labels:
                raise ValueError(f"unknown condition {k!r}")
            return self.condition_labels.index(k)
        if not 0 <= k < self.K:
            raise ValueError(f"unknown condition {k}")
        return k

    def __repr__(self):
        return f"<CountDataset K={self.K} L={self.L} dims={self.dims} I={self.replicates}>"


class GroupMap:
    """Per-species mapping from feature label to group label.

    Features without an entry belong to the `sentinel` group, so every feature
    maps to exactly one group.
    """

    def __init__(self, mapping, sentinel="UNASSIGNED"):
        self.mapping = {species: dict(features) for species, features in mapping.items()}
        self.sentinel = sentinel

    def group_of(self, species, feature):
        return self.mapping.get(species, {}).get(feature, self.sentinel)

    @classmethod
    def identity(cls, ds):
        return cls({s: {f: f for f in feats} for s, feats in zip(ds.species_labels, ds.feature_labels)})


class _ManifestSpecies(BaseModel):
    label: str
    counts_csv: str


class _ManifestCondition(BaseModel):
    label: str
    species: List[_ManifestSpecies]

    @validator("species")
    def _has_species(cls, v):
        if not v:
            raise ValueError("condition lists no species")
        return v


class Manifest(BaseModel):
    conditions: List[_ManifestCondition]

    @validator("conditions")
    def _has_conditions(cls, v):
        if not v:
            raise ValueError("manifest lists no condition")
        return v


_count_re = r"[+-]?\d+"


def _read_counts_csv(path):
    if not op.exists(path):
        raise FileNotFoundError(f"count file not found: {path}")
    try:
        # header=None: a body row longer than the header is a parser error, never an index column
        frame = pd.read_csv(path, header=None, dtype=str, comment="#", skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path}: no header row")
    except pd.errors.ParserError as e:
        raise ValueError(f"{path}: ragged row ({e})")
    columns = [str(c).strip() for c in frame.iloc[0]]
    if len(set(columns)) != len(columns):
        raise ValueError(f"{path}: duplicate feature label")
    frame = frame.iloc[1:]
    missing = frame.isna().any(axis=1).to_numpy()
    if missing.any():
        # +2: the header is line 1
        raise ValueError(f"{path}: ragged row at line {int(np.argmax(missing)) + 2}")
    if frame.shape[0] == 0:
        raise ValueError(f"{path}: no replicate row")
    text = frame.apply(lambda col: col.str.strip())
    if not text.apply(lambda col: col.str.fullmatch(_count_re)).to_numpy().all():
        raise ValueError(f"{path}: non-integer entry")
    try:
        values = np.array([[int(v) for v in row] for row in text.to_numpy()], dtype=np.int64)
    except OverflowError:
        raise ValueError(f"{path}: count does not fit in 64 bits")
    if np.any(values < 0):
        raise ValueError(f"{path}: negative count")
    return columns, values


def load_dataset(manifest_path):
    if not op.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = Manifest.parse_obj(json.load(f))
    base = op.dirname(op.abspath(manifest_path))

    species_labels = [s.label for s in manifest.conditions[0].species]
    feature_labels = None
    counts = []
    for cond in manifest.conditions:
        labels = [s.label for s in cond.species]
        if labels != species_labels:
            raise ValueError(f"condition {cond.label}: species {labels} differ from {species_labels}")
        blocks = []
        cond_features = []
        for s in cond.species:
            features, values = _read_counts_csv(op.join(base, s.counts_csv))
            cond_features.append(features)
            blocks.append(values)
        if feature_labels is None:
            feature_labels = cond_features
        elif cond_features != feature_labels:
            raise ValueError(f"condition {cond.label}: feature labels differ from the first condition")
        counts.append(blocks)
        logging.info("%s: loaded %d replicates", cond.label, blocks[0].shape[0])

    return CountDataset(counts, [c.label for c in manifest.conditions], species_labels, feature_labels)


_unsafe_re = re.compile(r"[^A-Za-z0-9_.-]+")


def save_dataset(ds, out_dir, header=None):
    """Write `ds` as a manifest plus one CSV per (condition, species); returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    conditions = []
    for k, cond in enumerate(ds.condition_labels):
        species = []
        for l, spec in enumerate(ds.species_labels):
            fname = f"{k}_{_unsafe_re.sub('_', cond)}__{_unsafe_re.sub('_', spec)}.csv"
            with open(op.join(out_dir, fname), "w", encoding="utf-8", newline="") as f:
                if header:
                    f.write(header + "\n")
                pd.DataFrame(ds.block(k, l), columns=ds.feature_labels[l]).to_csv(f, index=False)
            species.append(dict(label=spec, counts_csv=fname))
        conditions.append(dict(label=cond, species=species))
    manifest_path = op.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(dict(conditions=conditions), f, indent=2)
    return manifest_path


def load_group_map(path, sentinel="UNASSIGNED"):
    with open(path, encoding="utf-8") as f:
        mapping = yaml.safe_load(f) or {}
    mapping = {str(s): {str(feat): str(g) for feat, g in (feats or {}).items()} for s, feats in mapping.items()}
    return GroupMap(mapping, sentinel=sentinel)


def filter_zero_features(ds):
    """Drop features with zero counts over every replicate of every condition.

    Returns:
        (filtered dataset, per-species lists of removed feature labels)
    """
    keep_masks = []
    removed = []
    for l, spec in enumerate(ds.species_labels):
        col_totals = sum(ds.block(k, l).sum(axis=0) for k in range(ds.K))
        keep = col_totals > 0
        if not keep.any():
            raise ValueError(f"species {spec} emptied by filtering")
        keep_masks.append(keep)
        removed.append([f for f, kept in zip(ds.feature_labels[l], keep) if not kept])
    n_removed = sum(len(r) for r in removed)
    if n_removed == 0:
        return ds, removed
    logging.info("Removed %d all-zero features", n_removed)
    counts = [[ds.block(k, l)[:, keep] for l, keep in enumerate(keep_masks)] for k in range(ds.K)]
    features = [[f for f, kept in zip(ds.feature_labels[l], keep) if kept] for l, keep in enumerate(keep_masks)]
    return CountDataset(counts, ds.condition_labels, ds.species_labels, features), removed


def aggregate_by_groups(ds, gm, shared_only=False, drop_sentinel=False):
    """Sum the columns of features sharing a group; group labels become the feature labels.

    Groups keep the order in which they first appear. With `shared_only`, only
    groups present in every species are kept, in the order of the first species.
    """
    species_groups = []
    for l, spec in enumerate(ds.species_labels):
        per_feature = [gm.group_of(spec, f) for f in ds.feature_labels[l]]
        order = list(dict.fromkeys(per_feature))
        species_groups.append((per_feature, order))

    if shared_only:
        shared = set(species_groups[0][1]).intersection(*(set(order) for _, order in species_groups[1:]))
        kept_order = [g for g in species_groups[0][1] if g in shared]
        kept = [kept_order] * ds.L
    else:
        kept = [order for _, order in species_groups]
    if drop_sentinel:
        kept = [[g for g in order if g != gm.sentinel] for order in kept]
    if shared_only and not kept[0]:
        raise ValueError("no group is shared by every species")

    counts = [[] for _ in range(ds.K)]
    for l, ((per_feature, _), order) in enumerate(zip(species_groups, kept)):
        if not order:
            raise ValueError(f"species {ds.species_labels[l]} has no group left")
        index = {g: j for j, g in enumerate(order)}
        membership = np.zeros((len(per_feature), len(order)), dtype=np.int64)
        for i, g in enumerate(per_feature):
            if g in index:
                membership[i, index[g]] = 1
        for k in range(ds.K):
            counts[k].append(ds.block(k, l) @ membership)
    logging.info("Aggregated features into %s groups", [len(o) for o in kept])
    return CountDataset(counts, ds.condition_labels, ds.species_labels, kept)


def relative_abundance(ds, k):
    k = ds.condition_index(k)
    totals = np.array([ds.block(k, l).sum() for l in range(ds.L)], dtype=float)
    if totals.sum() <= 0:
        raise ValueError(f"condition {ds.condition_labels[k]} has no count")
    return totals / totals.sum()


def relative_abundance_change(ds, k_ref, k_other):
    """(p_other − p_ref) / p_ref for each species."""
    ref = relative_abundance(ds, k_ref)
    other = relative_abundance(ds, k_other)
    if np.any(ref == 0):
        raise ValueError("a species has no count in the reference condition")
    return (other - ref) / ref


def pool_conditions(ds, label="pooled"):
    counts = [[np.vstack([ds.block(k, l) for k in range(ds.K)]) for l in range(ds.L)]]
    return CountDataset(counts, [label], ds.species_labels, ds.feature_labels)


def fingerprint(ds):
    m = hashlib.sha256()
    for labels in [ds.condition_labels, ds.species_labels] + ds.feature_labels:
        m.update("\x1f".join(labels).encode())
        m.update(b"\x1e")
    return dict(
        dims=ds.dims,
        replicates=ds.replicates,
        species=ds.species_labels,
        conditions=ds.condition_labels,
        labels_sha256=m.hexdigest(),
    )
