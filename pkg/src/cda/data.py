"""Episode ingestion, validation, normalization, windowing and domain splits.

The on-disk format is a CSV with header ``well_id,month,X1..Xd,Z,Y,U1..Um``
where Z holds a lowercase policy name ("none" for untreated months). Months
are integer indices and must be contiguous per well.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_POLICIES = ["none", "sand_controlling", "perforation_adding", "pump_replacing", "fracturing"]


class DataError(ValueError):
    pass


@dataclass
class NoiseTrace:
    """Exogenous draws kept by the simulator for counterfactual replay."""

    eps: np.ndarray  # (T, d_x) covariate noise
    eta: np.ndarray  # (T,) outcome noise


@dataclass
class Episode:
    """One production unit's aligned covariate/treatment/outcome series."""

    id: str
    X: np.ndarray  # (T, d_x)
    Z: np.ndarray  # (T,) treatment indices
    Y: np.ndarray  # (T,)
    U: np.ndarray  # (u_dim,) static features
    start_month: int = 0
    noise_trace: NoiseTrace | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Z = np.asarray(self.Z, dtype=np.int64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64).reshape(-1)
        T = self.X.shape[0]
        if T < 2:
            raise DataError(f"episode {self.id}: length {T} < 2")
        if self.Z.shape != (T,) or self.Y.shape != (T,):
            raise DataError(f"episode {self.id}: X/Z/Y lengths differ")
        if not np.all(np.isfinite(self.Y)) or not np.all(np.isfinite(self.X)):
            raise DataError(f"episode {self.id}: non-finite values")
        if np.any(self.Z < 0):
            raise DataError(f"episode {self.id}: negative treatment index")

    @property
    def length(self) -> int:
        return self.X.shape[0]

    @property
    def months(self) -> np.ndarray:
        return np.arange(self.start_month, self.start_month + self.length)


@dataclass
class NormStats:
    """Per-channel z-score statistics; constant channels pass through unscaled."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    x_const: np.ndarray  # bool flags
    y_const: bool

    def transform_x(self, X):
        scale = np.where(self.x_const, 1.0, self.x_std)
        shift = np.where(self.x_const, 0.0, self.x_mean)
        return (X - shift) / scale

    def inverse_x(self, X):
        scale = np.where(self.x_const, 1.0, self.x_std)
        shift = np.where(self.x_const, 0.0, self.x_mean)
        return X * scale + shift

    def transform_y(self, Y):
        if self.y_const:
            return np.asarray(Y, dtype=np.float64)
        return (Y - self.y_mean) / self.y_std

    def inverse_y(self, Y):
        if self.y_const:
            return np.asarray(Y, dtype=np.float64)
        return Y * self.y_std + self.y_mean

    def to_dict(self):
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "x_const": self.x_const.astype(int).tolist(),
            "y_const": int(self.y_const),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            x_mean=np.asarray(d["x_mean"], dtype=np.float64),
            x_std=np.asarray(d["x_std"], dtype=np.float64),
            y_mean=float(d["y_mean"]),
            y_std=float(d["y_std"]),
            x_const=np.asarray(d["x_const"], dtype=bool),
            y_const=bool(d["y_const"]),
        )


@dataclass
class DomainDataset:
    """A tagged collection of episodes forming a source or target domain."""

    tag: str
    episodes: list[Episode]
    policy_vocabulary: list[str] = field(default_factory=lambda: list(DEFAULT_POLICIES))
    norm: NormStats | None = None

    def __post_init__(self):
        if self.tag not in ("source", "target"):
            raise DataError(f"dataset tag must be source|target, got {self.tag!r}")
        if not self.policy_vocabulary or self.policy_vocabulary[0] != "none":
            raise DataError("policy vocabulary must start with 'none'")
        if self.episodes:
            d_x = self.episodes[0].X.shape[1]
            u_dim = self.episodes[0].U.shape[0]
            for ep in self.episodes:
                if ep.X.shape[1] != d_x or ep.U.shape[0] != u_dim:
                    raise DataError(f"episode {ep.id}: channel counts differ across dataset")
                if np.any(ep.Z >= len(self.policy_vocabulary)):
                    raise DataError(f"episode {ep.id}: treatment index outside vocabulary")

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def n_records(self) -> int:
        return sum(ep.length for ep in self.episodes)

    @property
    def d_x(self) -> int:
        return self.episodes[0].X.shape[1] if self.episodes else 0

    @property
    def u_dim(self) -> int:
        return self.episodes[0].U.shape[0] if self.episodes else 0

    @property
    def n_policies(self) -> int:
        return len(self.policy_vocabulary)

    def manifest(self) -> dict:
        return {
            "tag": self.tag,
            "n_wells": self.n_episodes,
            "n_records": self.n_records,
            "x_channels": [f"X{i + 1}" for i in range(self.d_x)],
            "u_channels": [f"U{i + 1}" for i in range(self.u_dim)],
            "units": {},
            "policies": list(self.policy_vocabulary),
            "normalized": self.norm is not None,
        }


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_csv(dataset: DomainDataset, path) -> None:
    """Write a dataset in the well_id,month,X*,Z,Y,U* schema (exact floats)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        header = ["well_id", "month"]
        header += [f"X{i + 1}" for i in range(dataset.d_x)]
        header += ["Z", "Y"]
        header += [f"U{i + 1}" for i in range(dataset.u_dim)]
        wr.writerow(header)
        for ep in dataset.episodes:
            for t, month in enumerate(ep.months):
                row = [ep.id, str(int(month))]
                row += [_fmt(v) for v in ep.X[t]]
                row.append(dataset.policy_vocabulary[ep.Z[t]])
                row.append(_fmt(ep.Y[t]))
                row += [_fmt(v) for v in ep.U]
                wr.writerow(row)


def infer_vocabulary(path) -> list[str]:
    """Distinct policy names in a CSV: 'none' first, the rest sorted."""
    names = set()
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None:
            raise DataError(f"{path}: no records")
        if "Z" not in header:
            raise DataError(f"{path}: missing column 'Z'")
        zi = header.index("Z")
        for row in rd:
            if row:
                names.add(row[zi])
    names.discard("none")
    return ["none"] + sorted(names)


def ingest_csv(path, vocabulary=None, tag: str = "source") -> DomainDataset:
    """Load, group by well, sort by month and validate contiguity.

    Without an explicit vocabulary the policy names are inferred from the
    file; pass one to validate against a fixed treatment set.
    """
    vocab = list(vocabulary) if vocabulary is not None else infer_vocabulary(path)
    lookup = {name: i for i, name in enumerate(vocab)}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            header = next(rd)
        except StopIteration:
            raise DataError(f"{path}: no records") from None
        cols = {name: i for i, name in enumerate(header)}
        for required in ("well_id", "month", "Z", "Y"):
            if required not in cols:
                raise DataError(f"{path}: missing column '{required}'")
        x_names = sorted((c for c in cols if c.startswith("X") and c[1:].isdigit()),
                         key=lambda c: int(c[1:]))
        u_names = sorted((c for c in cols if c.startswith("U") and c[1:].isdigit()),
                         key=lambda c: int(c[1:]))
        if not x_names:
            raise DataError(f"{path}: missing column 'X1'")
        rows_by_well: dict[str, list] = {}
        for row in rd:
            if not row:
                continue
            wid = row[cols["well_id"]]
            zname = row[cols["Z"]]
            if zname not in lookup:
                raise DataError(
                    f"{path}: unknown policy name {zname!r}; vocabulary is {vocab}"
                )
            rows_by_well.setdefault(wid, []).append(
                (
                    int(row[cols["month"]]),
                    [float(row[cols[c]]) for c in x_names],
                    lookup[zname],
                    float(row[cols["Y"]]),
                    [float(row[cols[c]]) for c in u_names],
                )
            )
    if not rows_by_well:
        raise DataError(f"{path}: no records")
    episodes = []
    for wid in rows_by_well:
        rows = sorted(rows_by_well[wid], key=lambda r: r[0])
        months = [r[0] for r in rows]
        if any(months[i + 1] != months[i] + 1 for i in range(len(months) - 1)):
            raise DataError(f"{path}: non-contiguous months for well '{wid}'")
        episodes.append(
            Episode(
                id=wid,
                X=np.array([r[1] for r in rows]),
                Z=np.array([r[2] for r in rows]),
                Y=np.array([r[3] for r in rows]),
                U=np.array(rows[0][4]),
                start_month=months[0],
            )
        )
    return DomainDataset(tag=tag, episodes=episodes, policy_vocabulary=vocab)


def compute_stats(dataset: DomainDataset) -> NormStats:
    X = np.concatenate([ep.X for ep in dataset.episodes], axis=0)
    Y = np.concatenate([ep.Y for ep in dataset.episodes])
    x_mean = X.mean(axis=0)
    x_std = X.std(axis=0)
    y_mean = float(Y.mean())
    y_std = float(Y.std())
    x_const = x_std == 0.0
    y_const = y_std == 0.0
    return NormStats(
        x_mean=x_mean,
        x_std=np.where(x_const, 1.0, x_std),
        y_mean=y_mean,
        y_std=1.0 if y_const else y_std,
        x_const=x_const,
        y_const=y_const,
    )


def normalize(dataset: DomainDataset, stats: NormStats | None = None):
    """Z-score covariates and outcome; treatments and static U are untouched.

    Returns (normalized dataset, stats). Stats default to this dataset's own;
    pass a source-fit NormStats to transform a target domain consistently.
    """
    if stats is None:
        stats = compute_stats(dataset)
    if stats.x_mean.shape[0] != dataset.d_x:
        raise DataError(
            f"normalize: stats carry {stats.x_mean.shape[0]} channels, dataset has {dataset.d_x}"
        )
    episodes = [
        replace(
            ep,
            X=stats.transform_x(ep.X),
            Y=stats.transform_y(ep.Y),
        )
        for ep in dataset.episodes
    ]
    return replace(dataset, episodes=episodes, norm=stats), stats


def denormalize(dataset: DomainDataset) -> DomainDataset:
    if dataset.norm is None:
        raise DataError("denormalize: dataset carries no normalization stats")
    st = dataset.norm
    episodes = [replace(ep, X=st.inverse_x(ep.X), Y=st.inverse_y(ep.Y)) for ep in dataset.episodes]
    return replace(dataset, episodes=episodes, norm=None)


@dataclass
class SplitPlan:
    mode: str  # inside_well | cross_well
    tau: int = 6
    train_well_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("inside_well", "cross_well"):
            raise DataError(f"unknown split mode {self.mode!r}")
        if self.mode == "inside_well" and self.tau < 2:
            raise DataError("inside_well: tau must be >= 2")
        if self.mode == "cross_well" and not 0.0 < self.train_well_fraction < 1.0:
            raise DataError("cross_well: fraction must lie strictly between 0 and 1")


def split(dataset: DomainDataset, plan: SplitPlan):
    """Partition into (train, eval) with no timestep on both sides."""
    if plan.mode == "inside_well":
        train_eps, eval_eps = [], []
        for ep in dataset.episodes:
            if plan.tau >= ep.length:
                raise DataError(
                    f"split: tau={plan.tau} >= length {ep.length} of episode '{ep.id}'"
                )
            cut = ep.length - plan.tau
            train_eps.append(
                replace(ep, X=ep.X[:cut], Z=ep.Z[:cut], Y=ep.Y[:cut], noise_trace=None)
            )
            eval_eps.append(
                replace(
                    ep,
                    X=ep.X[cut:],
                    Z=ep.Z[cut:],
                    Y=ep.Y[cut:],
                    start_month=ep.start_month + cut,
                    noise_trace=None,
                )
            )
        return (
            replace(dataset, episodes=train_eps, norm=None),
            replace(dataset, episodes=eval_eps, norm=None),
        )

    if dataset.n_episodes < 2:
        raise DataError("cross_well split needs at least 2 wells")
    rng = np.random.default_rng(plan.seed)
    order = rng.permutation(dataset.n_episodes)
    n_train = int(round(plan.train_well_fraction * dataset.n_episodes))
    n_train = min(max(n_train, 1), dataset.n_episodes - 1)
    train_idx = set(order[:n_train].tolist())
    train_eps = [ep for i, ep in enumerate(dataset.episodes) if i in train_idx]
    eval_eps = [ep for i, ep in enumerate(dataset.episodes) if i not in train_idx]
    return (
        replace(dataset, episodes=train_eps, norm=None),
        replace(dataset, episodes=eval_eps, norm=None),
    )


def policy_partition(dataset: DomainDataset) -> dict:
    """Group wells by the policies they ever receive (one dataset per policy)."""
    out = {}
    for arm in range(1, dataset.n_policies):
        name = dataset.policy_vocabulary[arm]
        eps = [ep for ep in dataset.episodes if np.any(ep.Z == arm)]
        out[name] = replace(dataset, episodes=eps, norm=None)
    return out


def emit_manifest(dataset: DomainDataset, path) -> None:
    with open(path, "w") as fh:
        json.dump(dataset.manifest(), fh, indent=2)


def stack_batch(episodes: list[Episode]):
    """Stack equal-length episodes into (B,T,*) arrays for batched training."""
    lengths = {ep.length for ep in episodes}
    if len(lengths) != 1:
        raise DataError(f"stack_batch: episodes have mixed lengths {sorted(lengths)}")
    X = np.stack([ep.X for ep in episodes])
    Z = np.stack([ep.Z for ep in episodes])
    Y = np.stack([ep.Y for ep in episodes])
    U = np.stack([ep.U for ep in episodes])
    return X, Z, Y, U


def truncate(dataset: DomainDataset, start: int, stop: int | None = None) -> DomainDataset:
    """Keep timesteps [start, stop) of each episode."""
    eps = []
    for ep in dataset.episodes:
        hi = ep.length if stop is None else min(stop, ep.length)
        if hi - start < 2:
            raise DataError(f"truncate: episode '{ep.id}' too short for [{start}, {stop})")
        eps.append(
            replace(
                ep,
                X=ep.X[start:hi],
                Z=ep.Z[start:hi],
                Y=ep.Y[start:hi],
                start_month=ep.start_month + start,
                noise_trace=None,
            )
        )
    return replace(dataset, episodes=eps, norm=dataset.norm)
