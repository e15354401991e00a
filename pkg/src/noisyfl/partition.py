"""Client index partitioning: IID plus three non-IID skew schemes.

Every scheme is a pure function of (dataset, parameters, seed).  Index lists
are stored sorted ascending so plan files diff canonically.  Schemes that
sample client shares redraw with seed+1 (up to a fixed budget) when a client
would come out empty, since aggregation weights by client size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .datasets import LabeledDataset
from .errors import CoverageInfeasibleError, DegeneratePartitionError

SCHEME_IID = "iid"
SCHEME_QUANTITY = "quantity-skew"
SCHEME_LABEL_DIR = "label-dir"
SCHEME_LABEL_QUANTITY = "label-quantity"
SCHEMES = (SCHEME_IID, SCHEME_QUANTITY, SCHEME_LABEL_DIR, SCHEME_LABEL_QUANTITY)

# Redraw budget when a sampled share vector leaves a client empty.  Dirichlet
# shares at small alpha are sparse enough that floor(q_k*N) = 0 happens for
# ~99.5% of draws (alpha=0.1, K=10, N=1e4), so the budget must be generous
# for small-alpha settings to remain usable.
EMPTY_CLIENT_RETRIES = 2000

# sampler(gen, alpha, size) -> probability vector; injectable for stubbing
DirichletSampler = Callable[[np.random.Generator, float, int], np.ndarray]


def gamma_dirichlet(gen: np.random.Generator, alpha: float, size: int) -> np.ndarray:
    """Dirichlet draw via normalized per-coordinate Gamma(alpha, 1) samples."""
    g = gen.gamma(alpha, 1.0, size=size)
    total = g.sum()
    if total <= 0.0:  # all-zero underflow at tiny alpha; fall back to one-hot
        g = np.zeros(size)
        g[int(gen.integers(size))] = 1.0
        return g
    return g / total


@dataclass(frozen=True)
class PartitionPlan:
    """Disjoint per-client sample-index lists plus the scheme that made them."""

    clients: list[np.ndarray]
    scheme: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "clients", [np.sort(np.asarray(c, dtype=np.int64)) for c in self.clients]
        )

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clients], dtype=np.int64)

    def validate(self, n: int) -> None:
        """Check disjointness, index bounds, and non-emptiness against a dataset of size n."""
        seen = np.concatenate(self.clients) if self.clients else np.zeros(0, dtype=np.int64)
        if len(seen) and (seen.min() < 0 or seen.max() >= n):
            raise IndexError("plan contains indices outside the dataset")
        if len(np.unique(seen)) != len(seen):
            raise ValueError("plan assigns some index to more than one client")
        if any(len(c) == 0 for c in self.clients):
            raise DegeneratePartitionError("plan contains an empty client")


@dataclass(frozen=True)
class PartitionSpec:
    """Scheme tag plus its parameter (Dirichlet alpha or classes-per-client c)."""

    scheme: str
    alpha: float | None = None
    c: int | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.scheme in (SCHEME_QUANTITY, SCHEME_LABEL_DIR) and (self.alpha is None or not self.alpha > 0):
            raise ValueError(f"scheme {self.scheme} requires alpha > 0")
        if self.scheme == SCHEME_LABEL_QUANTITY and (self.c is None or self.c < 1):
            raise ValueError("scheme label-quantity requires c >= 1")

    def params_dict(self) -> dict:
        if self.scheme == SCHEME_LABEL_QUANTITY:
            return {"c": int(self.c)}
        if self.scheme in (SCHEME_QUANTITY, SCHEME_LABEL_DIR):
            return {"alpha": float(self.alpha)}
        return {}


def partition_iid(ds: LabeledDataset, num_clients: int, seed: int) -> PartitionPlan:
    """Global shuffle, then K blocks of floor(N/K); the remainder is unassigned."""
    n = len(ds)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if n < num_clients:
        raise ValueError("dataset smaller than client count")
    perm = rng.stream(seed, "iid").permutation(n)
    block = n // num_clients
    clients = [perm[k * block : (k + 1) * block] for k in range(num_clients)]
    return PartitionPlan(clients=clients, scheme=SCHEME_IID, params={}, seed=seed)


def partition_quantity_skew(
    ds: LabeledDataset,
    num_clients: int,
    alpha: float,
    seed: int,
    sampler: DirichletSampler = gamma_dirichlet,
) -> PartitionPlan:
    """One Dirichlet(alpha) share vector sizes the clients; class mix untouched.

    Client k gets a contiguous block of floor(q_k * N) globally shuffled
    indices; floor remainders are dropped.
    """
    n = len(ds)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    for attempt in range(EMPTY_CLIENT_RETRIES + 1):
        attempt_seed = seed + attempt
        q = np.asarray(sampler(rng.stream(attempt_seed, "quantity-shares"), alpha, num_clients), dtype=np.float64)
        counts = np.floor(q * n).astype(np.int64)
        if counts.min() >= 1:
            perm = rng.stream(attempt_seed, "quantity-shuffle").permutation(n)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            clients = [perm[offsets[k] : offsets[k + 1]] for k in range(num_clients)]
            return PartitionPlan(
                clients=clients, scheme=SCHEME_QUANTITY, params={"alpha": float(alpha)}, seed=seed
            )
    raise DegeneratePartitionError(
        f"quantity skew left a client empty after {EMPTY_CLIENT_RETRIES} redraws (alpha={alpha}, K={num_clients}, N={n})"
    )


def _deal_leftovers(order: np.ndarray, leftover_indices: np.ndarray, out: list[list[np.ndarray]], client_ids: np.ndarray) -> None:
    """Hand leftover sample indices one-by-one to clients cycling through ``order``."""
    for pos, sample in enumerate(leftover_indices):
        k = client_ids[order[pos % len(order)]]
        out[k].append(np.array([sample], dtype=np.int64))


def partition_label_dirichlet(
    ds: LabeledDataset,
    num_clients: int,
    alpha: float,
    seed: int,
    sampler: DirichletSampler = gamma_dirichlet,
) -> PartitionPlan:
    """Per-class Dirichlet(alpha) shares give each client a slice of every class.

    Class i is shuffled once, split at floor(q_ik * N_i); per-class leftovers
    go round-robin over clients ordered by ascending fractional deficit.
    """
    n = len(ds)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    for attempt in range(EMPTY_CLIENT_RETRIES + 1):
        attempt_seed = seed + attempt
        shares_gen = rng.stream(attempt_seed, "labeldir-shares")
        parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for cls in range(ds.num_classes):
            members = np.flatnonzero(ds.labels == cls)
            if len(members) == 0:
                continue
            members = rng.stream(attempt_seed, "labeldir-class", cls).permutation(members)
            q = np.asarray(sampler(shares_gen, alpha, num_clients), dtype=np.float64)
            targets = q * len(members)
            counts = np.floor(targets).astype(np.int64)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            for k in range(num_clients):
                parts[k].append(members[offsets[k] : offsets[k + 1]])
            deficit = targets - counts
            order = np.lexsort((np.arange(num_clients), deficit))
            _deal_leftovers(order, members[offsets[-1] :], parts, np.arange(num_clients))
        clients = [np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in parts]
        if min(len(c) for c in clients) >= 1:
            return PartitionPlan(
                clients=clients, scheme=SCHEME_LABEL_DIR, params={"alpha": float(alpha)}, seed=seed
            )
    raise DegeneratePartitionError(
        f"label-dirichlet left a client empty after {EMPTY_CLIENT_RETRIES} redraws (alpha={alpha}, K={num_clients}, N={n})"
    )


def partition_label_quantity(ds: LabeledDataset, num_clients: int, c: int, seed: int) -> PartitionPlan:
    """Assign exactly c distinct classes per client, then split each class evenly.

    Coverage first: shuffled classes are dealt one each to shuffled clients,
    then every client draws its remaining classes without replacement.
    Samples of a class held by m clients split floor(N_i/m) each, leftover
    round-robin (ascending deficit, ties by client index).
    """
    num_classes = ds.num_classes
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not 1 <= c <= num_classes:
        raise ValueError("c must satisfy 1 <= c <= num_classes")
    if num_clients * c < num_classes:
        raise CoverageInfeasibleError(
            f"K*c = {num_clients * c} < C = {num_classes}: some class would be unassigned"
        )
    gen = rng.stream(seed, "labelqty-assign")
    class_order = gen.permutation(num_classes)
    client_order = gen.permutation(num_clients)
    assigned: list[set[int]] = [set() for _ in range(num_clients)]
    for i, cls in enumerate(class_order):
        assigned[client_order[i % num_clients]].add(int(cls))
    for k in range(num_clients):
        missing = c - len(assigned[k])
        if missing > 0:
            pool = np.array(sorted(set(range(num_classes)) - assigned[k]), dtype=np.int64)
            extra = gen.choice(pool, size=missing, replace=False)
            assigned[k].update(int(x) for x in extra)

    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for cls in range(num_classes):
        holders = np.array([k for k in range(num_clients) if cls in assigned[k]], dtype=np.int64)
        members = np.flatnonzero(ds.labels == cls)
        members = rng.stream(seed, "labelqty-class", cls).permutation(members)
        m = len(holders)
        base = len(members) // m
        offsets = np.arange(m + 1) * base
        for j, k in enumerate(holders):
            parts[k].append(members[offsets[j] : offsets[j + 1]])
        order = np.arange(m)  # equal shares, so deficit ties break by client index
        _deal_leftovers(order, members[offsets[-1] :], parts, holders)

    clients = [np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in parts]
    if min(len(cl) for cl in clients) < 1:
        raise DegeneratePartitionError("label-quantity produced an empty client")
    return PartitionPlan(
        clients=clients, scheme=SCHEME_LABEL_QUANTITY, params={"c": int(c)}, seed=seed
    )


def make_partition(ds: LabeledDataset, num_clients: int, spec: PartitionSpec, seed: int) -> PartitionPlan:
    """Dispatch to the scheme named by ``spec``."""
    if spec.scheme == SCHEME_IID:
        return partition_iid(ds, num_clients, seed)
    if spec.scheme == SCHEME_QUANTITY:
        return partition_quantity_skew(ds, num_clients, spec.alpha, seed)
    if spec.scheme == SCHEME_LABEL_DIR:
        return partition_label_dirichlet(ds, num_clients, spec.alpha, seed)
    return partition_label_quantity(ds, num_clients, spec.c, seed)


def restrict(ds: LabeledDataset, plan: PartitionPlan, k: int) -> LabeledDataset:
    """Materialize client k's local dataset; the global class count is retained."""
    if not 0 <= k < plan.num_clients:
        raise IndexError(f"client index {k} out of range for {plan.num_clients} clients")
    idx = plan.clients[k]
    return LabeledDataset(
        features=ds.features[idx],
        labels=ds.labels[idx],
        num_classes=ds.num_classes,
        true_labels=ds.true_labels[idx] if ds.true_labels is not None else None,
        name=f"{ds.name}[client{k}]",
    )


def save_plan(plan: PartitionPlan, path: str) -> None:
    """Write the canonical plan JSON (sorted indices, sorted keys)."""
    doc = {
        "scheme": plan.scheme,
        "params": plan.params,
        "seed": plan.seed,
        "clients": [c.tolist() for c in plan.clients],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_plan(path: str) -> PartitionPlan:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return PartitionPlan(
        clients=[np.asarray(c, dtype=np.int64) for c in doc["clients"]],
        scheme=doc["scheme"],
        params=doc["params"],
        seed=int(doc["seed"]),
    )
