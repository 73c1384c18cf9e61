"""Ground-truth oracle: the miniature tabular benchmark.

Every canonical class of an enumerable space gets stand-alone training
records (multiple seeds) produced with one fixed recipe.  Tables
persist as JSON lines with a metadata header and build incrementally
through an append-only journal, so interrupted builds resume.  A
closed-form surrogate table provides an instant oracle for tests.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from snbench import nnops
from snbench.autodiff import ComputeGraph
from snbench.canon import canonical_hash
from snbench.dataset import SyntheticDataset, generate_dataset
from snbench.errors import DivergedTraining, NotFound, TooLarge
from snbench.optim import SGD, TrainProtocol, cosine_lr
from snbench.space import (
    ArchEncoding,
    ENUMERATION_CAP,
    SearchSpaceDef,
    SpaceIndex,
    build_index,
    prune_to_cell,
    space_digest,
)
from snbench.standalone import StandaloneNet
from snbench.training import eval_standalone_accuracy

DEFAULT_STANDALONE_SEEDS = 3


@dataclass(frozen=True)
class GTRecord:
    canon_id: str
    accs: tuple[float, ...]
    params: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.accs))

    @property
    def std(self) -> float:
        return float(np.std(self.accs))

    def to_json(self) -> dict:
        return {
            "canon_id": self.canon_id,
            "accs": list(self.accs),
            "mean": self.mean,
            "std": self.std,
            "params": self.params,
        }


class GroundTruthTable:
    """Canonical-class id to stand-alone accuracy records."""

    def __init__(self, records: dict[str, GTRecord], metadata: dict):
        self.records = records
        self.metadata = metadata
        self._means = {c: r.mean for c, r in records.items()}
        ordered = sorted(self._means.values(), reverse=True)
        self._sorted_means = np.array(ordered)

    def query(self, canon_id: str) -> GTRecord:
        rec = self.records.get(canon_id)
        if rec is None:
            raise NotFound(f"no record for canonical id {canon_id[:16]}...")
        return rec

    def mean_acc(self, canon_id: str) -> float:
        return self.query(canon_id).mean

    def rank_of(self, canon_id: str) -> int:
        """Competition rank: 1 plus the number of strictly better records."""
        acc = self.query(canon_id).mean
        return 1 + int(np.sum(self._sorted_means > acc))

    def n_records(self) -> int:
        return len(self.records)

    def all_means(self) -> np.ndarray:
        return self._sorted_means.copy()

    # persistence -----------------------------------------------------------

    def save_jsonl(self, path) -> None:
        path = Path(path)
        with open(path, "w") as f:
            f.write(json.dumps({"metadata": self.metadata}, sort_keys=True) + "\n")
            for canon in sorted(self.records):
                f.write(json.dumps(self.records[canon].to_json(), sort_keys=True) + "\n")

    @staticmethod
    def load_jsonl(path) -> "GroundTruthTable":
        path = Path(path)
        if not path.exists():
            raise NotFound(f"oracle table not found: {path}")
        records: dict[str, GTRecord] = {}
        metadata: dict = {}
        with open(path) as f:
            for line in f:
                obj = json.loads(line)
                if "metadata" in obj:
                    metadata = obj["metadata"]
                    continue
                rec = GTRecord(obj["canon_id"], tuple(obj["accs"]), obj["params"])
                records[rec.canon_id] = rec
        return GroundTruthTable(records, metadata)

    def write_csv(self, path, comment: str = "") -> None:
        with open(path, "w") as f:
            if comment:
                f.write(f"# {comment}\n")
            f.write("canon_id,mean_test_acc,std_test_acc,n_seeds,params\n")
            for canon in sorted(self.records, key=lambda c: -self.records[c].mean):
                r = self.records[canon]
                f.write(f"{canon},{r.mean:.6f},{r.std:.6f},{len(r.accs)},{r.params}\n")


def _seed_for(canon_id: str, base_seed: int, trial: int) -> int:
    digest = hashlib.sha256(f"{base_seed}:{canon_id}:{trial}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def train_standalone(space: SearchSpaceDef, enc: ArchEncoding, dataset: SyntheticDataset,
                     protocol: TrainProtocol, n_seeds: int = DEFAULT_STANDALONE_SEEDS,
                     init_channels: int = 8, layers: int = 1) -> list[float]:
    """Per-seed test accuracies of one architecture trained from scratch."""
    cell = prune_to_cell(space, enc)
    canon = canonical_hash(cell)
    accs = []
    for trial in range(n_seeds):
        seed = _seed_for(canon, protocol.seed, trial)
        net = StandaloneNet(
            space, enc, dataset.num_classes,
            init_channels=init_channels, layers=layers, seed=seed,
        )
        _fit_standalone(net, dataset, protocol, seed)
        accs.append(eval_standalone_accuracy(net, dataset.x_test, dataset.y_test,
                                             protocol.batch_size))
    return accs


def _fit_standalone(net: StandaloneNet, dataset: SyntheticDataset,
                    protocol: TrainProtocol, seed: int) -> None:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x_all, y_all = dataset.x_train, dataset.y_train
    n_used = int(len(x_all) * protocol.train_portion)
    sgd = SGD(net.params, momentum=0.9, weight_decay=protocol.weight_decay)
    for epoch in range(protocol.epochs):
        lr = cosine_lr(epoch, protocol.epochs, protocol.lr0)
        order = rng.permutation(n_used)
        for start in range(0, n_used - protocol.batch_size + 1, protocol.batch_size):
            idx = order[start : start + protocol.batch_size]
            g = ComputeGraph("train")
            logits = net.forward(g, x_all[idx])
            loss = nnops.softmax_cross_entropy(g, logits, y_all[idx])
            if not np.isfinite(loss.data):
                raise DivergedTraining(f"stand-alone training diverged at epoch {epoch}")
            g.backward(loss)
            sgd.step(lr)
            sgd.zero_grad()


# ---------------------------------------------------------------------------
# Table construction

_WORKER_STATE: dict = {}


def _worker_init(space_json, dataset_args, protocol_json, init_channels, layers, n_seeds):
    _WORKER_STATE["space"] = SearchSpaceDef.from_json(space_json)
    _WORKER_STATE["dataset"] = generate_dataset(*dataset_args)
    _WORKER_STATE["protocol"] = TrainProtocol.from_json(protocol_json)
    _WORKER_STATE["init_channels"] = init_channels
    _WORKER_STATE["layers"] = layers
    _WORKER_STATE["n_seeds"] = n_seeds


def _worker_train(task):
    canon, enc_json = task
    space = _WORKER_STATE["space"]
    enc = ArchEncoding.from_json(json.loads(enc_json))
    accs = train_standalone(
        space, enc, _WORKER_STATE["dataset"], _WORKER_STATE["protocol"],
        n_seeds=_WORKER_STATE["n_seeds"],
        init_channels=_WORKER_STATE["init_channels"],
        layers=_WORKER_STATE["layers"],
    )
    net = StandaloneNet(space, enc, _WORKER_STATE["dataset"].num_classes,
                        init_channels=_WORKER_STATE["init_channels"],
                        layers=_WORKER_STATE["layers"])
    return canon, accs, net.total_params()


def worker_count() -> int:
    env = os.environ.get("SNB_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def build_table(space: SearchSpaceDef, dataset: SyntheticDataset,
                protocol: TrainProtocol, *, n_seeds: int = DEFAULT_STANDALONE_SEEDS,
                init_channels: int = 8, layers: int = 1,
                journal_path=None, cap: int = ENUMERATION_CAP,
                workers: int | None = None, progress=None) -> GroundTruthTable:
    """Train every canonical class representative; resumable via journal.

    Total work is |classes| * n_seeds stand-alone trainings, distributed
    over a process pool (bounded by SNB_WORKERS).
    """
    index = build_index(space, cap)
    if index.n_classes > cap:
        raise TooLarge(f"{index.n_classes} classes exceed the cap {cap}")
    metadata = {
        "space": space.to_json(),
        "space_digest": space_digest(space),
        "protocol": protocol.to_json(),
        "dataset_seed": dataset.seed,
        "dataset_noise": dataset.noise,
        "n_train": len(dataset.x_train) + len(dataset.x_val),
        "n_test": len(dataset.x_test),
        "n_seeds": n_seeds,
        "init_channels": init_channels,
        "layers": layers,
    }
    records: dict[str, GTRecord] = {}
    journal = Path(journal_path) if journal_path else None
    if journal and journal.exists():
        with open(journal) as f:
            for line in f:
                obj = json.loads(line)
                if "metadata" in obj:
                    if obj["metadata"] != metadata:
                        raise ValueError("journal was built with a different configuration")
                    continue
                rec = GTRecord(obj["canon_id"], tuple(obj["accs"]), obj["params"])
                records[rec.canon_id] = rec
    pending = [
        (canon, index.representative(canon).dumps())
        for canon in index.class_ids
        if canon not in records
    ]
    journal_f = None
    if journal:
        fresh = not journal.exists()
        journal_f = open(journal, "a")
        if fresh:
            journal_f.write(json.dumps({"metadata": metadata}, sort_keys=True) + "\n")
            journal_f.flush()
    worker_args = (
        space.to_json(),
        (dataset.seed, len(dataset.x_train) + len(dataset.x_val), len(dataset.x_test), dataset.noise),
        protocol.to_json(),
        init_channels,
        layers,
        n_seeds,
    )
    try:
        n_workers = workers if workers is not None else worker_count()
        if n_workers == 1:
            _worker_init(*worker_args)
            results = map(_worker_train, pending)
            _consume(results, records, journal_f, progress, len(pending))
        else:
            with ProcessPoolExecutor(max_workers=n_workers, initializer=_worker_init,
                                     initargs=worker_args) as pool:
                results = pool.map(_worker_train, pending, chunksize=8)
                _consume(results, records, journal_f, progress, len(pending))
    finally:
        if journal_f:
            journal_f.close()
    return GroundTruthTable(records, metadata)


def _consume(results, records, journal_f, progress, total):
    for i, (canon, accs, params) in enumerate(results):
        rec = GTRecord(canon, tuple(accs), params)
        records[canon] = rec
        if journal_f:
            journal_f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
            journal_f.flush()
        if progress and (i + 1) % 50 == 0:
            progress(i + 1, total)


# ---------------------------------------------------------------------------
# Closed-form surrogate


def surrogate_accuracy(space: SearchSpaceDef, enc: ArchEncoding) -> float:
    """Deterministic score standing in for a trained accuracy.

    Computed on the canonical cell, so topologically equivalent
    encodings score identically.
    """
    cell = prune_to_cell(space, enc)
    return _surrogate_from_cell(cell)


def _surrogate_from_cell(cell) -> float:
    canon = canonical_hash(cell)
    if cell.node_ops is not None:
        ops = [op for _, op in cell.node_ops]
    else:
        ops = [op for _, op in cell.edge_ops]
    counts = {name: ops.count(name) for name in ("conv3x3", "conv1x1", "zeroize")}
    depth = _longest_path(cell)
    noise = (int(canon[:12], 16) / 16**12 - 0.5) * 0.01
    score = (
        0.70
        + 0.02 * counts["conv3x3"]
        + 0.01 * counts["conv1x1"]
        - 0.03 * counts["zeroize"]
        + 0.005 * depth
        + noise
    )
    return float(min(1.0, max(0.0, score)))


def _longest_path(cell) -> int:
    dist = {v: 0 for v in cell.nodes}
    for v in cell.nodes:
        for u, _ in cell.in_edges(v):
            dist[v] = max(dist[v], dist[u] + 1)
    return dist[cell.output_node]


def surrogate_table(space: SearchSpaceDef, cap: int = ENUMERATION_CAP) -> GroundTruthTable:
    """Instant oracle over the enumerated space using the surrogate."""
    index = build_index(space, cap)
    records = {}
    for canon in index.class_ids:
        enc = index.representative(canon)
        cell = prune_to_cell(space, enc)
        acc = _surrogate_from_cell(cell)
        records[canon] = GTRecord(canon, (acc, acc, acc), 0)
    metadata = {
        "space": space.to_json(),
        "space_digest": space_digest(space),
        "oracle": "surrogate",
    }
    return GroundTruthTable(records, metadata)
