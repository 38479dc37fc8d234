"""Round-based federated averaging over in-process nodes.

Each round: every node trains locally from the broadcast global model, the
server takes a convex combination of the uploads, and observers see an
immutable record of the round. Observers cannot influence training, and the
message counter covers exactly the N uploads and N downloads per round
whether or not any observer is attached.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .data import Dataset
from .nn import (
    LayeredParams,
    Network,
    forward_batch,
    loss_and_grad,
    make_params,
    params_from_bytes,
    params_to_bytes,
    sgd_step,
)
from .seeding import stream

AGGREGATIONS = ("uniform", "dataset_size_weighted")


@dataclass(frozen=True)
class NodeState:
    """One learning node: its id and its local labeled data."""

    node_id: int
    dataset: Dataset

    def __post_init__(self):
        if len(self.dataset) == 0:
            raise ValueError(f"node {self.node_id}: empty dataset")


def make_nodes(datasets: Sequence[Dataset]) -> list[NodeState]:
    """Wrap per-node datasets with contiguous ids 0..N-1."""
    return [NodeState(i, ds) for i, ds in enumerate(datasets)]


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 50
    local_passes: int = 1
    batch_size: int = 32
    lr: float = 0.05
    aggregation: str = "uniform"
    master_seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.local_passes < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_passes and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass(frozen=True)
class RoundRecord:
    """Everything an auditor may see about one round."""

    epoch: int
    local_params: tuple[LayeredParams, ...]
    global_params: LayeredParams


@dataclass(frozen=True)
class RoundSummary:
    epoch: int
    messages: int


@dataclass(frozen=True)
class TrainResult:
    final_params: LayeredParams
    history: tuple[RoundSummary, ...]
    message_count: int


class RoundObserver(Protocol):
    def on_round(self, record: RoundRecord) -> None: ...


def model_inputs(net: Network, images: np.ndarray) -> np.ndarray:
    """Reshape (n, H, W) images to the network's input layout."""
    return images.reshape((len(images),) + net.input_shape)


def local_train(
    net: Network,
    node: NodeState,
    global_params: LayeredParams,
    cfg: TrainConfig,
    epoch: int,
) -> LayeredParams:
    """Mini-batch SGD passes over the node's data, starting from the global
    model; batch order comes from a stream keyed on (seed, node, epoch)."""
    params = global_params
    if cfg.lr == 0:
        return params
    rng = stream(cfg.master_seed, "batches", node.node_id, epoch)
    inputs = model_inputs(net, node.dataset.images)
    labels = node.dataset.labels
    for _ in range(cfg.local_passes):
        order = rng.permutation(len(labels))
        for start in range(0, len(labels), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = loss_and_grad(net, params, (inputs[idx], labels[idx]))
            params = sgd_step(params, grads, cfg.lr)
    return params


def aggregate(local_params: Sequence[LayeredParams], weights: Sequence[float]) -> LayeredParams:
    """Elementwise convex combination of the uploads."""
    if not local_params:
        raise ValueError("no local parameter sets to aggregate")
    if len(weights) != len(local_params):
        raise ValueError("weights length != number of parameter sets")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    shapes = local_params[0].shapes()
    for p in local_params[1:]:
        if p.shapes() != shapes:
            raise ValueError("parameter shapes differ across nodes")
    w = w / w.sum()
    # anchor-plus-deviations form: exact when uploads coincide, and well
    # conditioned when they are close (the usual FL regime)
    anchor = local_params[0]
    pairs = []
    for li in range(len(shapes)):
        aw, ab = anchor.layers[li]
        dw = sum(wi * (p.layers[li][0] - aw) for wi, p in zip(w[1:], local_params[1:]))
        db = sum(wi * (p.layers[li][1] - ab) for wi, p in zip(w[1:], local_params[1:]))
        pairs.append((aw + dw, ab + db))
    return make_params(pairs)


def run_training(
    net: Network,
    init_params: LayeredParams,
    nodes: Sequence[NodeState],
    cfg: TrainConfig,
    observers: Sequence[RoundObserver] = (),
    parallel: bool = False,
) -> TrainResult:
    """E rounds of local training, aggregation, and broadcast.

    Per-node RNG streams are independent, so sequential and parallel
    execution of one round produce bit-identical aggregates.
    """
    if not nodes:
        raise ValueError("need at least one node")
    if [n.node_id for n in nodes] != list(range(len(nodes))):
        raise ValueError("node ids must be contiguous 0..N-1")
    if cfg.aggregation == "dataset_size_weighted":
        weights = [float(len(n.dataset)) for n in nodes]
    else:
        weights = [1.0] * len(nodes)

    global_params = init_params
    messages = 0
    history = []
    for epoch in range(cfg.rounds):
        if parallel:
            with ThreadPoolExecutor(max_workers=len(nodes)) as pool:
                locals_ = list(
                    pool.map(lambda n: local_train(net, n, global_params, cfg, epoch), nodes)
                )
        else:
            locals_ = [local_train(net, n, global_params, cfg, epoch) for n in nodes]
        messages += len(nodes)  # uploads
        global_params = aggregate(locals_, weights)
        messages += len(nodes)  # broadcast of the new global
        record = RoundRecord(epoch, tuple(locals_), global_params)
        for obs in observers:
            obs.on_round(record)
        history.append(RoundSummary(epoch, 2 * len(nodes)))
    return TrainResult(global_params, tuple(history), messages)


def save_round_record(record: RoundRecord, path) -> None:
    """Checkpoint one round: JSON header, then the global and each node's
    parameter block in serialization order."""
    blocks = [params_to_bytes(record.global_params)]
    blocks.extend(params_to_bytes(p) for p in record.local_params)
    header = {
        "epoch": record.epoch,
        "nodes": len(record.local_params),
        "block_bytes": [len(b) for b in blocks],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for block in blocks:
            fh.write(block)


def load_round_record(path) -> RoundRecord:
    with open(path, "rb") as fh:
        raw = fh.read()
    head, _, payload = raw.partition(b"\n")
    header = json.loads(head.decode())
    params = []
    offset = 0
    for size in header["block_bytes"]:
        params.append(params_from_bytes(payload[offset : offset + size]))
        offset += size
    return RoundRecord(header["epoch"], tuple(params[1:]), params[0])


@dataclass(frozen=True)
class EvalResult:
    """Overall accuracy plus per-class accuracy (NaN for absent classes)."""

    overall: float
    per_class: np.ndarray


def evaluate(net: Network, params: LayeredParams, ds: Dataset, batch_size: int = 512) -> EvalResult:
    if len(ds) == 0:
        raise ValueError("empty evaluation dataset")
    inputs = model_inputs(net, ds.images)
    correct = np.zeros(ds.class_count)
    seen = np.zeros(ds.class_count)
    for start in range(0, len(ds), batch_size):
        stop = start + batch_size
        logits = forward_batch(net, params, inputs[start:stop])[-1]
        preds = np.argmax(logits, axis=1)
        labels = ds.labels[start:stop]
        np.add.at(seen, labels, 1)
        np.add.at(correct, labels[preds == labels], 1)
    with np.errstate(invalid="ignore"):
        per_class = np.where(seen > 0, correct / np.maximum(seen, 1), np.nan)
    return EvalResult(float(correct.sum() / len(ds)), per_class)
