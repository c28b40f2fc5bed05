"""The per-round federation protocol.

Each synchronous round every device: compresses its model, trains it locally
under the compression mask, broadcasts the compressed result to its radio
neighbors, scores pairwise dissimilarity as the sum of cross losses on the
two devices' held-out validation splits, keeps only edges at or under the
threshold tau, elects the minimum uid of each surviving component as leader,
collects member models up a hop tree to the leader, averages them, sends the
average back down, and adopts it.  Every step is deterministic: devices are
iterated in uid order and all aggregation happens in uid order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import fields
from .compression import (
    CompressedModel,
    CompressionStrategy,
    compress,
    decompress,
    encode_wire,
    from_bytes,
    nonzero_macs,
    to_bytes,
)
from .environment import DeviceSite, Topology
from .neuralnet import (
    LabeledDataset,
    ParameterSet,
    TrainingConfig,
    local_training,
    loss_and_accuracy,
)
from .seeds import derive_seed

ARMS = ("sparsefuel", "global-fedavg", "isolated")


@dataclass(frozen=True)
class Federation:
    """One federation: its elected leader and the member uid set."""

    leader: int
    members: frozenset[int]
    round_formed: int = 0

    def __post_init__(self) -> None:
        if self.leader not in self.members:
            raise ValueError(f"leader {self.leader} is not a member")


@dataclass
class FederationPartition:
    """Disjoint federations covering every device, sorted by leader uid."""

    federations: list[Federation]
    round_formed: int = 0

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for fed in self.federations:
            if fed.members & seen:
                raise ValueError("federations must be disjoint")
            seen |= fed.members
        self.federations = sorted(self.federations, key=lambda f: f.leader)

    def __len__(self) -> int:
        return len(self.federations)

    def member_sets(self) -> list[frozenset[int]]:
        return [f.members for f in self.federations]

    def federation_of(self, uid: int) -> Federation:
        for fed in self.federations:
            if uid in fed.members:
                return fed
        raise KeyError(f"device {uid} is in no federation")


@dataclass
class DissimilarityMatrix:
    """Symmetric edge scores; stored once per undirected pair (i < j)."""

    values: dict[tuple[int, int], float] = field(default_factory=dict)

    @staticmethod
    def _key(i: int, j: int) -> tuple[int, int]:
        if i == j:
            raise ValueError("dissimilarity is defined between distinct devices")
        return (i, j) if i < j else (j, i)

    def put(self, i: int, j: int, value: float) -> None:
        value = float(value)
        if not value >= 0.0:
            raise ValueError(f"dissimilarity must be non-negative, got {value}")
        self.values[self._key(i, j)] = value

    def get(self, i: int, j: int) -> float:
        return self.values[self._key(i, j)]

    def has(self, i: int, j: int) -> bool:
        return self._key(i, j) in self.values


@dataclass(frozen=True)
class ProtocolConfig:
    """Round-loop parameters: gating threshold, wire compression, training."""

    tau: float
    strategy: CompressionStrategy
    training: TrainingConfig
    rounds: int = 50
    validation_fraction: float = 0.2
    similarity_uses_compressed: bool = True

    def __post_init__(self) -> None:
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ValueError(f"tau must be finite and > 0, got {self.tau}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must be in (0, 1)")


def cross_similarity(
    model_i: ParameterSet,
    model_j: ParameterSet,
    val_i: LabeledDataset,
    val_j: LabeledDataset,
) -> float:
    """Pairwise dissimilarity: j's loss on i's validation split plus i's on j's."""
    if not model_i.same_shape(model_j):
        raise ValueError("cannot compare models with different architectures")
    loss_ij, _ = loss_and_accuracy(model_j, val_i)
    loss_ji, _ = loss_and_accuracy(model_i, val_j)
    return loss_ij + loss_ji


def similarity_graph(topology: Topology, ds: DissimilarityMatrix, tau: float) -> fields.FieldGraph:
    """Topology with edges above the dissimilarity threshold removed."""
    for i, j in topology.edges():
        if not ds.has(i, j):
            raise ValueError(f"dissimilarity missing for topology edge {i}-{j}")
    return fields.FieldGraph.from_topology(topology, keep_edge=lambda i, j: ds.get(i, j) <= tau)


def _partition_from_field(
    gfield: fields.GradientField, round_formed: int
) -> FederationPartition:
    members: dict[int, set[int]] = {}
    for uid, src in gfield.source.items():
        members.setdefault(src, set()).add(uid)
    feds = [
        Federation(leader, frozenset(uids), round_formed)
        for leader, uids in members.items()
    ]
    return FederationPartition(feds, round_formed)


def form_federations(
    topology: Topology, ds: DissimilarityMatrix, tau: float, round_formed: int = 0
) -> FederationPartition:
    """Connected components of the tau-gated graph, led by their minimum uid."""
    graph = similarity_graph(topology, ds, tau)
    leaders = fields.s_block(graph)
    gfield = fields.g_block(graph, [u for u, flag in leaders.items() if flag])
    return _partition_from_field(gfield, round_formed)


def fed_avg(models: Sequence[ParameterSet], weights: Sequence[float] | None = None) -> ParameterSet:
    """Weighted elementwise mean, folded in the given (uid) order.

    Accumulation is anchored on the first model (sum of weighted deltas), so
    averaging any number of copies of one model returns it bit-exactly.
    """
    if not models:
        raise ValueError("cannot average zero models")
    if weights is None:
        weights = [1.0] * len(models)
    if len(weights) != len(models):
        raise ValueError("one weight per model required")
    if any(not w > 0 for w in weights):
        raise ValueError("weights must be positive")
    base = models[0]
    for m in models[1:]:
        if not base.same_shape(m):
            raise ValueError("cannot average models with different architectures")
    total = float(sum(weights))
    out = base.copy()
    for layer in range(base.num_layers):
        acc_w = np.zeros_like(base.weights[layer])
        acc_b = np.zeros_like(base.biases[layer])
        for m, w in zip(models, weights):
            acc_w += w * (m.weights[layer] - base.weights[layer])
            acc_b += w * (m.biases[layer] - base.biases[layer])
        out.weights[layer] += acc_w / total
        out.biases[layer] += acc_b / total
    return out


@dataclass
class DeviceState:
    """One device: its uid, train/validation split, and current model."""

    uid: int
    train: LabeledDataset
    val: LabeledDataset
    params: ParameterSet

    @property
    def num_samples(self) -> int:
        return len(self.train) + len(self.val)


@dataclass
class SimulationState:
    """Everything that evolves across rounds."""

    topology: Topology
    devices: list[DeviceState]
    round_index: int = 0
    bytes_total: int = 0


def make_state(
    topology: Topology,
    datasets: Sequence[LabeledDataset],
    init_params: ParameterSet,
    validation_fraction: float,
) -> SimulationState:
    """Split each local dataset into train/validation and seed every device
    with a copy of the same initial model.

    The validation split is the first floor(fraction * m) rows (at least one
    row each side), which is deterministic because dataset sampling is.
    """
    if len(datasets) != topology.n:
        raise ValueError("one dataset per device required")
    if not (0.0 < validation_fraction < 1.0):
        raise ValueError("validation_fraction must be in (0, 1)")
    devices = []
    for uid, data in enumerate(datasets):
        if len(data) < 2:
            raise ValueError(f"device {uid}: need at least 2 samples to split")
        n_val = min(len(data) - 1, max(1, int(validation_fraction * len(data))))
        idx = np.arange(len(data))
        devices.append(
            DeviceState(
                uid=uid,
                train=data.subset(idx[n_val:]),
                val=data.subset(idx[:n_val]),
                params=init_params.copy(),
            )
        )
    return SimulationState(topology, devices)


@dataclass
class RoundStats:
    """What one round produced, for metrics and tests."""

    round_index: int
    partition: FederationPartition
    models_by_leader: dict[int, ParameterSet]
    bytes_broadcast: int
    bytes_collect: int
    bytes_disseminate: int
    macs: int
    dissimilarity: DissimilarityMatrix | None

    @property
    def bytes_round(self) -> int:
        return self.bytes_broadcast + self.bytes_collect + self.bytes_disseminate


def _merge_uid_sorted(a: list, b: list) -> list:
    """Merge two uid-sorted (uid, model) lists; associative and commutative."""
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        if a[i][0] <= b[j][0]:
            out.append(a[i])
            i += 1
        else:
            out.append(b[j])
            j += 1
    out.extend(a[i:])
    out.extend(b[j:])
    return out


def run_round(
    state: SimulationState, cfg: ProtocolConfig, round_index: int, arm: str = "sparsefuel"
) -> RoundStats:
    """Advance the simulation by one synchronous round.

    arm selects the experiment variant: "sparsefuel" runs the full protocol;
    "global-fedavg" skips the similarity exchange and forces one federation
    of everyone; "isolated" stops after local training (no communication).
    """
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}, expected one of {ARMS}")
    topo = state.topology

    # compress, train under the mask, and encode the wire artifact
    trained: dict[int, ParameterSet] = {}
    decoded: dict[int, ParameterSet] = {}
    wire_blobs: dict[int, bytes] = {}
    for dev in state.devices:
        cm = compress(dev.params, cfg.strategy)
        start = decompress(cm)
        tcfg = replace(cfg.training, rng_seed=derive_seed(cfg.training.rng_seed, dev.uid))
        params = local_training(start, dev.train, tcfg, mask=cm.mask, round_index=round_index)
        trained[dev.uid] = params
        wire = encode_wire(params, cfg.strategy, cm.mask)
        if not cfg.similarity_uses_compressed:
            wire = CompressedModel("dense", params=params.copy())
        blob = to_bytes(wire)
        wire_blobs[dev.uid] = blob
        decoded[dev.uid] = decompress(from_bytes(blob))

    if arm == "isolated":
        for dev in state.devices:
            dev.params = trained[dev.uid]
        partition = FederationPartition(
            [Federation(dev.uid, frozenset([dev.uid]), round_index) for dev in state.devices],
            round_index,
        )
        models = {dev.uid: trained[dev.uid] for dev in state.devices}
        macs = _representative_macs(partition, trained)
        state.round_index = round_index
        return RoundStats(round_index, partition, models, 0, 0, 0, macs, None)

    bytes_broadcast = 0
    ds = None
    if arm == "sparsefuel":
        # neighbor broadcast: every device sends its wire artifact to each neighbor
        bytes_broadcast = sum(
            len(wire_blobs[dev.uid]) * len(topo.neighbors(dev.uid)) for dev in state.devices
        )
        ds = DissimilarityMatrix()
        for i, j in topo.edges():
            loss_ij, _ = loss_and_accuracy(decoded[j], state.devices[i].val)
            loss_ji, _ = loss_and_accuracy(decoded[i], state.devices[j].val)
            ds.put(i, j, loss_ij + loss_ji)
        graph = similarity_graph(topo, ds, cfg.tau)
    else:
        graph = fields.FieldGraph.from_topology(topo)

    if arm == "global-fedavg":
        leader_list = [min(u for u in graph.nodes)]
        gfield = fields.g_block(graph, leader_list)
        partition = FederationPartition(
            [Federation(leader_list[0], frozenset(graph.nodes), round_index)], round_index
        )
    else:
        flags = fields.s_block(graph)
        leader_list = [u for u, flag in flags.items() if flag]
        gfield = fields.g_block(graph, leader_list)
        partition = _partition_from_field(gfield, round_index)

    # tree collection to each leader, weighted average, tree dissemination
    leader_set = set(leader_list)
    contributions = {
        uid: [(uid, trained[uid] if uid in leader_set else decoded[uid])]
        for uid in gfield.hops
        if gfield.hops[uid] != fields.INFINITE
    }
    collected = fields.c_block(gfield, contributions, _merge_uid_sorted, [])
    bytes_collect = sum(
        int(gfield.hops[uid]) * len(wire_blobs[uid])
        for uid in gfield.hops
        if gfield.hops[uid] not in (0, fields.INFINITE)
    )

    models_by_leader: dict[int, ParameterSet] = {}
    bytes_disseminate = 0
    for leader in sorted(collected):
        pairs = collected[leader]
        weights = [state.devices[uid].num_samples for uid, _ in pairs]
        averaged = fed_avg([m for _, m in pairs], weights)
        models_by_leader[leader] = averaged
        blob = to_bytes(CompressedModel("dense", params=averaged))
        bytes_disseminate += (len(pairs) - 1) * len(blob)

    delivered = fields.broadcast_block(gfield, models_by_leader)
    for dev in state.devices:
        if dev.uid in delivered:
            dev.params = delivered[dev.uid].copy()
        else:
            # no wire path to any leader (disconnected forced federation):
            # keep the locally trained model
            dev.params = trained[dev.uid]

    macs = _representative_macs(partition, trained)
    state.round_index = round_index
    state.bytes_total += bytes_broadcast + bytes_collect + bytes_disseminate
    return RoundStats(
        round_index,
        partition,
        models_by_leader,
        bytes_broadcast,
        bytes_collect,
        bytes_disseminate,
        macs,
        ds,
    )


def _representative_macs(partition: FederationPartition, trained: Mapping[int, ParameterSet]) -> int:
    """MAC proxy of the largest federation's leader model as trained this
    round (ties on size go to the lowest leader uid)."""
    rep = max(partition.federations, key=lambda f: (len(f.members), -f.leader))
    return nonzero_macs(trained[rep.leader])


def evaluate_objective(
    partition: FederationPartition,
    models_by_leader: Mapping[int, ParameterSet],
    test_sets: Sequence[LabeledDataset],
    sites: Sequence[DeviceSite],
) -> tuple[float, list[float], list[float]]:
    """Objective plus per-subregion accuracy and loss.

    The objective sums, over federations, the federation model's mean loss on
    the test set of the subregion hosting its leader.  Per-subregion metrics
    come from the model its devices actually use: the federation holding the
    plurality of the subregion's devices (ties to the lowest leader uid); a
    subregion with no devices reports nan.
    """
    k = len(test_sets)
    objective = 0.0
    for fed in partition.federations:
        subregion = sites[fed.leader].subregion_id
        loss, _ = loss_and_accuracy(models_by_leader[fed.leader], test_sets[subregion])
        objective += loss

    accs = [float("nan")] * k
    losses = [float("nan")] * k
    for j in range(k):
        counts: dict[int, int] = {}
        for site in sites:
            if site.subregion_id != j:
                continue
            fed = partition.federation_of(site.uid)
            counts[fed.leader] = counts.get(fed.leader, 0) + 1
        if not counts:
            continue
        leader = max(counts, key=lambda u: (counts[u], -u))
        loss, acc = loss_and_accuracy(models_by_leader[leader], test_sets[j])
        losses[j] = loss
        accs[j] = acc
    return objective, accs, losses
