"""Experiment harness: config files, arms, metrics CSV, tau calibration.

Configs are flat sectioned key=value text ('#' starts a comment line); every
key has a default, so an empty file is a runnable experiment.  A run produces
one MetricsRecord per round and can be replayed bit-identically from
(config, seed, arm); for that reason the wall_ms CSV column is written as 0
(the measured per-round time is kept on the in-memory records only).
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .compression import KINDS, CompressionStrategy, compress, to_bytes
from .environment import (
    PLACEMENTS,
    Area,
    DistributionSpec,
    Topology,
    build_topology,
    deploy_devices,
    idx_label_skew_spec,
    load_idx,
    sample_local_dataset,
    synthetic_blob_spec,
)
from .neuralnet import Architecture, LabeledDataset, ParameterSet, TrainingConfig, init_parameters
from .protocol import (
    ARMS,
    FederationPartition,
    ProtocolConfig,
    SimulationState,
    evaluate_objective,
    make_state,
    run_round,
)
from .seeds import derive_seed


class ConfigError(ValueError):
    """Raised for malformed or out-of-range experiment configs."""


@dataclass(frozen=True)
class EnvironmentConfig:
    width: float = 10.0
    height: float = 10.0
    rows: int = 2
    cols: int = 2
    n: int = 64
    r_c: float | None = None  # None = 1.5x lattice pitch
    placement: str = "jittered-grid"
    seed: int = 42


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic-blobs"
    samples_per_device: int = 300
    test_samples: int = 400
    validation_fraction: float = 0.2
    classes_per_subregion: int = 2
    feature_dim: int = 2
    blob_std: float = 0.08
    epsilon: float = 0.0
    idx_images: str = ""
    idx_labels: str = ""


@dataclass(frozen=True)
class ProtocolSection:
    tau: float = 4.0
    kind: str = "sparse+quantized"
    psi: float = 0.3
    similarity_uses_compressed: bool = True
    rounds: int = 50
    local_epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 0.1


@dataclass(frozen=True)
class OutputConfig:
    csv: str = "metrics.csv"
    checkpoint_dir: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    layers: tuple[int, ...] = (2, 16, 8)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def num_subregions(self) -> int:
        return self.environment.rows * self.environment.cols


_SECTION_KEYS = {
    "environment": ("width", "height", "rows", "cols", "n", "r_c", "placement", "seed"),
    "data": (
        "kind",
        "samples_per_device",
        "test_samples",
        "validation_fraction",
        "classes_per_subregion",
        "feature_dim",
        "blob_std",
        "epsilon",
        "idx_images",
        "idx_labels",
    ),
    "model": ("layers",),
    "protocol": (
        "tau",
        "kind",
        "psi",
        "similarity_uses_compressed",
        "rounds",
        "local_epochs",
        "batch_size",
        "learning_rate",
    ),
    "output": ("csv", "checkpoint_dir"),
}


class _Entries:
    """Raw key=value entries with the line each came from."""

    def __init__(self) -> None:
        self.values: dict[tuple[str, str], tuple[str, int]] = {}

    def put(self, section: str, key: str, value: str, line: int) -> None:
        if (section, key) in self.values:
            raise ConfigError(f"line {line}: duplicate key '{key}' in [{section}]")
        self.values[(section, key)] = (value, line)

    def raw(self, section: str, key: str) -> tuple[str, int] | None:
        return self.values.get((section, key))

    def get(self, section: str, key: str, convert, default, check=None):
        entry = self.raw(section, key)
        if entry is None:
            return default
        value, line = entry
        try:
            out = convert(value)
        except (ValueError, TypeError):
            raise ConfigError(
                f"line {line}: cannot parse '{value}' for {section}.{key}"
            ) from None
        if check is not None:
            problem = check(out)
            if problem:
                raise ConfigError(f"line {line}: {section}.{key} {problem} (got {value})")
        return out


def _as_bool(value: str) -> bool:
    low = value.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(value)


def _as_layers(value: str) -> tuple[int, ...]:
    parts = [p.strip() for p in value.split(",") if p.strip()]
    if len(parts) < 2:
        raise ValueError(value)
    return tuple(int(p) for p in parts)


def _as_radius(value: str) -> float | None:
    if value.lower() in ("", "auto"):
        return None
    return float(value)


def parse_config(text: str) -> ExperimentConfig:
    """Parse sectioned key=value text; every error names its line."""
    entries = _Entries()
    section: str | None = None
    for line_no, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTION_KEYS:
                raise ConfigError(f"line {line_no}: unknown section [{name}]")
            section = name
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got '{line}'")
        if section is None:
            raise ConfigError(f"line {line_no}: key before any [section] header")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SECTION_KEYS[section]:
            raise ConfigError(f"line {line_no}: unknown key '{key}' in [{section}]")
        entries.put(section, key, value, line_no)

    positive = lambda v: None if v > 0 else "must be > 0"
    at_least_1 = lambda v: None if v >= 1 else "must be >= 1"

    env = EnvironmentConfig(
        width=entries.get("environment", "width", float, 10.0, positive),
        height=entries.get("environment", "height", float, 10.0, positive),
        rows=entries.get("environment", "rows", int, 2, at_least_1),
        cols=entries.get("environment", "cols", int, 2, at_least_1),
        n=entries.get("environment", "n", int, 64, at_least_1),
        r_c=entries.get(
            "environment", "r_c", _as_radius, None,
            lambda v: None if v is None or v > 0 else "must be > 0 or auto",
        ),
        placement=entries.get(
            "environment", "placement", str, "jittered-grid",
            lambda v: None if v in PLACEMENTS else f"must be one of {PLACEMENTS}",
        ),
        seed=entries.get("environment", "seed", int, 42, lambda v: None if v >= 0 else "must be >= 0"),
    )
    data = DataConfig(
        kind=entries.get(
            "data", "kind", str, "synthetic-blobs",
            lambda v: None
            if v in ("synthetic-blobs", "idx-label-skew")
            else "must be synthetic-blobs or idx-label-skew",
        ),
        samples_per_device=entries.get(
            "data", "samples_per_device", int, 300,
            lambda v: None if v >= 2 else "must be >= 2",
        ),
        test_samples=entries.get("data", "test_samples", int, 400, at_least_1),
        validation_fraction=entries.get(
            "data", "validation_fraction", float, 0.2,
            lambda v: None if 0.0 < v < 1.0 else "must be in (0, 1)",
        ),
        classes_per_subregion=entries.get(
            "data", "classes_per_subregion", int, 2, at_least_1
        ),
        feature_dim=entries.get(
            "data", "feature_dim", int, 2, lambda v: None if v >= 2 else "must be >= 2"
        ),
        blob_std=entries.get("data", "blob_std", float, 0.08, positive),
        epsilon=entries.get(
            "data", "epsilon", float, 0.0,
            lambda v: None if 0.0 <= v < 1.0 else "must be in [0, 1)",
        ),
        idx_images=entries.get("data", "idx_images", str, ""),
        idx_labels=entries.get("data", "idx_labels", str, ""),
    )
    layers = entries.get(
        "model", "layers", _as_layers, (2, 16, 8),
        lambda v: None if all(s >= 1 for s in v) else "layer sizes must be >= 1",
    )
    protocol = ProtocolSection(
        tau=entries.get(
            "protocol", "tau", float, 4.0,
            lambda v: None if math.isfinite(v) and v > 0 else "must be finite and > 0",
        ),
        kind=entries.get(
            "protocol", "kind", str, "sparse+quantized",
            lambda v: None if v in KINDS else f"must be one of {KINDS}",
        ),
        psi=entries.get(
            "protocol", "psi", float, 0.3,
            lambda v: None if 0.0 <= v <= 1.0 else "must be in [0, 1]",
        ),
        similarity_uses_compressed=entries.get(
            "protocol", "similarity_uses_compressed", _as_bool, True
        ),
        rounds=entries.get("protocol", "rounds", int, 50, at_least_1),
        local_epochs=entries.get("protocol", "local_epochs", int, 3, at_least_1),
        batch_size=entries.get("protocol", "batch_size", int, 32, at_least_1),
        learning_rate=entries.get("protocol", "learning_rate", float, 0.1, positive),
    )
    output = OutputConfig(
        csv=entries.get("output", "csv", str, "metrics.csv"),
        checkpoint_dir=entries.get("output", "checkpoint_dir", str, ""),
    )
    cfg = ExperimentConfig(env, data, layers, protocol, output)

    if data.kind == "idx-label-skew":
        for key, path in (("idx_images", data.idx_images), ("idx_labels", data.idx_labels)):
            if not path:
                raise ConfigError(f"data.{key} is required when data.kind = idx-label-skew")
            if not os.path.exists(path):
                raise ConfigError(f"data.{key}: file not found: {path}")
    else:
        if layers[0] != data.feature_dim:
            raise ConfigError(
                f"model.layers input width {layers[0]} != data.feature_dim {data.feature_dim}"
            )
        total_classes = cfg.num_subregions * data.classes_per_subregion
        if layers[-1] != total_classes:
            raise ConfigError(
                f"model.layers output width {layers[-1]} != "
                f"{cfg.num_subregions} subregions x {data.classes_per_subregion} classes "
                f"= {total_classes}"
            )
    return cfg


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def format_config(cfg: ExperimentConfig) -> str:
    """Write a config back out so that parse_config(format_config(c)) == c."""
    env, data, protocol, output = cfg.environment, cfg.data, cfg.protocol, cfg.output
    lines = [
        "[environment]",
        f"width = {env.width!r}",
        f"height = {env.height!r}",
        f"rows = {env.rows}",
        f"cols = {env.cols}",
        f"n = {env.n}",
        f"r_c = {'auto' if env.r_c is None else repr(env.r_c)}",
        f"placement = {env.placement}",
        f"seed = {env.seed}",
        "",
        "[data]",
        f"kind = {data.kind}",
        f"samples_per_device = {data.samples_per_device}",
        f"test_samples = {data.test_samples}",
        f"validation_fraction = {data.validation_fraction!r}",
        f"classes_per_subregion = {data.classes_per_subregion}",
        f"feature_dim = {data.feature_dim}",
        f"blob_std = {data.blob_std!r}",
        f"epsilon = {data.epsilon!r}",
        f"idx_images = {data.idx_images}",
        f"idx_labels = {data.idx_labels}",
        "",
        "[model]",
        f"layers = {','.join(str(s) for s in cfg.layers)}",
        "",
        "[protocol]",
        f"tau = {protocol.tau!r}",
        f"kind = {protocol.kind}",
        f"psi = {protocol.psi!r}",
        f"similarity_uses_compressed = {'true' if protocol.similarity_uses_compressed else 'false'}",
        f"rounds = {protocol.rounds}",
        f"local_epochs = {protocol.local_epochs}",
        f"batch_size = {protocol.batch_size}",
        f"learning_rate = {protocol.learning_rate!r}",
        "",
        "[output]",
        f"csv = {output.csv}",
        f"checkpoint_dir = {output.checkpoint_dir}",
    ]
    return "\n".join(lines) + "\n"


# ---- building a runnable world from a config ----


@dataclass
class World:
    """Everything a run needs, derived deterministically from (config, seed)."""

    area: Area
    topology: Topology
    spec: DistributionSpec
    datasets: list[LabeledDataset]
    test_sets: list[LabeledDataset]
    init_params: ParameterSet
    protocol: ProtocolConfig
    master_seed: int


def resolve_radius(cfg: ExperimentConfig) -> float:
    env = cfg.environment
    if env.r_c is not None:
        return env.r_c
    g = math.ceil(math.sqrt(env.n))
    return 1.5 * max(env.width / g, env.height / g)


def build_world(cfg: ExperimentConfig, seed: int | None = None) -> World:
    """Materialize area, devices, data, and initial model for one run.

    All randomness is derived from the master seed (environment.seed unless
    overridden), so two calls with the same inputs build identical worlds.
    """
    env, data = cfg.environment, cfg.data
    master = env.seed if seed is None else seed
    area = Area(env.width, env.height, env.rows, env.cols)
    k = area.num_subregions

    sites = deploy_devices(area, env.n, env.placement, derive_seed(master, 0))
    topology = build_topology(sites, resolve_radius(cfg))

    if data.kind == "synthetic-blobs":
        spec = synthetic_blob_spec(
            k,
            classes_per_subregion=data.classes_per_subregion,
            feature_dim=data.feature_dim,
            std=data.blob_std,
            seed=derive_seed(master, 1),
        )
    else:
        pool = load_idx(data.idx_images, data.idx_labels)
        spec = idx_label_skew_spec(pool, k, data.epsilon)
        if cfg.layers[0] != pool.features.shape[1]:
            raise ConfigError(
                f"model.layers input width {cfg.layers[0]} != "
                f"IDX feature dim {pool.features.shape[1]}"
            )
        if cfg.layers[-1] != spec.num_classes:
            raise ConfigError(
                f"model.layers output width {cfg.layers[-1]} != "
                f"{spec.num_classes} classes in the IDX pool"
            )

    data_seed = derive_seed(master, 2)
    datasets = [
        sample_local_dataset(spec, site.subregion_id, data.samples_per_device, data_seed, salt=site.uid)
        for site in sites
    ]
    test_seed = derive_seed(master, 3)
    test_sets = [
        sample_local_dataset(spec, j, data.test_samples, test_seed, salt=1_000_000 + j)
        for j in range(k)
    ]
    init = init_parameters(Architecture(cfg.layers), derive_seed(master, 4))
    protocol = ProtocolConfig(
        tau=cfg.protocol.tau,
        strategy=CompressionStrategy(cfg.protocol.kind, cfg.protocol.psi),
        training=TrainingConfig(
            local_epochs=cfg.protocol.local_epochs,
            batch_size=cfg.protocol.batch_size,
            learning_rate=cfg.protocol.learning_rate,
            rng_seed=derive_seed(master, 5),
        ),
        rounds=cfg.protocol.rounds,
        validation_fraction=data.validation_fraction,
        similarity_uses_compressed=cfg.protocol.similarity_uses_compressed,
    )
    return World(area, topology, spec, datasets, test_sets, init, protocol, master)


# ---- running experiments ----


@dataclass
class MetricsRecord:
    """One round's metrics; the partition and byte split are kept for
    inspection but only the schema columns go to CSV."""

    round_index: int
    federation_count: int
    region_accuracy: tuple[float, ...]
    region_loss: tuple[float, ...]
    objective: float
    bytes_round: int
    bytes_total: int
    macs: int
    wall_ms: float
    bytes_broadcast: int = 0
    bytes_collect: int = 0
    bytes_disseminate: int = 0
    partition: FederationPartition | None = None


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    state: SimulationState
    final_models: dict[int, ParameterSet]
    final_partition: FederationPartition
    world: World


def run_experiment_result(
    cfg: ExperimentConfig, arm: str = "sparsefuel", seed: int | None = None
) -> ExperimentResult:
    """Run all rounds of one arm and keep the final state around."""
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}, expected one of {ARMS}")
    world = build_world(cfg, seed)
    state = make_state(
        world.topology, world.datasets, world.init_params, world.protocol.validation_fraction
    )
    records: list[MetricsRecord] = []
    final_models: dict[int, ParameterSet] = {}
    final_partition: FederationPartition | None = None
    for t in range(1, world.protocol.rounds + 1):
        started = time.perf_counter()
        stats = run_round(state, world.protocol, t, arm)
        objective, accs, losses = evaluate_objective(
            stats.partition, stats.models_by_leader, world.test_sets, world.topology.sites
        )
        wall_ms = (time.perf_counter() - started) * 1000.0
        records.append(
            MetricsRecord(
                round_index=t,
                federation_count=len(stats.partition),
                region_accuracy=tuple(accs),
                region_loss=tuple(losses),
                objective=objective,
                bytes_round=stats.bytes_round,
                bytes_total=state.bytes_total,
                macs=stats.macs,
                wall_ms=wall_ms,
                bytes_broadcast=stats.bytes_broadcast,
                bytes_collect=stats.bytes_collect,
                bytes_disseminate=stats.bytes_disseminate,
                partition=stats.partition,
            )
        )
        final_models = stats.models_by_leader
        final_partition = stats.partition
    return ExperimentResult(records, state, final_models, final_partition, world)


def run_experiment(
    cfg: ExperimentConfig, arm: str = "sparsefuel", seed: int | None = None
) -> list[MetricsRecord]:
    """Run one arm of the experiment and return per-round metrics."""
    return run_experiment_result(cfg, arm, seed).records


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def metrics_csv_text(records: list[MetricsRecord]) -> str:
    """Render records to the fixed CSV schema (LF line endings).

    Columns: round, federations, objective, acc_region_0..k-1,
    loss_region_0..k-1, bytes_round, bytes_total, macs, wall_ms.  wall_ms is
    written as 0 so that identical runs produce byte-identical files.
    """
    if not records:
        raise ValueError("no records to write")
    k = len(records[0].region_accuracy)
    header = (
        ["round", "federations", "objective"]
        + [f"acc_region_{j}" for j in range(k)]
        + [f"loss_region_{j}" for j in range(k)]
        + ["bytes_round", "bytes_total", "macs", "wall_ms"]
    )
    lines = [",".join(header)]
    for r in records:
        row = (
            [str(r.round_index), str(r.federation_count), _fmt(r.objective)]
            + [_fmt(a) for a in r.region_accuracy]
            + [_fmt(l) for l in r.region_loss]
            + [str(r.bytes_round), str(r.bytes_total), str(r.macs), "0"]
        )
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_metrics_csv(records: list[MetricsRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(metrics_csv_text(records))


# ---- tau calibration ----


@dataclass
class CalibrationResult:
    tau: float
    intra_median: float
    inter_median: float
    intra_edges: int
    inter_edges: int


def calibrate_tau(
    cfg: ExperimentConfig, seed: int | None = None, warmup_rounds: int = 3
) -> CalibrationResult:
    """Recommend tau as the midpoint of intra- and inter-region dissimilarity.

    Runs warmup_rounds of communication-free local training from the shared
    initial model, then measures one round's dissimilarity on every topology
    edge and splits the scores by whether the endpoints share a subregion.
    Deterministic in (config, seed, warmup_rounds).
    """
    if warmup_rounds < 0:
        raise ValueError("warmup_rounds must be >= 0")
    world = build_world(cfg, seed)
    state = make_state(
        world.topology, world.datasets, world.init_params, world.protocol.validation_fraction
    )
    for t in range(1, warmup_rounds + 1):
        run_round(state, world.protocol, t, arm="isolated")
    stats = run_round(state, world.protocol, warmup_rounds + 1, arm="sparsefuel")
    assert stats.dissimilarity is not None
    sites = world.topology.sites
    intra, inter = [], []
    for (i, j), value in sorted(stats.dissimilarity.values.items()):
        if sites[i].subregion_id == sites[j].subregion_id:
            intra.append(value)
        else:
            inter.append(value)
    if not intra or not inter:
        raise ValueError(
            "calibration needs both intra- and inter-region topology edges "
            f"(got {len(intra)} intra, {len(inter)} inter)"
        )
    intra_median = float(np.median(intra))
    inter_median = float(np.median(inter))
    return CalibrationResult(
        tau=(intra_median + inter_median) / 2.0,
        intra_median=intra_median,
        inter_median=inter_median,
        intra_edges=len(intra),
        inter_edges=len(inter),
    )


# ---- checkpoints ----


def save_checkpoints(result: ExperimentResult, directory: str) -> list[str]:
    """Write the final representative model as dense plus the configured wire
    kind (when not dense); returns the paths written."""
    os.makedirs(directory, exist_ok=True)
    partition = result.final_partition
    rep = max(partition.federations, key=lambda f: (len(f.members), -f.leader))
    model = result.final_models[rep.leader]
    strategy = result.world.protocol.strategy
    paths = []
    dense_path = os.path.join(directory, "final_dense.spfl")
    with open(dense_path, "wb") as f:
        f.write(to_bytes(compress(model, CompressionStrategy("dense"))))
    paths.append(dense_path)
    if strategy.kind != "dense":
        kind_path = os.path.join(directory, f"final_{strategy.kind}.spfl")
        with open(kind_path, "wb") as f:
            f.write(to_bytes(compress(model, strategy)))
        paths.append(kind_path)
    return paths
