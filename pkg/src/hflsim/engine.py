"""Federated round loop: flat FedAvg and zonal (hierarchical) FedAvg with DP noise placement."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

from hflsim import datagen, numkit, secureagg
from hflsim.datagen import LabeledBatch, Partition
from hflsim.dpcore import SITES, DpPolicy, PrivacyLedger, RoundEntry, accountant_compose, gaussian_noise, user_weight
from hflsim.errors import ConfigurationError, DivergenceError
from hflsim.numkit import ClipMode, Model, ParamVector
from hflsim.seeding import Purpose, SeedTree
from hflsim.topology import ElectionState, RoundView, Topology, build_topology, elect_supernode, sample_online

ROUNDS_HEADER = (
    "round",
    "placement",
    "s",
    "k_online",
    "train_loss",
    "val_loss",
    "val_acc",
    "eps_aggregator",
    "eps_site",
    "secureagg_msgs",
)

LOSS_LIMIT = 1e6


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "linear"
    hidden_dim: int = 0


@dataclass(frozen=True)
class DataSpec:
    kind: str = "blobs"
    classes: int = 10
    dim: int = 32
    per_class: int = 250
    separation: float = 4.0
    partition: str = "iid"
    dirichlet_alpha: float = 0.5
    val_fraction: float = 0.2
    path: Optional[str] = None


@dataclass(frozen=True)
class TopoSpec:
    clients: int = 100
    zones: int = 10
    sampling: str = "bernoulli"
    q: float = 0.1
    k: Optional[int] = None

    @property
    def effective_q(self) -> float:
        if self.sampling == "fixed_k":
            if self.k is None:
                raise ConfigurationError("topo.k is required for fixed_k sampling")
            return self.k / self.clients
        return self.q


@dataclass(frozen=True)
class EngineSpec:
    rounds: int = 10
    local_epochs: int = 1
    client_lr: float = 0.02
    server_lr: float = 1.0
    batch_size: int = 10
    zone_combine: str = "weighted"
    secure_agg: bool = False
    denominator: str = "expected"
    frac_bits: int = 24


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    topo: TopoSpec = field(default_factory=TopoSpec)
    dp: DpPolicy = field(default_factory=DpPolicy)
    engine: EngineSpec = field(default_factory=EngineSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.engine.rounds < 1:
            raise ConfigurationError("engine.rounds must be >= 1")
        if self.engine.server_lr <= 0:
            raise ConfigurationError("engine.server_lr must be positive")
        if self.engine.zone_combine not in ("uniform", "weighted"):
            raise ConfigurationError("engine.zone_combine must be 'uniform' or 'weighted'")
        if self.engine.denominator not in ("expected", "realized"):
            raise ConfigurationError("engine.denominator must be 'expected' or 'realized'")
        if self.topo.zones > self.topo.clients:
            raise ConfigurationError("topo.zones must not exceed topo.clients")

    def with_updates(self, **sections: Any) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``with_updates(dp={"z": 0.0}, seed=3)``."""
        kwargs = {}
        for name, value in sections.items():
            if isinstance(value, dict):
                kwargs[name] = replace(getattr(self, name), **value)
            else:
                kwargs[name] = value
        return replace(self, **kwargs)


@dataclass
class RoundRecord:
    round: int
    placement: str
    s: int
    k_online: int
    train_loss: float
    val_loss: float
    val_acc: float
    eps_aggregator: float
    eps_site: float
    secureagg_msgs: int
    zone_counts: list[int] = field(default_factory=list)
    supernodes: list[Optional[int]] = field(default_factory=list)
    skipped: bool = False

    def row(self) -> list[str]:
        return [
            str(self.round),
            self.placement,
            str(self.s),
            str(self.k_online),
            _fmt(self.train_loss),
            _fmt(self.val_loss),
            _fmt(self.val_acc),
            _fmt(self.eps_aggregator),
            _fmt(self.eps_site),
            str(self.secureagg_msgs),
        ]


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


@dataclass
class TraceRound:
    """Everything an observer at any level could see in one round."""

    round: int
    theta: np.ndarray
    online: list[np.ndarray]
    supernodes: list[Optional[int]]
    weights: dict[int, float]
    clean: dict[int, np.ndarray]
    sent: dict[int, np.ndarray]
    client_sigma: dict[int, float]
    zone_sums: dict[int, np.ndarray]
    zone_outputs: dict[int, np.ndarray]
    zone_denoms: dict[int, float]
    zone_sigma: dict[int, float]
    agg_sigma: float
    denom_total: float
    global_update: np.ndarray
    combine: str
    secure_agg: bool
    server_lr: float


@dataclass
class Experiment:
    config: ExperimentConfig
    model: Model
    train: LabeledBatch
    val: LabeledBatch
    partition: Partition
    topology: Topology
    weights: np.ndarray
    init: ParamVector
    seeds: SeedTree


@dataclass
class RunResult:
    params: ParamVector
    records: list[RoundRecord]
    ledger: PrivacyLedger
    trace: Optional[list[TraceRound]] = None
    param_history: Optional[list[np.ndarray]] = None

    def __iter__(self):
        return iter((self.params, self.records, self.ledger))

    def summary(self) -> dict:
        last = self.records[-1]
        return {
            "final_val_acc": last.val_acc,
            "final_val_loss": last.val_loss,
            "rounds": len(self.records),
            "eps": {k: v for k, v in self.ledger.to_dict()["eps"].items()},
            "eps_aggregator_shuffled": _none_if_inf(self.ledger.shuffled_aggregator()),
            "lemma_mode": self.ledger.lemma_mode,
        }


def _none_if_inf(x: float) -> Optional[float]:
    return None if math.isinf(x) else x


def worker_count() -> int:
    raw = os.environ.get("HFLSIM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"HFLSIM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigurationError("HFLSIM_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def prepare(config: ExperimentConfig) -> Experiment:
    """Build data, partition, topology and initial parameters from a config."""
    seeds = SeedTree(config.seed)
    d = config.data
    if d.kind == "blobs":
        full = datagen.gen_blobs(d.classes, d.dim, d.per_class, d.separation, seeds.rng(Purpose.DATA, 0))
        num_classes = d.classes
    elif d.kind == "csv":
        if not d.path:
            raise ConfigurationError("data.path is required for csv data")
        full = datagen.load_csv(d.path)
        num_classes = max(full.num_classes, d.classes if d.classes else 0)
    else:
        raise ConfigurationError(f"unknown data.kind {d.kind!r}")
    train, val = datagen.train_val_split(full, d.val_fraction, seeds.rng(Purpose.DATA, 1))
    prng = seeds.rng(Purpose.PARTITION)
    if d.partition == "iid":
        partition = datagen.partition_iid(train, config.topo.clients, prng)
    elif d.partition == "dirichlet":
        partition = datagen.partition_label_skew(train, config.topo.clients, d.dirichlet_alpha, prng)
    else:
        raise ConfigurationError(f"unknown data.partition {d.partition!r}")
    topology = build_topology(config.topo.clients, config.topo.zones, client_sizes=partition.sizes)
    model = Model(config.model.kind, full.dim, num_classes, config.model.hidden_dim)
    if config.dp.clip.mode == "per-layer" and len(config.dp.clip.bound) != len(model.layout):  # type: ignore[arg-type]
        raise ConfigurationError(f"per-layer clipping needs {len(model.layout)} bounds")
    weights = np.array([user_weight(n, config.dp.user_cap) for n in partition.sizes])
    init = numkit.init_params(model, seeds.rng(Purpose.INIT))
    return Experiment(config, model, train, val, partition, topology, weights, init, seeds)


@dataclass
class _ClientOut:
    cid: int
    clean: np.ndarray
    sent: np.ndarray
    sigma: float


def _client_step(exp: Experiment, theta: ParamVector, cid: int, round_: int, add_noise: bool) -> _ClientOut:
    cfg = exp.config
    trained = numkit.sgd_epochs(
        exp.model,
        theta,
        exp.partition.clients[cid],
        cfg.engine.client_lr,
        cfg.engine.local_epochs,
        cfg.engine.batch_size,
        exp.seeds.rng(Purpose.TRAIN, round_, cid),
    )
    clipped = numkit.clip(trained - theta, cfg.dp.clip)
    sigma = cfg.dp.z * cfg.dp.clip.sensitivity if add_noise else 0.0
    sent = clipped.values
    if sigma > 0:
        sent = sent + gaussian_noise(clipped, sigma, exp.seeds.rng(Purpose.CLIENT_NOISE, round_, cid)).values
    return _ClientOut(cid, clipped.values, sent, sigma)


def _denominator(exp: Experiment, members: Sequence[int], online: np.ndarray) -> float:
    """Averaging denominator for a group of clients: q*W (expected) or realized W."""
    cfg = exp.config
    q = cfg.topo.effective_q
    realized = float(exp.weights[online].sum()) if online.size else 0.0
    if cfg.dp.clip.mode == "per-layer":
        w_min = cfg.dp.w_min if cfg.dp.w_min is not None else float(exp.weights[list(members)].sum())
        return max(q * w_min, realized)
    if cfg.engine.denominator == "realized":
        return realized
    return q * float(exp.weights[list(members)].sum())


def _noise_sigma(exp: Experiment, denom: float, members: Sequence[int]) -> float:
    cfg = exp.config
    if cfg.dp.clip.mode == "per-layer":
        q = cfg.topo.effective_q
        w_min = cfg.dp.w_min if cfg.dp.w_min is not None else float(exp.weights[list(members)].sum())
        return 2.0 * cfg.dp.z * cfg.dp.clip.sensitivity / (q * w_min)
    return cfg.dp.z * cfg.dp.clip.sensitivity / denom


def _site_plan(exp: Experiment, hierarchical: bool) -> tuple[np.ndarray, np.ndarray, bool]:
    """Noise sites for a placement: per-client and per-zone flags plus the aggregator flag."""
    cfg = exp.config
    placement = cfg.dp.placement
    s, n = exp.topology.s, exp.topology.n
    client_noise = np.zeros(n, dtype=bool)
    zone_noise = np.zeros(s, dtype=bool)
    if placement == "none" or cfg.dp.z == 0:
        return client_noise, zone_noise, False
    clients_site, zones_site, agg_site = SITES[placement]
    if not hierarchical and zones_site:
        raise ConfigurationError(f"placement {placement} needs super-nodes; use the hierarchical engine")
    zone_of = exp.topology.zone_of()
    alpha = cfg.dp.alpha or 0.0
    beta = cfg.dp.beta or 0.0
    if placement == "C1":
        client_noise[:] = True
    elif placement == "C2":
        zone_noise[:] = True
    elif placement == "C3":
        n_ldp = int(round(beta * s))
        client_noise[zone_of < n_ldp] = True
        zone_noise[n_ldp:] = True
    elif placement == "C5":
        client_noise[: int(round(alpha * n))] = True
    elif placement == "C6":
        zone_noise[: int(round(beta * s))] = True
    elif placement == "C7":
        n_ldp = int(round(beta * s))
        n_hdp = int(round(alpha * s))
        client_noise[zone_of < n_ldp] = True
        zone_noise[n_ldp : n_ldp + n_hdp] = True
    return client_noise, zone_noise, agg_site


def _evaluate(exp: Experiment, theta: ParamVector) -> tuple[float, float, float]:
    train_loss, _ = numkit.forward_loss(exp.model, theta, exp.train)
    val_loss, val_acc = numkit.forward_loss(exp.model, theta, exp.val)
    return train_loss, val_loss, val_acc


def _run(
    config: ExperimentConfig,
    hierarchical: bool,
    record_trace: bool = False,
    record_params: bool = False,
    experiment: Optional[Experiment] = None,
    callback: Optional[Callable[[RoundRecord], None]] = None,
) -> RunResult:
    exp = experiment if experiment is not None else prepare(config)
    cfg = exp.config
    placement = cfg.dp.placement
    if not hierarchical and placement not in ("none", "C1", "C4"):
        raise ConfigurationError(f"flat runs support placements none, C1, C4; got {placement}")
    topo = exp.topology
    q = cfg.topo.effective_q
    client_noise, zone_noise, agg_noise = _site_plan(exp, hierarchical)
    sites = int(client_noise.sum() + zone_noise.sum() + agg_noise)
    ledger = PrivacyLedger(placement=placement, delta=cfg.dp.delta, alpha=cfg.dp.alpha, beta=cfg.dp.beta)
    codec = secureagg.FixedPointCodec(cfg.engine.frac_bits)
    use_secagg = hierarchical and cfg.engine.secure_agg
    election = ElectionState()
    theta = exp.init
    records: list[RoundRecord] = []
    trace: Optional[list[TraceRound]] = [] if record_trace else None
    history: Optional[list[np.ndarray]] = [theta.values.copy()] if record_params else None
    workers = worker_count()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    all_clients = list(range(topo.n))

    try:
        for t in range(cfg.engine.rounds):
            view = sample_online(topo, cfg.topo.q, exp.seeds.rng(Purpose.SAMPLE, t), cfg.topo.sampling, cfg.topo.k, t)
            if hierarchical:
                groups = [(i, list(topo.zones[i]), view.online[i]) for i in range(topo.s)]
                for i in view.active_zones:
                    view.supernodes[i] = elect_supernode(view.online[i], election, exp.seeds.rng(Purpose.ELECT, t, i), i, t)
            else:
                groups = [(0, all_clients, view.all_online())]
            online_all = view.all_online()
            if online_all.size == 0:
                rec = _record(exp, theta, t, placement, 0, 0, ledger, 0, view, skipped=True)
                records.append(rec)
                if callback:
                    callback(rec)
                if history is not None:
                    history.append(theta.values.copy())
                continue

            def work(cid: int) -> _ClientOut:
                return _client_step(exp, theta, cid, t, bool(client_noise[cid]))

            ids = [int(c) for c in online_all]
            outs = list(pool.map(work, ids)) if pool else [work(c) for c in ids]
            by_id = {o.cid: o for o in outs}

            denom_total = _denominator(exp, all_clients, online_all)
            s_active = 0
            msgs = 0
            zone_sums: dict[int, np.ndarray] = {}
            zone_outputs: dict[int, np.ndarray] = {}
            zone_denoms: dict[int, float] = {}
            zone_sigma: dict[int, float] = {}
            update = np.zeros(theta.size)
            contributions: list[np.ndarray] = []
            for zid, members, online in groups:
                if online.size == 0:
                    continue
                s_active += 1
                contribs = [exp.weights[c] * by_id[int(c)].sent for c in online]
                if use_secagg and online.size > 1:
                    shares = secureagg.mask_shares(
                        [int(c) for c in online], contribs, codec, exp.seeds.rng(Purpose.MASK, t, zid)
                    )
                    zsum = secureagg.unmask_sum(shares, codec).values
                    msgs += secureagg.message_count(online.size)
                else:
                    zsum = np.sum(contribs, axis=0)
                if not hierarchical:
                    zone_sums[zid] = zsum
                    zone_denoms[zid] = denom_total
                    update = zsum / denom_total
                    contributions.append(update)
                    continue
                d_i = _denominator(exp, members, online)
                out = zsum / d_i
                if zone_noise[zid]:
                    sigma_i = _noise_sigma(exp, d_i, members)
                    out = out + gaussian_noise(theta, sigma_i, exp.seeds.rng(Purpose.ZONE_NOISE, t, zid)).values
                    zone_sigma[zid] = sigma_i
                zone_sums[zid] = zsum
                zone_outputs[zid] = out
                zone_denoms[zid] = d_i
            if hierarchical:
                if cfg.engine.zone_combine == "weighted":
                    update = np.zeros(theta.size)
                    for zid, out in zone_outputs.items():
                        update = update + (zone_denoms[zid] / denom_total) * out
                else:
                    update = np.sum(list(zone_outputs.values()), axis=0) / len(zone_outputs)
            agg_sigma = 0.0
            if agg_noise:
                agg_sigma = _noise_sigma(exp, denom_total, all_clients)
                update = update + gaussian_noise(theta, agg_sigma, exp.seeds.rng(Purpose.AGG_NOISE, t)).values
            if trace is not None:
                trace.append(
                    TraceRound(
                        round=t,
                        theta=theta.values.copy(),
                        online=[o.copy() for o in view.online],
                        supernodes=list(view.supernodes),
                        weights={c: float(exp.weights[c]) for c in ids},
                        clean={c: by_id[c].clean for c in ids},
                        sent={c: by_id[c].sent for c in ids},
                        client_sigma={c: by_id[c].sigma for c in ids},
                        zone_sums=zone_sums,
                        zone_outputs=zone_outputs if hierarchical else {0: update},
                        zone_denoms=zone_denoms,
                        zone_sigma=zone_sigma,
                        agg_sigma=agg_sigma,
                        denom_total=denom_total,
                        global_update=update.copy(),
                        combine=cfg.engine.zone_combine if hierarchical else "flat",
                        secure_agg=use_secagg,
                        server_lr=cfg.engine.server_lr,
                    )
                )
            try:
                theta = theta.like(theta.values + cfg.engine.server_lr * update)
            except FloatingPointError:
                raise DivergenceError(f"round {t}: parameters became non-finite") from None
            if placement != "none":
                counts = [c for c in view.zone_counts if c] if hierarchical else [online_all.size]
                ledger = accountant_compose(
                    ledger,
                    RoundEntry(
                        round=t,
                        q=q,
                        z=cfg.dp.z,
                        sites=sites,
                        k_online=int(online_all.size),
                        s_active=s_active,
                        m_min=min(counts),
                        sensitivity=cfg.dp.clip.sensitivity,
                        sigma=max([agg_sigma, *zone_sigma.values(), *(o.sigma for o in outs)]),
                    ),
                )
            rec = _record(exp, theta, t, placement, s_active, int(online_all.size), ledger, msgs, view)
            if not math.isfinite(rec.train_loss) or rec.train_loss > LOSS_LIMIT:
                raise DivergenceError(f"round {t}: train loss {rec.train_loss!r} (placement {placement}, z={cfg.dp.z})")
            records.append(rec)
            if callback:
                callback(rec)
            if history is not None:
                history.append(theta.values.copy())
    finally:
        if pool:
            pool.shutdown()
    return RunResult(theta, records, ledger, trace, history)


def _record(
    exp: Experiment,
    theta: ParamVector,
    t: int,
    placement: str,
    s_active: int,
    k_online: int,
    ledger: PrivacyLedger,
    msgs: int,
    view: RoundView,
    skipped: bool = False,
) -> RoundRecord:
    train_loss, val_loss, val_acc = _evaluate(exp, theta)
    eps_agg = ledger.eps_aggregator if ledger.history else math.inf
    eps_site = ledger.eps_site if ledger.history else math.inf
    return RoundRecord(
        round=t,
        placement=placement,
        s=s_active,
        k_online=k_online,
        train_loss=train_loss,
        val_loss=val_loss,
        val_acc=val_acc,
        eps_aggregator=eps_agg,
        eps_site=eps_site,
        secureagg_msgs=msgs,
        zone_counts=view.zone_counts,
        supernodes=list(view.supernodes),
        skipped=skipped,
    )


def run_flat(config: ExperimentConfig, **kwargs: Any) -> RunResult:
    """FedAvg without zones; placements none, C1 (client noise) or C4 (aggregator noise)."""
    return _run(config, hierarchical=False, **kwargs)


def run_hier(config: ExperimentConfig, **kwargs: Any) -> RunResult:
    """Zonal FedAvg: each zone averages (and possibly noises) its online clients, then zones are combined."""
    return _run(config, hierarchical=True, **kwargs)


def equivalence(config: ExperimentConfig) -> list[float]:
    """Max per-coordinate |flat - hierarchical| after every round, with all noise off."""
    cfg = config.with_updates(dp={"placement": "none", "z": 0.0, "alpha": None, "beta": None})
    exp = prepare(cfg)
    flat = run_flat(cfg, record_params=True, experiment=exp)
    hier = run_hier(cfg, record_params=True, experiment=exp)
    return [float(np.max(np.abs(a - b))) for a, b in zip(flat.param_history[1:], hier.param_history[1:])]  # type: ignore[index]


def rounds_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUNDS_HEADER)
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue()


SWEEP_HEADER = ("placement", "s", "k", "z", "seed", "final_val_acc", "final_val_loss", "eps_aggregator", "eps_site", "status")


def sweep(configs: Sequence[ExperimentConfig], hierarchical: bool = True) -> list[dict]:
    """Run each config; failures are recorded in the ``status`` column and the sweep continues."""
    if not configs:
        raise ConfigurationError("empty sweep")

    def one(cfg: ExperimentConfig) -> dict:
        k = cfg.topo.k if cfg.topo.sampling == "fixed_k" else round(cfg.topo.q * cfg.topo.clients)
        row = {"placement": cfg.dp.placement, "s": cfg.topo.zones, "k": k, "z": cfg.dp.z, "seed": cfg.seed}
        try:
            res = run_hier(cfg) if hierarchical else run_flat(cfg)
        except Exception as exc:  # noqa: BLE001 - a failed run must not stop the sweep
            return {**row, "final_val_acc": math.nan, "final_val_loss": math.nan, "eps_aggregator": math.nan, "eps_site": math.nan, "status": f"error: {exc}"}
        last = res.records[-1]
        return {
            **row,
            "final_val_acc": last.val_acc,
            "final_val_loss": last.val_loss,
            "eps_aggregator": res.ledger.eps_aggregator if res.ledger.history else math.inf,
            "eps_site": res.ledger.eps_site if res.ledger.history else math.inf,
            "status": "ok",
        }

    return [one(c) for c in configs]


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        writer.writerow([_fmt(r[h]) if isinstance(r[h], float) else str(r[h]) for h in SWEEP_HEADER])
    return buf.getvalue()


def config_dict(config: ExperimentConfig) -> dict:
    out = asdict(config)
    clip = config.dp.clip
    out["dp"]["clip"] = {"mode": clip.mode, "bound": clip.bound}
    return out
