"""Honest-but-curious gradient inversion against recorded federated rounds.

An adversary observes an update at one of three levels, converts it back into a
sum of per-example gradients, and reconstructs the inputs by gradient matching.
Reconstruction quality is reported as input-space MSE.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from hflsim.datagen import Partition
from hflsim.dpcore import PLACEMENT_NAMES, DpPolicy
from hflsim.engine import DataSpec, EngineSpec, ExperimentConfig, ModelSpec, TopoSpec, TraceRound, prepare, run_hier
from hflsim.errors import ConfigurationError
from hflsim.numkit import LINEAR, ClipMode, Model, ParamVector, softmax, unpack
from hflsim.seeding import Purpose, SeedTree
from hflsim.topology import Topology

LEVEL_CLIENT, LEVEL_SUPERNODE, LEVEL_AGGREGATOR = 0, 1, 2


@dataclass
class Observation:
    """What one adversary sees: ``values = sum(coef[c] * sent[c]) + noise``."""

    level: int
    values: np.ndarray
    coef: dict[int, float]
    aggregate_only: bool = False

    @property
    def contributors(self) -> list[int]:
        return sorted(self.coef)


def _contribution_coef(tr: TraceRound, cid: int) -> float:
    zone = next(i for i, o in enumerate(tr.online) if cid in o)
    w = tr.weights[cid]
    if tr.combine in ("flat", "weighted"):
        return w / tr.denom_total
    return w / (tr.zone_denoms[zone] * len(tr.zone_outputs))


def observe_gradient(trace: Sequence[TraceRound], level: int, round_: int, target: int, adversary: Optional[int] = None) -> Observation:
    """View of an adversary at ``level`` in round ``round_``.

    Level 0: the global update minus the adversary's own contribution.
    Level 1: the target's weighted update as received by its super-node, or only the
    zone sum when secure aggregation is on.
    Level 2: the target zone's (possibly noised) aggregate.
    """
    tr = next((r for r in trace if r.round == round_), None)
    if tr is None:
        raise ConfigurationError(f"round {round_} not in trace")
    zone = next((i for i, o in enumerate(tr.online) if target in o), None)
    if zone is None:
        raise ConfigurationError(f"target {target} not online in round {round_}")
    if level == LEVEL_CLIENT:
        if adversary is None or adversary not in tr.sent:
            raise ConfigurationError("a level-0 adversary must be an online client")
        own = _contribution_coef(tr, adversary) * tr.sent[adversary]
        others = {c: _contribution_coef(tr, c) for c in tr.sent if c != adversary}
        return Observation(level, tr.global_update - own, others)
    if level == LEVEL_SUPERNODE:
        members = [int(c) for c in tr.online[zone]]
        if tr.secure_agg:
            return Observation(level, tr.zone_sums[zone].copy(), {c: tr.weights[c] for c in members}, aggregate_only=True)
        return Observation(level, tr.weights[target] * tr.sent[target], {target: tr.weights[target]})
    if level == LEVEL_AGGREGATOR:
        members = [int(c) for c in tr.online[zone]]
        d = tr.zone_denoms[zone]
        return Observation(level, tr.zone_outputs[zone].copy(), {c: tr.weights[c] / d for c in members}, aggregate_only=True)
    raise ConfigurationError(f"unknown observation level {level}")


def update_to_gradient(obs: Observation, client_lr: float) -> np.ndarray:
    """Sum of per-example gradients implied by an observation of one-step, batch-1 updates.

    Assumes every contributor carries the same coefficient (uniform user weights).
    """
    coefs = np.array(list(obs.coef.values()))
    if not np.allclose(coefs, coefs[0]):
        raise ConfigurationError("gradient conversion needs equal contribution coefficients")
    return obs.values / (-client_lr * coefs[0])


def batch_gradient(model: Model, values: np.ndarray, x: np.ndarray, y_soft: np.ndarray) -> np.ndarray:
    """Sum over the batch of per-example cross-entropy gradients (soft labels allowed)."""
    layers = unpack(model, values)
    if model.kind == LINEAR:
        W, b = layers
        g = softmax(x @ W.T + b) - y_soft
        return np.concatenate([(g.T @ x).ravel(), g.sum(axis=0)])
    W1, b1, W2, b2 = layers
    h = np.tanh(x @ W1.T + b1)
    g = softmax(h @ W2.T + b2) - y_soft
    da = (g @ W2) * (1.0 - h * h)
    return np.concatenate([(da.T @ x).ravel(), da.sum(axis=0), (g.T @ h).ravel(), g.sum(axis=0)])


def _softmax_jvp(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    pv = p * v
    return pv - p * pv.sum(axis=1, keepdims=True)


def matching_loss_and_grad(
    model: Model, values: np.ndarray, x: np.ndarray, y_soft: np.ndarray, target: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """||batch_gradient(x) - target||^2 with its gradients w.r.t. ``x`` and the soft labels."""
    layers = unpack(model, values)
    if model.kind == LINEAR:
        W, b = layers
        c, d = W.shape
        p = softmax(x @ W.T + b)
        g = p - y_soft
        R = g.T @ x - target[: c * d].reshape(c, d)
        r = g.sum(axis=0) - target[c * d :]
        adj_g = x @ R.T + r
        adj_x = g @ R + _softmax_jvp(p, adj_g) @ W
        loss = float(np.sum(R * R) + np.sum(r * r))
        return loss, 2.0 * adj_x, -2.0 * adj_g
    W1, b1, W2, b2 = layers
    hdim, d = W1.shape
    c = W2.shape[0]
    o1, o2, o3 = hdim * d, hdim * d + hdim, hdim * d + hdim + c * hdim
    h = np.tanh(x @ W1.T + b1)
    p = softmax(h @ W2.T + b2)
    g = p - y_soft
    dh = g @ W2
    dpre = 1.0 - h * h
    da = dh * dpre
    R1 = da.T @ x - target[:o1].reshape(hdim, d)
    r1 = da.sum(axis=0) - target[o1:o2]
    R2 = g.T @ h - target[o2:o3].reshape(c, hdim)
    r2 = g.sum(axis=0) - target[o3:]
    adj_g = h @ R2.T + r2
    adj_h = g @ R2
    adj_da = x @ R1.T + r1
    adj_x = da @ R1
    adj_dh = adj_da * dpre
    adj_h += adj_da * dh * (-2.0 * h)
    adj_g += adj_dh @ W2.T
    adj_h += _softmax_jvp(p, adj_g) @ W2
    adj_x += (adj_h * dpre) @ W1
    loss = float(np.sum(R1 * R1) + np.sum(r1 * r1) + np.sum(R2 * R2) + np.sum(r2 * r2))
    return loss, 2.0 * adj_x, -2.0 * adj_g


def analytic_linear_inversion(model: Model, gradient: np.ndarray) -> np.ndarray:
    """Exact input of a single-example linear-softmax gradient: dL/dW_c / dL/db_c."""
    if model.kind != LINEAR:
        raise ConfigurationError("analytic inversion applies to linear-softmax only")
    c, d = model.num_classes, model.input_dim
    gw = gradient[: c * d].reshape(c, d)
    gb = gradient[c * d :]
    row = int(np.argmax(np.abs(gb)))
    if gb[row] == 0:
        raise ConfigurationError("zero bias gradient carries no input information")
    return gw[row] / gb[row]


@dataclass
class Reconstruction:
    x: np.ndarray
    mse: float
    loss: float
    iterations: int
    converged: bool
    labels: Optional[np.ndarray] = None
    per_example_mse: Optional[np.ndarray] = None


def _assign(x_hat: np.ndarray, truth: np.ndarray, y_hat: Optional[np.ndarray], y_true: Optional[np.ndarray]) -> np.ndarray:
    """Per-ground-truth MSE after matching dummies to ground-truth rows (labels must agree if known)."""
    cost = np.mean((truth[:, None, :] - x_hat[None, :, :]) ** 2, axis=2)
    if y_hat is not None and y_true is not None:
        cost = np.where(y_true[:, None] == y_hat[None, :], cost, cost + 1e12)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(truth.shape[0])
    out[rows] = np.mean((truth[rows] - x_hat[cols]) ** 2, axis=1)
    return out


def invert_gradient(
    model: Model,
    params: ParamVector | np.ndarray,
    observed: np.ndarray,
    labels: Optional[Sequence[int]] = None,
    batch_size: Optional[int] = None,
    iterations: int = 2000,
    lr: float = 0.1,
    restarts: int = 5,
    rng: Optional[np.random.Generator] = None,
    truth: Optional[np.ndarray] = None,
    prior_mean: Optional[np.ndarray] = None,
    prior_std: float | np.ndarray = 1.0,
    tol: float = 1e-8,
    normalize: bool = False,
) -> Reconstruction:
    """Reconstruct the inputs behind a summed gradient by gradient matching.

    Plain gradient descent with a cosine-decayed step on the squared matching
    loss (divided by ||observed||^2 first when ``normalize``); ``restarts`` random
    starts from the prior, the restart with the lowest relative matching loss wins. Labels are known unless ``labels``
    is None, in which case soft labels are optimised jointly. ``truth`` (rows in
    the same order as ``labels``) is only used to score the result.
    """
    values = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    d, c = model.input_dim, model.num_classes
    if labels is not None:
        y_known = np.asarray(labels, dtype=np.int64)
        bsz = y_known.size
    else:
        if batch_size is None:
            raise ConfigurationError("batch_size is required when labels are unknown")
        y_known = None
        bsz = batch_size
    mean = np.zeros(d) if prior_mean is None else np.asarray(prior_mean, dtype=np.float64)
    truth_arr = None if truth is None else np.atleast_2d(np.asarray(truth, dtype=np.float64))

    def score(x_hat: np.ndarray, y_hat: Optional[np.ndarray]) -> tuple[float, Optional[np.ndarray]]:
        if truth_arr is None:
            return math.nan, None
        per = _assign(x_hat, truth_arr, y_hat, y_known)
        return float(per[0]), per

    norm2 = float(observed @ observed)
    if norm2 == 0.0:
        x0 = np.tile(mean, (bsz, 1))
        mse, per = score(x0, y_known)
        return Reconstruction(x0, mse, 0.0, 0, False, y_known, per)

    scale = norm2 if normalize else 1.0
    best: Optional[tuple[float, np.ndarray, np.ndarray]] = None
    used = 0
    for _ in range(restarts):
        x = mean + prior_std * rng.standard_normal((bsz, d))
        logit_y = 0.1 * rng.standard_normal((bsz, c)) if y_known is None else None
        y_soft = np.eye(c)[y_known] if y_known is not None else softmax(logit_y)
        loss = math.inf
        for it in range(iterations):
            if y_known is None:
                y_soft = softmax(logit_y)
            raw, gx, gy = matching_loss_and_grad(model, values, x, y_soft, observed)
            loss = raw / norm2
            if loss < tol:
                break
            step = lr * 0.5 * (1.0 + math.cos(math.pi * it / iterations))
            x = x - step * gx / scale
            if y_known is None:
                logit_y = logit_y - step * _softmax_jvp(y_soft, gy) / scale
        used = max(used, it + 1)
        y_hat = y_known if y_known is not None else np.argmax(y_soft, axis=1)
        if best is None or loss < best[0]:
            best = (loss, x, y_hat)
    loss, x, y_hat = best  # type: ignore[misc]
    mse, per = score(x, y_hat)
    return Reconstruction(x, mse, float(loss), used, bool(loss < 1e-4), y_hat, per)


@dataclass
class AttackResult:
    level: int
    placement: str
    mse: list[float]
    iterations: list[int]
    converged: list[bool]

    @property
    def median_mse(self) -> float:
        return float(np.median(self.mse))

    @property
    def name(self) -> str:
        return PLACEMENT_NAMES.get(self.placement, self.placement)


SUITE_PLACEMENTS = ("none", "C4", "C2", "C1")


@dataclass(frozen=True)
class SuiteConfig:
    z: float = 0.003
    clip_bound: float = 10.0
    targets: int = 10
    seed: int = 0
    model_kind: str = "linear"
    hidden_dim: int = 0
    classes: int = 10
    dim: int = 32
    separation: float = 4.0
    client_lr: float = 0.1
    iterations: int = 2000
    attack_lr: float = 0.1
    restarts: int = 5
    clients: int = 4
    zones: int = 2
    adversary: int = 0
    target: int = 1


def _single_round_config(sc: SuiteConfig, placement: str, seed: int) -> ExperimentConfig:
    return ExperimentConfig(
        model=ModelSpec(sc.model_kind, sc.hidden_dim),
        data=DataSpec(classes=sc.classes, dim=sc.dim, per_class=max(2, math.ceil(2 * sc.clients / sc.classes)), separation=sc.separation),
        topo=TopoSpec(clients=sc.clients, zones=sc.zones, sampling="bernoulli", q=1.0),
        dp=DpPolicy(placement=placement, z=sc.z if placement != "none" else 0.0, clip=ClipMode("flat", sc.clip_bound), q=1.0),
        engine=EngineSpec(rounds=1, local_epochs=1, client_lr=sc.client_lr, batch_size=1, zone_combine="weighted", denominator="realized"),
        seed=seed,
    )


def attack_suite(sc: SuiteConfig = SuiteConfig(), placements: Sequence[str] = SUITE_PLACEMENTS) -> list[AttackResult]:
    """Level-0 reconstruction of one client's single example across noise placements.

    Each target is a fresh one-round federation of ``clients`` clients holding one
    example each. Placements share everything except the DP noise. The adversary
    subtracts its own update and inverts the remaining sum with known labels.
    """
    results = {p: AttackResult(LEVEL_CLIENT, p, [], [], []) for p in placements}
    for t in range(sc.targets):
        seed = sc.seed + t
        for placement in placements:
            cfg = _single_round_config(sc, placement, seed)
            exp = prepare(cfg)
            idx = np.arange(sc.clients)
            exp.partition = Partition([exp.train.subset(np.array([i])) for i in idx], [np.array([i]) for i in idx])
            exp.topology = Topology(exp.topology.zones, (1,) * sc.clients)
            exp.weights = np.ones(sc.clients)
            run = run_hier(cfg, record_trace=True, experiment=exp)
            obs = observe_gradient(run.trace, LEVEL_CLIENT, 0, sc.target, sc.adversary)  # type: ignore[arg-type]
            grad = update_to_gradient(obs, sc.client_lr)
            others = obs.contributors
            order = [sc.target] + [c for c in others if c != sc.target]
            truth = np.vstack([exp.partition.clients[c].features for c in order])
            labels = np.concatenate([exp.partition.clients[c].labels for c in order])
            prior = exp.val.features
            rec = invert_gradient(
                exp.model,
                run.trace[0].theta,  # type: ignore[index]
                grad,
                labels=labels,
                iterations=sc.iterations,
                lr=sc.attack_lr,
                restarts=sc.restarts,
                rng=SeedTree(seed).rng(Purpose.ATTACK),
                truth=truth,
                prior_mean=prior.mean(axis=0),
                prior_std=prior.std(axis=0),
            )
            res = results[placement]
            res.mse.append(rec.mse)
            res.iterations.append(rec.iterations)
            res.converged.append(rec.converged)
    return [results[p] for p in placements]


def ordering_holds(results: Sequence[AttackResult]) -> bool:
    """MSE(LDP) >= MSE(HDP) >= MSE(CDP) >= MSE(NoDP) on medians."""
    med = {r.placement: r.median_mse for r in results}
    return med["C1"] >= med["C2"] >= med["C4"] >= med["none"]


def attack_table_csv(results: Sequence[AttackResult], dataset: str = "blobs") -> str:
    """One row per dataset, one column per placement, in LDP/HDP/CDP/NoDP order."""
    order = [p for p in ("C1", "C2", "C4", "none") if any(r.placement == p for r in results)]
    med = {r.placement: r.median_mse for r in results}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset"] + [PLACEMENT_NAMES[p] for p in order])
    writer.writerow([dataset] + [repr(med[p]) for p in order])
    return buf.getvalue()
