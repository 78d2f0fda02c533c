"""Federated training loop on synthetic label-skew tasks.

Supports single-step gradients and multi-epoch local updates (parameter-delta
uploads), all six attacks, and every aggregation rule, with deterministic
per-round randomness derived from one master seed.
"""

from __future__ import annotations

import configparser
import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import aggregation, attacks, datagen, metrics
from .aggregation import AggregationInput, BobaParams
from .datagen import LabeledDataset
from .linalg import InvalidInputError

__all__ = [
    "SoftmaxRegression",
    "OneHiddenLayerNet",
    "make_model",
    "loss_and_gradient",
    "local_update",
    "Schedule",
    "SimConfig",
    "ConfigError",
    "parse_config",
    "RoundRecord",
    "run_experiment",
    "write_rounds_csv",
    "write_summary",
    "ROUND_CSV_HEADER",
    "AGGREGATOR_NAMES",
]

ROUND_CSV_HEADER = (
    "round,agr,attack,seed,eta,train_loss,test_acc,grad_err,trsvd_calls,accepted_count"
)

AGGREGATOR_NAMES = (
    "average", "coomed", "trmean", "krum", "mkrum", "geomed", "fltrust",
    "selfrej", "avgrej", "b-krum", "b-mkrum", "boba", "boba-es",
)


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


# --- models -----------------------------------------------------------------


def _softmax_terms(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    loss = float(np.mean(logz - logits[np.arange(labels.size), labels]))
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(labels.size), labels] -= 1.0
    return loss, probs / labels.size


@dataclass(frozen=True)
class SoftmaxRegression:
    dim: int
    classes: int

    @property
    def num_params(self) -> int:
        return self.classes * (self.dim + 1)

    def _unpack(self, w):
        cut = self.classes * self.dim
        return w[:cut].reshape(self.classes, self.dim), w[cut:]

    def logits(self, w, features):
        W, b = self._unpack(w)
        return features @ W.T + b

    def loss_and_grad(self, w, dataset: LabeledDataset):
        loss, dlogits = _softmax_terms(self.logits(w, dataset.features), dataset.labels)
        grad = np.concatenate([(dlogits.T @ dataset.features).ravel(), dlogits.sum(axis=0)])
        return loss, grad

    def predict(self, w, features):
        return np.argmax(self.logits(w, features), axis=1)


@dataclass(frozen=True)
class OneHiddenLayerNet:
    """dim -> hidden (tanh) -> classes, cross-entropy."""

    dim: int
    hidden: int
    classes: int

    @property
    def num_params(self) -> int:
        return self.hidden * (self.dim + 1) + self.classes * (self.hidden + 1)

    def _unpack(self, w):
        h, d, c = self.hidden, self.dim, self.classes
        i = 0
        W1 = w[i : i + h * d].reshape(h, d); i += h * d
        b1 = w[i : i + h]; i += h
        W2 = w[i : i + c * h].reshape(c, h); i += c * h
        b2 = w[i : i + c]
        return W1, b1, W2, b2

    def logits(self, w, features):
        W1, b1, W2, b2 = self._unpack(w)
        return np.tanh(features @ W1.T + b1) @ W2.T + b2

    def loss_and_grad(self, w, dataset: LabeledDataset):
        W1, b1, W2, b2 = self._unpack(w)
        a = np.tanh(dataset.features @ W1.T + b1)
        loss, dlogits = _softmax_terms(a @ W2.T + b2, dataset.labels)
        dW2 = dlogits.T @ a
        db2 = dlogits.sum(axis=0)
        da = (dlogits @ W2) * (1.0 - a**2)
        dW1 = da.T @ dataset.features
        db1 = da.sum(axis=0)
        grad = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
        return loss, grad

    def predict(self, w, features):
        return np.argmax(self.logits(w, features), axis=1)


def make_model(kind: str, dim: int, classes: int, hidden: int = 32):
    if kind == "softmax":
        return SoftmaxRegression(dim, classes)
    if kind == "mlp":
        return OneHiddenLayerNet(dim, hidden, classes)
    raise ConfigError(f"unknown model kind {kind!r}")


def loss_and_gradient(model, w, dataset: LabeledDataset, prox=None):
    """Cross-entropy loss and exact gradient; prox=(mu, anchor) adds the
    quadratic anchoring term used by proximal local updates."""
    if len(dataset) == 0:
        raise InvalidInputError("empty dataset")
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise InvalidInputError("non-finite parameters")
    loss, grad = model.loss_and_grad(w, dataset)
    if prox is not None:
        mu, anchor = prox
        diff = w - anchor
        loss += 0.5 * mu * float(diff @ diff)
        grad = grad + mu * diff
    return loss, grad


def local_update(model, w, dataset: LabeledDataset, eta: float, epochs: int = 1,
                 variant: str = "fedsgd", mu_prox: float = 0.01):
    """Client-side update; returns the uploaded vector.

    fedsgd uploads the plain gradient. fedavg/fedprox run full-batch descent
    for `epochs` steps and upload the negated parameter delta -(w_local - w).
    """
    if variant == "fedsgd":
        return loss_and_gradient(model, w, dataset)[1]
    if variant not in ("fedavg", "fedprox"):
        raise ConfigError(f"unknown variant {variant!r}")
    if epochs < 1:
        raise InvalidInputError("epochs must be >= 1")
    prox = (mu_prox, np.asarray(w, dtype=np.float64)) if variant == "fedprox" else None
    w_local = np.asarray(w, dtype=np.float64).copy()
    for _ in range(epochs):
        _, grad = loss_and_gradient(model, w_local, dataset, prox=prox)
        w_local -= eta * grad
        if not np.all(np.isfinite(w_local)):
            raise InvalidInputError("local update diverged to non-finite parameters")
    return -(w_local - np.asarray(w, dtype=np.float64))


# --- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    eta0: float = 0.1
    rounds: int = 200
    decay_start: int = 100
    decay_interval: int = 10
    decay_alpha: float = 0.95

    def __post_init__(self):
        if self.eta0 <= 0 or not (0 < self.decay_alpha <= 1):
            raise ConfigError("need eta0 > 0 and 0 < decay_alpha <= 1")

    def eta(self, t: int) -> float:
        if t < self.decay_start:
            return self.eta0
        decays = (t - self.decay_start) // self.decay_interval + 1
        return self.eta0 * self.decay_alpha**decays


@dataclass
class SimConfig:
    # task
    classes: int = 10
    dim: int = 20
    per_class: int = 200
    separation: float = 3.0
    server_per_class: int = 20
    test_per_class: int = 100
    oracle_per_class: int = 5000
    noise_var: float = 0.0
    server_noise_var: float = 0.0
    # partition
    scheme: str = "pathological"
    honest: int = 20
    n_s: int = 2
    alpha: float = 1.0
    # model
    model_kind: str = "softmax"
    hidden: int = 32
    # schedule / federation
    schedule: Schedule = field(default_factory=Schedule)
    variant: str = "fedsgd"
    epochs: int = 5
    mu_prox: float = 0.01
    participation: float = 1.0
    # aggregator
    agr: str = "boba"
    f: int = 4
    p_min: float = -0.5
    mode: str = "alternating"
    max_alternations: int = 50
    bucket_s: int = 2
    rejection_variant: str = "self"
    track_es: bool = False
    # attack
    attack: str = "none"
    byz: int = 0
    ipm_gamma: float = attacks.IPM_GAMMA
    gauss_variance: float = attacks.GAUSS_VARIANCE
    gamma_init: float = attacks.MIN_OPT_GAMMA_INIT
    tau: float = attacks.MIN_OPT_TAU
    mimic_target: str = "auto"
    # seeds
    master_seed: int = 0

    def validate(self):
        if self.classes < 2:
            raise ConfigError("task.classes must be >= 2")
        if self.dim < self.classes - 1:
            raise ConfigError("task.dim must be >= classes - 1")
        if self.scheme not in ("pathological", "step", "dirichlet"):
            raise ConfigError(f"unknown partition scheme {self.scheme!r}")
        if self.agr not in AGGREGATOR_NAMES:
            raise ConfigError(f"unknown aggregator {self.agr!r}")
        if self.attack not in ("none",) + attacks.ATTACK_NAMES:
            raise ConfigError(f"unknown attack {self.attack!r}")
        if self.attack != "none" and self.byz < 1:
            raise ConfigError("attack.byz must be >= 1 when an attack is active")
        if self.attack == "none" and self.byz != 0:
            raise ConfigError("attack.byz must be 0 with attack = none")
        if not 0 < self.participation <= 1:
            raise ConfigError("schedule.participation must be in (0, 1]")
        if self.variant not in ("fedsgd", "fedavg", "fedprox"):
            raise ConfigError(f"unknown federation variant {self.variant!r}")
        if self.honest < 1 or self.f < 0:
            raise ConfigError("need honest >= 1 and f >= 0")
        return self


_SCHEMA = {
    "task": {
        "classes": ("classes", int), "dim": ("dim", int), "per_class": ("per_class", int),
        "separation": ("separation", float), "server_per_class": ("server_per_class", int),
        "test_per_class": ("test_per_class", int), "oracle_per_class": ("oracle_per_class", int),
        "noise_var": ("noise_var", float), "server_noise_var": ("server_noise_var", float),
    },
    "partition": {
        "scheme": ("scheme", str), "honest": ("honest", int),
        "n_s": ("n_s", int), "alpha": ("alpha", float),
    },
    "model": {"kind": ("model_kind", str), "hidden": ("hidden", int)},
    "schedule": {
        "rounds": None, "eta0": None, "decay_start": None, "decay_interval": None,
        "decay_alpha": None,
        "variant": ("variant", str), "epochs": ("epochs", int),
        "mu_prox": ("mu_prox", float), "participation": ("participation", float),
    },
    "aggregator": {
        "name": ("agr", str), "f": ("f", int), "p_min": ("p_min", float),
        "mode": ("mode", str), "max_alternations": ("max_alternations", int),
        "bucket_s": ("bucket_s", int), "variant": ("rejection_variant", str),
        "track_es": ("track_es", bool),
    },
    "attack": {
        "name": ("attack", str), "byz": ("byz", int), "gamma": ("ipm_gamma", float),
        "variance": ("gauss_variance", float), "gamma_init": ("gamma_init", float),
        "tau": ("tau", float), "mimic_target": ("mimic_target", str),
    },
    "seeds": {"master": ("master_seed", int)},
}


def parse_config(path) -> SimConfig:
    """Read the sectioned key=value experiment description; unknown sections
    or keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = SimConfig()
    sched_kwargs = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            spec = _SCHEMA[section][key]
            if spec is None:  # schedule scalar
                caster = int if key in ("rounds", "decay_start", "decay_interval") else float
                try:
                    sched_kwargs[key] = caster(raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
                continue
            attr, caster = spec
            try:
                if caster is bool:
                    value = raw.strip().lower() in ("1", "true", "yes", "on")
                elif caster is float and raw.strip().lower() in ("inf", "+inf", "infinity"):
                    value = math.inf
                else:
                    value = caster(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
            setattr(cfg, attr, value)
    try:
        cfg.schedule = Schedule(**sched_kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


# --- experiment loop --------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    eta: float
    aggregate: np.ndarray
    honest_mean: np.ndarray
    oracle_mean: np.ndarray | None
    train_loss: float
    test_acc: float
    recalls: np.ndarray
    grad_err: float
    trsvd_calls: int
    accepted_count: int
    extras: dict = field(default_factory=dict)


def _partition_clients(cfg: SimConfig, data: LabeledDataset, rng):
    if cfg.scheme == "pathological":
        return datagen.partition_pathological(data, cfg.honest, cfg.n_s, rng)
    if cfg.scheme == "step":
        return datagen.partition_step(data, cfg.honest, cfg.alpha, rng)
    return datagen.partition_dirichlet(data, cfg.honest, cfg.alpha, rng)


def _mimic_target(dists) -> int:
    extremes = [float(np.max(p)) for p in dists]
    return int(np.argmax(extremes))


def _make_attack_columns(cfg: SimConfig, honest_cols, n_total, rng, target):
    name, b = cfg.attack, cfg.byz
    d = honest_cols.shape[0]
    if name == "gauss":
        return attacks.gauss(d, b, rng, cfg.gauss_variance)
    if name == "ipm":
        return attacks.ipm(honest_cols, b, cfg.ipm_gamma)
    if name == "lie":
        return attacks.lie(honest_cols, n_total, b)
    if name == "mimic":
        return attacks.mimic(honest_cols, target, b)
    if name in ("minmax", "minsum"):
        return attacks.min_opt(honest_cols, n_total, b, name, cfg.gamma_init, cfg.tau)
    raise ConfigError(f"unknown attack {name!r}")


def _aggregate(cfg: SimConfig, G, Gamma, loss_fn, w, eta, rng):
    """Dispatch to the configured rule; returns (vector, trsvd_calls, accepted)."""
    n = G.shape[1]
    f = cfg.f
    name = cfg.agr
    if name == "average":
        return aggregation.average(G), 0, n
    if name == "coomed":
        return aggregation.coordinate_median(G), 0, n
    if name == "trmean":
        return aggregation.trimmed_mean(G, f), 0, n - 2 * f
    if name == "krum":
        res = aggregation.krum(G, f, multi=1)
        return res.aggregate, 0, int(res.accepted.sum())
    if name == "mkrum":
        res = aggregation.krum(G, f, multi=n - f)
        return res.aggregate, 0, int(res.accepted.sum())
    if name == "geomed":
        return aggregation.geometric_median(G), 0, n
    if name == "fltrust":
        return aggregation.fltrust(G, Gamma), 0, n
    if name in ("selfrej", "avgrej"):
        variant = "self" if name == "selfrej" else "avg"
        res = aggregation.loss_rejection(G, loss_fn, w, eta, f, variant)
        return res.aggregate, 0, int(res.accepted.sum())
    if name in ("b-krum", "b-mkrum"):
        multi = 1 if name == "b-krum" else None

        def inner(means):
            m = means.shape[1]
            mm = 1 if multi == 1 else max(1, m - f)
            return aggregation.krum(means, min(f, m - 3), multi=mm).aggregate

        return aggregation.bucketing(G, cfg.bucket_s, inner, rng), 0, n
    if name in ("boba", "boba-es"):
        inp = AggregationInput(G, Gamma, f, cfg.classes)
        params = BobaParams(f, cfg.p_min, cfg.max_alternations)
        mode = "alternating" if name == "boba" else "exhaustive"
        res = aggregation.boba_aggregate(inp, params, mode)
        calls = res.diagnostics["trsvd_calls"] if name == "boba" else 0
        return res.aggregate, calls, int(res.accepted.sum())
    raise ConfigError(f"unknown aggregator {name!r}")


def run_experiment(cfg: SimConfig, seed_override: int | None = None):
    """Deterministic end-to-end run; returns (records, summary dict)."""
    cfg.validate()
    seed = cfg.master_seed if seed_override is None else seed_override
    root = np.random.SeedSequence(seed)
    (data_ss, part_ss, server_ss, test_ss, oracle_ss, init_ss,
     round_ss, attack_ss, bucket_ss) = root.spawn(9)

    data_rng = np.random.default_rng(data_ss)
    means = datagen.simplex_class_means(cfg.classes, cfg.dim, cfg.separation)
    train = datagen.make_gaussian_mixture_task(
        cfg.classes, cfg.dim, cfg.per_class, cfg.separation, data_rng)
    clients, dists = _partition_clients(cfg, train, np.random.default_rng(part_ss))
    server_rng = np.random.default_rng(server_ss)
    server_class_data = [
        LabeledDataset(datagen.sample_class_features(means, z, cfg.server_per_class, server_rng),
                       np.full(cfg.server_per_class, z, dtype=np.int64))
        for z in range(cfg.classes)
    ]
    server_pool = LabeledDataset(
        np.vstack([ds.features for ds in server_class_data]),
        np.concatenate([ds.labels for ds in server_class_data]),
    )
    test = datagen.make_gaussian_mixture_task(
        cfg.classes, cfg.dim, cfg.test_per_class, cfg.separation,
        np.random.default_rng(test_ss))
    oracle_rng = np.random.default_rng(oracle_ss)
    oracle_pools = [
        LabeledDataset(datagen.sample_class_features(means, z, cfg.oracle_per_class, oracle_rng),
                       np.full(cfg.oracle_per_class, z, dtype=np.int64))
        for z in range(cfg.classes)
    ]

    model = make_model(cfg.model_kind, cfg.dim, cfg.classes, cfg.hidden)
    if cfg.model_kind == "softmax":
        w = np.zeros(model.num_params)
    else:
        w = np.random.default_rng(init_ss).normal(0.0, 0.1, model.num_params)

    dist_matrix = np.column_stack(dists)  # c x |H|
    target = _mimic_target(dists)
    attack_rng = np.random.default_rng(attack_ss)
    bucket_rng = np.random.default_rng(bucket_ss)
    round_children = round_ss.spawn(cfg.schedule.rounds)
    part_rng = np.random.default_rng(part_ss.spawn(1)[0])

    records = []
    for t in range(cfg.schedule.rounds):
        eta = cfg.schedule.eta(t)
        rng_t = np.random.default_rng(round_children[t])
        if cfg.participation < 1.0:
            take = max(1, int(math.floor(cfg.participation * cfg.honest)))
            active = np.sort(part_rng.choice(cfg.honest, size=take, replace=False))
        else:
            active = np.arange(cfg.honest)

        honest_cols = []
        for i in active:
            g = local_update(model, w, clients[i], eta, cfg.epochs, cfg.variant, cfg.mu_prox)
            if cfg.noise_var > 0:
                g = g + rng_t.normal(0.0, math.sqrt(cfg.noise_var), g.size)
            honest_cols.append(g)
        honest_cols = np.column_stack(honest_cols)

        gamma_cols = []
        for z in range(cfg.classes):
            g = local_update(model, w, server_class_data[z], eta, cfg.epochs,
                             cfg.variant, cfg.mu_prox)
            if cfg.server_noise_var > 0:
                g = g + rng_t.normal(0.0, math.sqrt(cfg.server_noise_var), g.size)
            gamma_cols.append(g)
        Gamma = np.column_stack(gamma_cols)

        n_total = honest_cols.shape[1] + cfg.byz
        if cfg.attack == "none":
            G = honest_cols
        else:
            tgt = target if cfg.mimic_target == "auto" else int(cfg.mimic_target)
            byz_cols = _make_attack_columns(cfg, honest_cols, n_total, attack_rng, tgt)
            G = np.column_stack([honest_cols, byz_cols])

        def server_loss(params):
            return loss_and_gradient(model, params, server_pool)[0]

        mu_hat, trsvd_calls, accepted = _aggregate(
            cfg, G, Gamma, server_loss, w, eta, bucket_rng)
        extras = {}
        if t == cfg.schedule.rounds - 1:
            centered = honest_cols - honest_cols.mean(axis=1, keepdims=True)
            sing = np.linalg.svd(centered, compute_uv=False)
            total = float((sing**2).sum())
            extras["pca_fractions"] = (sing**2 / total) if total > 0 else sing * 0
        if cfg.track_es and cfg.agr == "boba":
            inp = AggregationInput(G, Gamma, cfg.f, cfg.classes)
            alt = aggregation.fit_subspace_alternating(inp, cfg.max_alternations)
            es = aggregation.fit_subspace_exhaustive(inp)
            extras["loss_alt"] = alt.trimmed_loss
            extras["loss_es"] = es.trimmed_loss

        mu = honest_cols.mean(axis=1)
        if cfg.variant == "fedsgd":
            oracle_gamma = np.column_stack(
                [loss_and_gradient(model, w, pool)[1] for pool in oracle_pools])
            oracle_mu = (oracle_gamma @ dist_matrix[:, active]).mean(axis=1)
        else:
            oracle_mu = mu

        step = eta if cfg.variant == "fedsgd" else 1.0
        w = w - step * mu_hat
        if not np.all(np.isfinite(w)):
            raise InvalidInputError(f"parameters diverged at round {t}")
        train_loss = float(np.mean(
            [loss_and_gradient(model, w, clients[i], prox=None)[0] for i in active]))
        acc, recalls = metrics.accuracy_and_recall(model, w, test)
        grad_err = metrics.gradient_estimation_error(mu_hat, oracle_mu)
        records.append(RoundRecord(
            round=t, eta=eta, aggregate=mu_hat, honest_mean=mu, oracle_mean=oracle_mu,
            train_loss=train_loss, test_acc=acc, recalls=recalls, grad_err=grad_err,
            trsvd_calls=trsvd_calls, accepted_count=accepted, extras=extras))

    final = records[-1]
    summary = {
        "agr": cfg.agr,
        "attack": cfg.attack,
        "seed": seed,
        "rounds": cfg.schedule.rounds,
        "final_acc": final.test_acc,
        "final_train_loss": final.train_loss,
        "mean_trsvd_calls": float(np.mean([r.trsvd_calls for r in records])),
        "mean_grad_err": float(np.mean([r.grad_err for r in records])),
    }
    for z, r in enumerate(final.recalls):
        summary[f"final_recall_{z}"] = r
    return records, summary


# --- output files -----------------------------------------------------------


def write_rounds_csv(path, records, cfg: SimConfig, seed: int):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUND_CSV_HEADER.split(","))
        for r in records:
            writer.writerow([
                r.round, cfg.agr, cfg.attack, seed, f"{r.eta:.17g}",
                f"{r.train_loss:.17g}", f"{r.test_acc:.17g}", f"{r.grad_err:.17g}",
                r.trsvd_calls, r.accepted_count,
            ])


def write_summary(path, summary: dict):
    with open(path, "w") as fh:
        for key, value in summary.items():
            if isinstance(value, float):
                fh.write(f"{key}={value:.17g}\n")
            else:
                fh.write(f"{key}={value}\n")


def write_pca_csv(path, fractions):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "variance_fraction"])
        for j, frac in enumerate(fractions):
            writer.writerow([j + 1, f"{frac:.17g}"])


def write_loss_ratio_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "loss_alt", "loss_es"])
        for r in records:
            if "loss_alt" in r.extras:
                writer.writerow([r.round, f"{r.extras['loss_alt']:.17g}",
                                 f"{r.extras['loss_es']:.17g}"])
