"""Executable structural checks: projection lemmas, adversarial fixtures, and
randomized error-bound validation.

Each suite returns a list of CheckResult so callers (CLI, tests) can render
per-check pass/fail lines and aggregate an exit status.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import aggregation, attacks, linalg, metrics
from .aggregation import AggregationInput, BobaParams

__all__ = [
    "CheckResult",
    "lemma_suite",
    "fixture_suite",
    "bound_suite",
    "run_suite",
    "SUITE_NAMES",
]

SUITE_NAMES = ("lemmas", "fixtures", "bounds", "all")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


def _random_subspace(rng, d, k):
    pts = rng.normal(size=(d, k + 1))
    sub, _, _ = linalg.truncated_svd(pts, k)
    return sub


def lemma_suite(instances: int = 10_000, tol: float = 1e-8, seed: int = 20240501):
    """Projection identities on randomized subspaces and points.

    Checks, per instance: the projection is the nearest subspace point, the
    projection map is a 1-contraction, and it commutes with affine
    combinations. Points are batched per subspace for speed.
    """
    rng = np.random.default_rng(seed)
    batch = 50
    rounds = math.ceil(instances / batch)

    worst_nearest = worst_contract = worst_affine = 0.0
    for _ in range(rounds):
        d = int(rng.integers(3, 9))
        k = int(rng.integers(1, d))
        sub = _random_subspace(rng, d, k)
        X = rng.normal(scale=3.0, size=(d, batch))
        Y = rng.normal(scale=3.0, size=(d, batch))
        PX = linalg.project(sub, X)
        PY = linalg.project(sub, Y)

        # nearest point: residual orthogonal to the basis, and no sampled
        # subspace point is closer
        ortho = np.abs(sub.basis.T @ (X - PX)).max() if k else 0.0
        Q = linalg.decode(sub, rng.normal(scale=3.0, size=(k, batch)))
        gap = (np.linalg.norm(X - PX, axis=0) - np.linalg.norm(X - Q, axis=0)).max()
        worst_nearest = max(worst_nearest, float(ortho), float(gap))

        # 1-contraction
        excess = np.linalg.norm(PX - PY, axis=0) - np.linalg.norm(X - Y, axis=0)
        worst_contract = max(worst_contract, float(excess.max()))

        # affine commutation: sum-to-one weights over the batch columns
        a = rng.normal(size=batch)
        a = a - a.mean() + 1.0 / batch
        comb = linalg.project(sub, X @ a)
        worst_affine = max(worst_affine, float(np.abs(comb - PX @ a).max()))

    return [
        CheckResult("lemma-nearest-point", worst_nearest <= tol,
                    f"worst deviation {worst_nearest:.3e} (tol {tol:g})"),
        CheckResult("lemma-1-contraction", worst_contract <= tol,
                    f"worst excess {worst_contract:.3e} (tol {tol:g})"),
        CheckResult("lemma-affine-commutation", worst_affine <= tol,
                    f"worst deviation {worst_affine:.3e} (tol {tol:g})"),
    ]


def _fixture_aggregates(values, server):
    """Every aggregation rule applied to the paired-identity 1-D fixture."""
    f = 1
    quad = lambda p: 0.5 * float(p @ p)
    w0 = np.array([1.0])
    rng = np.random.default_rng(0)
    boba_inp = AggregationInput(values, server, f, 2)
    return {
        "average": aggregation.average(values),
        "coomed": aggregation.coordinate_median(values),
        "trmean": aggregation.trimmed_mean(values, f),
        "krum": aggregation.krum(values, f, multi=1).aggregate,
        "mkrum": aggregation.krum(values, f, multi=values.shape[1] - f).aggregate,
        "geomed": aggregation.geometric_median(values),
        "fltrust": aggregation.fltrust(values, server),
        "selfrej": aggregation.loss_rejection(values, quad, w0, 0.1, f, "self").aggregate,
        "avgrej": aggregation.loss_rejection(values, quad, w0, 0.1, f, "avg").aggregate,
        "bucketing": aggregation.bucketing(values, 2, aggregation.coordinate_median, rng),
        "boba": aggregation.boba_aggregate(boba_inp, BobaParams(f)).aggregate,
        "boba-es": aggregation.boba_aggregate(boba_inp, BobaParams(f), "exhaustive").aggregate,
    }


def fixture_suite(avg_tol: float = 1e-12, krum_tol: float = 1e-10):
    """Adversarial fixtures with hand-computable outcomes."""
    results = []

    # paired-identity instance: same input, two possible honest populations
    values, _, _, target_1, target_2 = aggregation.make_lower_bound_instance(3, 1, 1.0)
    beta_delta_sq = target_1**2
    server = np.array([[0.75, -0.65]])  # non-degenerate 1-D class vertices
    aggs = _fixture_aggregates(values, server)
    floor_ok = True
    worst_name, worst_margin = "", math.inf
    for name, agg in aggs.items():
        err = max((float(agg[0]) - target_1) ** 2, (float(agg[0]) - target_2) ** 2)
        margin = err - beta_delta_sq
        if margin < -1e-12:
            floor_ok = False
        if margin < worst_margin:
            worst_name, worst_margin = name, margin
    results.append(CheckResult(
        "fixture-identity-pair-floor", floor_ok,
        f"min margin over rules {worst_margin:.3e} at {worst_name} "
        f"(floor {beta_delta_sq:g}, {len(aggs)} rules)"))

    avg_gap = abs(max((float(aggs['average'][0]) - target_1) ** 2,
                      (float(aggs['average'][0]) - target_2) ** 2) - beta_delta_sq)
    results.append(CheckResult(
        "fixture-identity-pair-average-equality", avg_gap <= avg_tol,
        f"|max error - floor| = {avg_gap:.3e} (tol {avg_tol:g})"))

    # three-client instance: nearest-neighbor selection always drops the
    # far-out honest client, costing a fixed squared error per draw
    delta, eps = 1.0, 0.05
    expected_err = eps**2 + delta**2 / 4.0
    worst = 0.0
    for z1 in (0, 1):
        for z2 in (0, 1):
            g, e_mu = aggregation.make_three_client_instance(delta, eps, draws=(z1, z2))
            agg = aggregation.krum(g, 0, multi=1).aggregate
            err = float(np.sum((agg - e_mu) ** 2))
            worst = max(worst, abs(err - expected_err))
    results.append(CheckResult(
        "fixture-three-client-krum", worst <= krum_tol,
        f"max |error - (eps^2 + delta^2/4)| = {worst:.3e} (tol {krum_tol:g})"))
    return results


def _bound_instance(rng, attack_name):
    """One randomized simplex instance with measured variation quantities."""
    c, d, n = 4, 12, 12
    b = int(rng.integers(1, 3))
    f = b
    h = n - b

    vertices = rng.normal(scale=2.0, size=(d, c))
    p = rng.dirichlet(np.ones(c), size=h).T  # c x h
    expected = vertices @ p
    noise = rng.normal(scale=0.02, size=(d, h))
    honest = expected + noise
    server = vertices + rng.normal(scale=0.01, size=(d, c))

    if attack_name == "gauss":
        byz = attacks.gauss(d, b, rng)
    elif attack_name == "ipm":
        byz = attacks.ipm(honest, b)
    elif attack_name == "lie":
        byz = attacks.lie(honest, n, b)
    elif attack_name == "mimic":
        byz = attacks.mimic(honest, 0, b)
    else:
        byz = attacks.min_opt(honest, n, b, attack_name)
    G = np.column_stack([honest, byz])

    e_mu = expected.mean(axis=1)
    eps = float(np.linalg.norm(noise, axis=0).max())
    eps_s = float(np.linalg.norm(server - vertices, axis=0).max())
    delta = float(np.linalg.norm(expected - e_mu[:, None], axis=0).max())
    delta_s = float(np.linalg.norm(vertices - e_mu[:, None], axis=0).max())
    report = metrics.assumption_report(expected, f, c, subset_size=n - 2 * f)

    params = BobaParams(f)
    res = aggregation.boba_aggregate(AggregationInput(G, server, f, c), params)
    measured = float(np.sum((res.aggregate - e_mu) ** 2))
    bound = aggregation.compute_boba_error_bound(
        eps, eps_s, delta, delta_s, report.sigma_min,
        n, f, c, params.p_min, b / n, h)
    return measured, bound


def bound_suite(instances: int = 500, seed: int = 20240502):
    """Measured squared estimation error against the closed-form guarantee on
    randomized attacked instances; every instance must respect the bound."""
    rng = np.random.default_rng(seed)
    violations = 0
    worst_ratio = 0.0
    for i in range(instances):
        attack_name = attacks.ATTACK_NAMES[i % len(attacks.ATTACK_NAMES)]
        measured, bound = _bound_instance(rng, attack_name)
        ratio = measured / bound
        worst_ratio = max(worst_ratio, ratio)
        if measured > bound:
            violations += 1
    return [CheckResult(
        "bound-randomized-instances", violations == 0,
        f"{instances - violations}/{instances} within bound, "
        f"worst measured/bound ratio {worst_ratio:.3e}")]


def run_suite(name: str, **kwargs):
    if name == "lemmas":
        return lemma_suite(**kwargs)
    if name == "fixtures":
        return fixture_suite(**kwargs)
    if name == "bounds":
        return bound_suite(**kwargs)
    if name == "all":
        return lemma_suite() + fixture_suite() + bound_suite()
    raise ValueError(f"unknown suite {name!r}")
