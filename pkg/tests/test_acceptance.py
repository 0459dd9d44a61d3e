"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import time

import numpy as np
import pytest
from scipy import stats

from diffaug import distributions as D
from diffaug import estimators as E
from diffaug.bilevel import SearchConfig, TrainConfig, evaluate_policy, run_search
from diffaug.cli import main
from diffaug.data import reduce_and_split, synth_rotor
from diffaug.policy import PolicyParams
from conftest import ACCEPTANCE_LINES
from test_autodiff import ALL_KINDS, check_random_graph
from test_bilevel import probe_hypergradient


def report(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def bernoulli_toy():
    return PolicyParams(np.zeros(1), np.zeros((1, 1)), np.full((1, 1), 0.5)), np.array([[0.0, 1.0]])


def test_1_autodiff_random_graphs():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = 0
    for i in range(200):
        kind = ALL_KINDS[i % len(ALL_KINDS)]
        try:
            check_random_graph(int(rng.integers(2**31)), kind)
        except AssertionError:
            failures += 1
    elapsed = time.perf_counter() - start
    report(1, "autodiff vs finite differences", failures == 0 and elapsed < 60,
           f"{200 - failures}/200 graphs within rel 1e-4, {elapsed:.1f}s")


def test_2_relax_and_score_unbiased():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    params = PolicyParams(rng.normal(size=3), rng.normal(size=(3, 2)), np.full((3, 2), 0.5))
    table = rng.uniform(size=(3, 2, 2))
    exact = E.flat_exact(params, table)
    surrogate = E.Surrogate.create(5, rng=np.random.default_rng(8))
    E.fit_surrogate(table, params.copy(), surrogate, 300, np.random.default_rng(9))
    worst = {}
    for kind in ("relax", "score"):
        st = E.monte_carlo(kind, table, params, 100_000, np.random.default_rng(10), surrogate=surrogate)
        worst[kind] = float(np.max(np.abs(st.mean - exact) / st.stderr))
    elapsed = time.perf_counter() - start
    ok = worst["relax"] < 3 and worst["score"] < 3 and elapsed < 300
    report(2, "estimator unbiasedness (N=3, k=2)", ok,
           f"max |bias|/SE relax {worst['relax']:.2f}, score {worst['score']:.2f}, {elapsed:.1f}s")


def test_3_straight_through_bias():
    params, table = bernoulli_toy()
    exact = 0.25
    st = E.monte_carlo("gumbel_st", table, params, 100_000, np.random.default_rng(11))
    surrogate = E.Surrogate.create(2, rng=np.random.default_rng(12))
    rx = E.monte_carlo("relax", table, params, 100_000, np.random.default_rng(13), surrogate=surrogate)
    st_sigma = abs(st.mean[1] - exact) / st.stderr[1]
    rx_sigma = abs(rx.mean[1] - exact) / rx.stderr[1]
    report(3, "straight-through bias on Bernoulli toy", st_sigma > 3 and rx_sigma < 3,
           f"gumbel_st {st_sigma:.1f} SE, relax {rx_sigma:.2f} SE")


def test_4_variance_reduction():
    params, table = bernoulli_toy()
    surrogate = E.LinearSurrogate.zeros(2)
    E.fit_surrogate(table, params, surrogate, 2000, np.random.default_rng(14), theta_lr=1e-3)
    rx = E.monte_carlo("relax", table, params, 10_000, np.random.default_rng(15), surrogate=surrogate)
    sc = E.monte_carlo("score", table, params, 10_000, np.random.default_rng(16))
    # with one sub-policy the alpha gradient is identically zero for both
    live = sc.variance > 0
    ok = bool(np.all(rx.variance[live] < sc.variance[live])) and np.all(rx.variance[~live] == 0)
    report(4, "RELAX variance below score function", ok,
           f"beta variance relax {rx.variance[1]:.3g} vs score {sc.variance[1]:.3g} (beta={params.beta[0, 0]:.3f})")


def test_5_hypergradient_fidelity():
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(100):
        w, d, zeta = rng.normal(), rng.normal(), rng.uniform(0.01, 0.5)
        hyper, _ = probe_hypergradient(w, d, zeta)
        worst = max(worst, abs(float(hyper) - 4 * zeta * (w - 2 * zeta * (w - d))))
    report(5, "finite-difference hypergradient on quadratic probe", worst < 1e-4, f"max error {worst:.2e}")


def test_6_conditional_samples():
    n = 1_000_000
    rng = np.random.default_rng(18)
    alpha = rng.normal(size=5)
    violations = 0
    for chunk in range(4):
        cat = D.sample_relaxed_categorical(alpha, 0.5, rng, size=(n // 4,))
        violations += int(np.sum(np.argmax(cat.z_tilde, axis=1) != cat.q))
        violations += int(np.sum(np.argmax(cat.z, axis=1) != cat.q))
    t = rng.normal(size=1)
    bern = D.sample_relaxed_bernoulli(t, 0.5, rng, size=(n, 1))
    violations += int(np.sum(D.hard_bernoulli(bern.z_tilde) != bern.q))
    violations += int(np.sum(D.hard_bernoulli(bern.z) != bern.q))
    t0 = float(D.logit(0.3))
    m = 100_000
    zt = D.conditional_bernoulli(t0, np.zeros(m), rng.random(m), 0.5)
    z = D.relaxed_bernoulli(t0, rng.random(4 * m), 0.5)
    p = stats.ks_2samp(zt, z[z <= 0.5][:m]).pvalue
    report(6, "conditional relaxed samples", violations == 0 and p > 0.01,
           f"{violations} violations in 10^6 draws per distribution, KS p={p:.3f}")


# ---------------------------------------------------------------- toy benchmark

OPS = ("rotate", "solarize", "invert", "shear-x", "contrast", "cutout")
SEEDS = range(5)
TOP_N = 5


@pytest.fixture(scope="module")
def benchmark():
    start = time.perf_counter()
    out = {"ranks": [], "base": [], "relax": [], "gumbel_st": [], "search_seconds": []}
    for s in SEEDS:
        data = synth_rotor(4000, seed=100 + s)
        test = synth_rotor(2000, seed=200 + s)
        train, val = reduce_and_split(data, 4000, s)
        evaluation = TrainConfig(seed=s)
        out["base"].append(evaluate_policy(None, data, test, evaluation)["accuracy"])
        for est in ("relax", "gumbel_st"):
            t0 = time.perf_counter()
            res = run_search(SearchConfig(estimator=est, ops=OPS, seed=s, top_n=15), train, val)
            out["search_seconds"].append(time.perf_counter() - t0)
            ranked = res.policy["subpolicies"]
            if est == "relax":
                out["ranks"].append(min(i for i, sp in enumerate(ranked)
                                        if any(o["name"] == "rotate" for o in sp["ops"])))
            policy = dict(res.policy, subpolicies=ranked[:TOP_N])
            out[est].append(evaluate_policy(policy, data, test, evaluation)["accuracy"])
    out["seconds"] = time.perf_counter() - start
    return out


def test_7_end_to_end_toy_search(benchmark):
    ranks = benchmark["ranks"]
    hits = sum(r < 3 for r in ranks)        # top 20% of 15 sub-policies
    gain = 100 * (np.median(benchmark["relax"]) - np.median(benchmark["base"]))
    per_run = max(benchmark["search_seconds"])
    ok = hits >= 4 and gain >= 1.5 and per_run < 1800
    report(7, "toy search finds rotation and helps", ok,
           f"rotate rank {ranks} ({hits}/5 in top 3); median acc base "
           f"{np.median(benchmark['base']):.4f} -> relax policy {np.median(benchmark['relax']):.4f} "
           f"({gain:+.2f} pts); slowest search {per_run:.0f}s, whole benchmark {benchmark['seconds']:.0f}s")


def test_8_relax_versus_straight_through(benchmark):
    relax, st = np.median(benchmark["relax"]), np.median(benchmark["gumbel_st"])
    gap = 100 * (relax - st)
    label = "RELAX >= Gumbel-ST" if gap >= 0 else "RELAX below Gumbel-ST (soft)"
    report(8, "RELAX vs Gumbel-ST policy quality", gap >= -1.0,
           f"median acc relax {relax:.4f}, gumbel_st {st:.4f}, gap {gap:+.2f} pts: {label}")


def test_9_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["-q", "gen-data", "--out", str(data), "--n-train", "400", "--n-test", "100"]) == 0
    docs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["-q", "search", "--dataset", str(data), "--out", str(out), "--seed", "3",
                     "--epochs", "2", "--n-reduced", "400", "--ops", ",".join(OPS)]) == 0
        docs.append((out / "policy.json").read_bytes())
    report(9, "bit-identical policy.json across runs", docs[0] == docs[1], f"{len(docs[0])} bytes each")
