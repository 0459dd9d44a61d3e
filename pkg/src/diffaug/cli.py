"""Command line: search, evaluate, estimate-bias, gen-data.

Every command writes into ``--out``: the fully resolved config as
``resolved-config.json``, its tables, and SVG plots under ``plots/``.
Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bilevel as B
from . import estimators as E
from .data import ROTOR_DEFAULTS, load_dataset_dir, reduce_and_split, save_dataset_dir, synth_rotor
from .policy import PolicyParams, build_space, load_policy, save_policy

log = logging.getLogger("diffaug")

SEARCH_DEFAULTS = {**B.SearchConfig().to_dict(), "dataset": None}
EVAL_DEFAULTS = {**B.TrainConfig().__dict__, "dataset": None, "policy": None}
BIAS_DEFAULTS = {"toy": "table", "n": 3, "k": 2, "ops": None, "pairing": "unordered", "samples": 100000,
                 "tau": 0.5, "seed": 0, "surrogate_steps": 500, "estimators": ["score", "relax", "gumbel_st"]}
DATA_DEFAULTS = {"n_train": 4000, "n_test": 2000, "size": 16, "seed": 0, **ROTOR_DEFAULTS}
DATA_DEFAULTS["freqs"] = list(DATA_DEFAULTS["freqs"])


BIAS_COLUMNS = ("estimator", "parameter", "mc_mean", "exact", "std_err", "bias_sigma", "variance")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config plumbing

def resolve(defaults: dict, config_path: str | None, flags: dict) -> dict:
    """flags > config file > defaults; unknown config keys are an error."""
    out = dict(defaults)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(doc) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        out.update(doc)
    out.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)


def _prepare_out(out: str | None) -> Path:
    if not out:
        raise UsageError("--out is required")
    path = Path(out)
    (path / "plots").mkdir(parents=True, exist_ok=True)
    return path


def _load_data(path: str | None):
    if not path:
        raise UsageError("--dataset is required (a directory written by gen-data)")
    try:
        return load_dataset_dir(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def _plot_lines(path: Path, x, series: dict, xlabel: str, ylabel: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, ys in series.items():
        ax.plot(x, ys, marker="o", ms=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------- commands

def cmd_search(cfg: dict) -> int:
    out = _prepare_out(cfg.pop("out"))
    train, _ = _load_data(cfg["dataset"])
    fields = {k: v for k, v in cfg.items() if k in SEARCH_DEFAULTS and k != "dataset"}
    try:
        config = B.SearchConfig(**fields)
        build_space(config.ops, config.k, config.pairing)
    except (B.ConfigError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    if config.n_reduced > len(train):
        raise UsageError(f"n_reduced={config.n_reduced} exceeds the {len(train)} training images")
    _write_json(out / "resolved-config.json", {**config.to_dict(), "dataset": cfg["dataset"]})
    search_train, search_val = reduce_and_split(train, config.n_reduced, config.seed)
    result = B.run_search(config, search_train, search_val)
    save_policy(result.policy, out / "policy.json")
    _write_csv(out / "metrics.csv", result.metrics, B.METRIC_COLUMNS)
    epochs = [m["epoch"] for m in result.metrics]
    _plot_lines(out / "plots" / "loss.svg", epochs,
                {"train": [m["train_loss"] for m in result.metrics],
                 "val": [m["val_loss"] for m in result.metrics]}, "epoch", "cross-entropy")
    _plot_lines(out / "plots" / "pi_entropy.svg", epochs,
                {"H(pi)": [m["pi_entropy"] for m in result.metrics]}, "epoch", "entropy (nats)")
    top = result.policy["subpolicies"][0] if result.policy["subpolicies"] else None
    if top:
        print(f"top sub-policy: {' + '.join(o['name'] for o in top['ops'])} (pi={top['pi']:.4f})")
    print(f"wrote {out / 'policy.json'}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    out = _prepare_out(cfg.pop("out"))
    train, test = _load_data(cfg["dataset"])
    if test is None:
        raise UsageError(f"{cfg['dataset']}: evaluation needs test-images.idx")
    if not cfg.get("policy"):
        raise UsageError("--policy is required")
    try:
        policy = load_policy(cfg["policy"])
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid policy file: {exc}") from None
    train_cfg = B.TrainConfig(**{k: v for k, v in cfg.items() if k in B.TrainConfig.__dataclass_fields__})
    _write_json(out / "resolved-config.json", {**train_cfg.__dict__, "dataset": cfg["dataset"],
                                               "policy": cfg["policy"]})
    for sp in policy["subpolicies"]:
        print("  " + " | ".join(f"{o['name']} p={o['prob']:.4f} m={o['magnitude']:.4f}" for o in sp["ops"]))
    history: list[dict] = []
    res = B.evaluate_policy(policy, train, test, train_cfg, history=history)
    _write_csv(out / "metrics.csv", history, ("epoch", "train_loss"))
    _plot_lines(out / "plots" / "train_loss.svg", [h["epoch"] for h in history],
                {"train": [h["train_loss"] for h in history]}, "epoch", "cross-entropy")
    _write_json(out / "results.json", {**res, "policy_file": str(cfg["policy"])})
    print(f"test accuracy {res['accuracy']:.4f}  test error {res['error']:.4f}")
    return 0


def bias_toy(cfg: dict, rng: np.random.Generator) -> tuple[PolicyParams, np.ndarray]:
    if cfg["toy"] == "bernoulli":
        # one sub-policy, one slot, loss = apply bit, beta = 0.5
        return PolicyParams(np.zeros(1), np.zeros((1, 1)), np.full((1, 1), 0.5)), np.array([[0.0, 1.0]])
    if cfg["toy"] != "table":
        raise UsageError(f"unknown toy {cfg['toy']!r}")
    k = int(cfg["k"])
    n = build_space(cfg["ops"], k, cfg["pairing"]).n if cfg["ops"] else int(cfg["n"])
    if n * 2**k > E.MAX_ENUMERATION:
        raise UsageError(f"space has {n} x 2^{k} outcomes, more than {E.MAX_ENUMERATION}; "
                         "use fewer ops or a smaller k")
    params = PolicyParams(rng.normal(size=n), rng.normal(size=(n, k)), np.full((n, k), 0.5))
    return params, rng.uniform(size=(n,) + (2,) * k)


def cmd_estimate_bias(cfg: dict) -> int:
    out = _prepare_out(cfg.pop("out"))
    _write_json(out / "resolved-config.json", cfg)
    rng = np.random.default_rng(cfg["seed"])
    params, table = bias_toy(cfg, rng)
    n, k = params.beta_logits.shape
    exact = E.flat_exact(params, table)
    names = E.component_names(n, k)
    rows = []
    for kind in cfg["estimators"]:
        surrogate = None
        if kind == "relax":
            surrogate = E.Surrogate.create(n + k, rng=np.random.default_rng([cfg["seed"], 1]))
            E.fit_surrogate(table, params.copy(), surrogate, cfg["surrogate_steps"],
                            np.random.default_rng([cfg["seed"], 2]), tau=cfg["tau"])
        stats = E.monte_carlo(kind, table, params, cfg["samples"], np.random.default_rng([cfg["seed"], 3]),
                              cfg["tau"], surrogate)
        for i, name in enumerate(names):
            se = stats.stderr[i]
            sigma = (stats.mean[i] - exact[i]) / se if se > 0 else (0.0 if stats.mean[i] == exact[i] else np.inf)
            rows.append({"estimator": kind, "parameter": name, "mc_mean": stats.mean[i], "exact": exact[i],
                         "std_err": se, "bias_sigma": sigma, "variance": stats.variance[i]})
        worst = max(abs(r["bias_sigma"]) for r in rows if r["estimator"] == kind)
        print(f"{kind:10s} max |bias|/stderr = {worst:.2f}")
    _write_csv(out / "bias.csv", rows, BIAS_COLUMNS)
    _plot_bias(out / "plots" / "bias.svg", rows, cfg["estimators"], names)
    return 0


def _plot_bias(path: Path, rows: list[dict], kinds, names) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(5, 0.5 * len(names) * len(kinds)), 3.2))
    width = 0.8 / len(kinds)
    xs = np.arange(len(names))
    for i, kind in enumerate(kinds):
        vals = [abs(r["bias_sigma"]) for r in rows if r["estimator"] == kind]
        ax.bar(xs + i * width, np.minimum(vals, 1e3), width, label=kind)
    ax.axhline(3.0, color="k", lw=0.8, ls="--")
    ax.set_yscale("symlog", linthresh=3.0)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(names, rotation=60, fontsize=7)
    ax.set_ylabel("|bias| / stderr")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_gen_data(cfg: dict) -> int:
    out = cfg.pop("out")
    if not out:
        raise UsageError("--out is required")
    kw = {"size": cfg["size"], "freqs": tuple(cfg["freqs"]), "noise": cfg["noise"],
          "angle_range": cfg["angle_range"], "noise_blur": cfg["noise_blur"]}
    try:
        train = synth_rotor(cfg["n_train"], seed=2 * cfg["seed"], **kw)
        test = synth_rotor(cfg["n_test"], seed=2 * cfg["seed"] + 1, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_dataset_dir(out, train, test)
    _write_json(Path(out) / "resolved-config.json", cfg)
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")
    return 0


# ---------------------------------------------------------------- parser

def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffaug", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file; flags override its values")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("search", help="joint policy search")
    common(s)
    s.add_argument("--dataset")
    s.add_argument("--estimator", choices=B.ESTIMATORS)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--tau", type=float)
    s.add_argument("--ops", type=_csv_list, help="comma separated op names")
    s.add_argument("--k", type=int)
    s.add_argument("--pairing", choices=("unordered", "ordered"))
    s.add_argument("--top-n", dest="top_n", type=int)
    s.add_argument("--arch", choices=("mlp", "smallcnn"))
    s.add_argument("--n-reduced", dest="n_reduced", type=int)
    s.add_argument("--policy-lr", dest="policy_lr", type=float)

    e = sub.add_parser("evaluate", help="train a fresh classifier under a policy and test it")
    common(e)
    e.add_argument("--dataset")
    e.add_argument("--policy")
    e.add_argument("--epochs", type=int)
    e.add_argument("--batch-size", dest="batch_size", type=int)
    e.add_argument("--arch", choices=("mlp", "smallcnn"))

    b = sub.add_parser("estimate-bias", help="Monte Carlo bias / variance of the gradient estimators")
    common(b)
    b.add_argument("--toy", choices=("table", "bernoulli"))
    b.add_argument("--samples", type=int)
    b.add_argument("--tau", type=float)
    b.add_argument("--ops", type=_csv_list)
    b.add_argument("--k", type=int)
    b.add_argument("--pairing", choices=("unordered", "ordered"))
    b.add_argument("--surrogate-steps", dest="surrogate_steps", type=int)
    b.add_argument("--estimators", type=_csv_list)

    g = sub.add_parser("gen-data", help="write the synthetic rotor dataset as IDX files")
    common(g)
    g.add_argument("--n-train", dest="n_train", type=int)
    g.add_argument("--n-test", dest="n_test", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--noise-blur", dest="noise_blur", type=float)
    g.add_argument("--angle-range", dest="angle_range", type=float)
    return p


COMMANDS = {"search": (cmd_search, SEARCH_DEFAULTS), "evaluate": (cmd_evaluate, EVAL_DEFAULTS),
            "estimate-bias": (cmd_estimate_bias, BIAS_DEFAULTS), "gen-data": (cmd_gen_data, DATA_DEFAULTS)}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    fn, defaults = COMMANDS[args.command]
    flags = vars(args)
    try:
        cfg = resolve(defaults, flags.get("config"), flags)
        cfg["out"] = flags.get("out")
        return fn(cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"diffaug {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure in any module
        log.debug("failure", exc_info=True)
        print(f"diffaug {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
