"""``gist`` command-line entry point.

Every subcommand resolves its settings from three layers, later ones
winning: built-in defaults, an optional ``--config`` file of flat
``key = value`` lines, and explicit flags. The resolved settings are written
into the output (``# key=value`` lines for CSV, a ``config`` object for JSON,
a ``.json`` sidecar for binary embeddings).

Exit codes: 0 success, 1 runtime or verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .attention import FEATURE_MAPS
from .graph import Graph, GraphFormatError, load_edge_list, load_off_mesh, random_connected_graph, twin_leaf_graph
from .manifold import INTRINSIC_DIM, discretization_mismatch, knn_graph, sample_manifold, transfer_experiment

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


# name -> (type, default, help); names map to --kebab-case flags
Option = tuple[Callable[[str], Any], Any, str]

_GRAPH_OPTS: dict[str, Option] = {
    "graph": (str, None, "edge list or .off mesh; omit for a synthetic input"),
    "manifold": (str, None, "sample a point cloud (sphere_s2, torus_t2, circle_s1) and build a k-NN graph"),
    "n": (int, 16, "node count of the synthetic input"),
}

COMMANDS: dict[str, dict[str, Option]] = {
    "embed": {
        **_GRAPH_OPTS,
        "n": (int, 256, "node count of the synthetic input"),
        "r": (int, 64, "embedding dimension"),
        "k": (int, 8, "number of transition-matrix powers"),
        "seed": (int, 0, "projection seed"),
        "format": (str, "csv", "csv, json or bin"),
    },
    "verify-gauge": {
        **_GRAPH_OPTS,
        "trials": (int, 6, "number of sampled gauge transforms"),
        "tol": (float, 1e-10, "max-abs deviation allowed for exact gauge invariance"),
        "eps": (_float_list, [0.3, 0.5], "JL distortion levels"),
        "jl_fraction": (float, 0.95, "fraction of pairs that must fall within eps"),
        "feature_map": (str, "relu", "attention feature map"),
        "gi_feature_map": (str, None, "feature map of the gauge-invariant attention (default: --feature-map)"),
        "seed": (int, 0, "master seed"),
    },
    "sweep": {
        "param": (str, "r", "swept hyperparameter, r or k"),
        "values": (_int_list, [8, 32, 128, 256], "comma-separated values"),
        "seeds": (_int_list, [0, 1, 2, 3, 4], "comma-separated seeds"),
        "n": (int, 200, "nodes in the community task"),
        "classes": (int, 2, "communities"),
        "epochs": (int, 150, "training epochs"),
        "lr": (float, 1e-2, "learning rate"),
        "format": (str, "csv", "csv or json"),
    },
    "bench": {
        "ns": (_int_list, [2**p for p in range(12, 18)], "comma-separated node counts"),
        "ds": (_int_list, [64], "comma-separated feature widths"),
        "r": (int, 64, "embedding dimension"),
        "k": (int, 8, "FastRP powers"),
        "degree": (int, 8, "node degree of the synthetic graphs"),
        "repeats": (int, 3, "timed repeats per size"),
        "seed": (int, 0, "seed"),
        "format": (str, "csv", "csv or json"),
    },
    "disc-verify": {
        "manifold": (str, "sphere_s2", "sphere_s2, torus_t2 or circle_s1"),
        "ns": (_int_list, [250, 500, 1000, 2000], "comma-separated coarse sizes"),
        "ref_n": (int, 4000, "reference size"),
        "r": (int, 256, "embedding dimension"),
        "k": (int, 8, "FastRP powers"),
        "knn_k": (int, None, "k-NN neighbours (default depends on n)"),
        "num_pairs": (int, 4000, "sampled node pairs per resolution"),
        "seeds": (_int_list, [0, 1, 2, 3, 4], "comma-separated seeds"),
        "check": (str, "exact,fastrp", "methods that must decrease strictly for exit 0"),
        "format": (str, "json", "json or csv"),
    },
    "transfer": {
        "manifold": (str, "sphere_s2", "sphere_s2, torus_t2 or circle_s1"),
        "n_train": (int, 500, "coarse size"),
        "n_test": (int, 2000, "fine size"),
        "seeds": (_int_list, list(range(10)), "comma-separated seeds"),
        "r": (int, 64, "embedding dimension"),
        "k": (int, 8, "FastRP powers"),
        "embedding": (str, "exact_projected", "exact_projected or fastrp"),
        "hidden_dim": (int, 16, "feature width"),
        "epochs": (int, 300, "training epochs"),
        "lr": (float, 1e-2, "learning rate"),
        "format": (str, "json", "json or csv"),
    },
    "ablate": {
        "n": (int, 200, "nodes in the community task"),
        "classes": (int, 2, "communities"),
        "seeds": (_int_list, list(range(10)), "comma-separated seeds"),
        "num_blocks": (int, 1, "blocks"),
        "hidden_dim": (int, 16, "feature width"),
        "r": (int, 32, "embedding dimension"),
        "k": (int, 8, "FastRP powers"),
        "epochs": (int, 150, "training epochs"),
        "lr": (float, 1e-2, "learning rate"),
        "data_seed": (int, 0, "seed of the community task"),
        "format": (str, "csv", "csv or json"),
    },
}

_FORMATS = {
    "embed": ("csv", "json", "bin"),
    "sweep": ("csv", "json"),
    "bench": ("csv", "json"),
    "disc-verify": ("json", "csv"),
    "transfer": ("json", "csv"),
    "ablate": ("csv", "json"),
}


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` pairs; ``#`` starts a comment, quotes are stripped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        if len(val) >= 2 and val[0] == val[-1] and val[0] in "\"'":
            val = val[1:-1]
        out[key.replace("-", "_")] = val.strip("[]")
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    options = COMMANDS[command]
    cfg = {name: default for name, (_, default, _) in options.items()}
    if ns.config:
        try:
            file_cfg = read_config_file(ns.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        for key, raw in file_cfg.items():
            if key not in options:
                raise UsageError(f"unknown config key {key!r} for {command}")
            try:
                cfg[key] = options[key][0](raw)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
    for name in options:
        val = getattr(ns, name)
        if val is not None:
            cfg[name] = val
    return cfg


def _validate(command: str, cfg: dict[str, Any]) -> None:
    for name in ("r", "k", "n", "trials", "epochs", "repeats", "degree", "num_pairs", "hidden_dim", "classes"):
        if name in cfg and cfg[name] is not None and cfg[name] < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1, got {cfg[name]}")
    if "format" in cfg and cfg["format"] not in _FORMATS.get(command, ()):
        raise UsageError(f"--format must be one of {', '.join(_FORMATS[command])}")
    if command == "sweep" and cfg["param"] not in ("r", "k"):
        raise UsageError("--param must be r or k")
    if cfg.get("graph") and cfg.get("manifold") and command in ("embed", "verify-gauge"):
        raise UsageError("--graph and --manifold are mutually exclusive")
    for name in ("feature_map", "gi_feature_map"):
        if cfg.get(name) is not None and cfg[name] not in FEATURE_MAPS:
            raise UsageError(f"--{name.replace('_', '-')} must be one of {', '.join(sorted(FEATURE_MAPS))}")
    if cfg.get("manifold") is not None and cfg["manifold"] not in INTRINSIC_DIM:
        raise UsageError(f"--manifold must be one of {', '.join(INTRINSIC_DIM)}")
    if "tol" in cfg and cfg["tol"] < 0:
        raise UsageError("--tol must be >= 0")
    for name in ("seeds", "values", "ns", "ds"):
        if name in cfg and not cfg[name]:
            raise UsageError(f"--{name} must not be empty")


# -- output ---------------------------------------------------------------------------


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write to a temporary file beside ``path`` and rename it into place."""
    path = Path(path)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(out: str | None, data: bytes | str) -> None:
    if out is None or out == "-":
        if isinstance(data, bytes):
            sys.stdout.buffer.write(data)
        else:
            sys.stdout.write(data)
    else:
        atomic_write(out, data)


def _header(command: str, cfg: dict[str, Any]) -> str:
    items = {"command": command, "version": __version__, **cfg}
    return "".join(f"# {k}={_fmt(v)}\n" for k, v in items.items())


def _fmt(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _csv(command: str, cfg: dict[str, Any], columns: list[str], rows: list[dict], extra: dict | None = None) -> str:
    lines = [_header(command, cfg).rstrip("\n")] if cfg else []
    lines += [f"# {k}={v}" for k, v in (extra or {}).items()]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _json(command: str, cfg: dict[str, Any], body: dict) -> str:
    return json.dumps({"command": command, "version": __version__, "config": cfg, **body}, indent=2, default=_jsonable) + "\n"


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# -- inputs -----------------------------------------------------------------------------


def _load_graph(cfg: dict[str, Any], seed: int) -> Graph:
    if cfg.get("graph"):
        path = cfg["graph"]
        if str(path).lower().endswith(".off"):
            return load_off_mesh(path)
        return load_edge_list(path)
    if cfg.get("manifold"):
        return knn_graph(sample_manifold(cfg["manifold"], cfg["n"], seed))
    rng = np.random.default_rng([seed, 0])
    if cfg["n"] >= 4:
        # twin leaves give a degenerate eigenspace, so block rotations are non-trivial
        return twin_leaf_graph(cfg["n"], rng)
    return random_connected_graph(cfg["n"], min(4.0, cfg["n"] - 1.0), rng)


# -- commands -----------------------------------------------------------------------------


def cmd_embed(cfg: dict[str, Any], out: str | None) -> int:
    from .spectral import fastrp_embed

    g = _load_graph(cfg, cfg["seed"])
    t0 = time.perf_counter()
    emb = fastrp_embed(g, cfg["r"], cfg["k"], seed=cfg["seed"])
    elapsed = time.perf_counter() - t0
    data = emb.data
    if cfg["format"] == "bin":
        from .spectral import EMBED_MAGIC

        raw = EMBED_MAGIC + np.array([data.shape[0], data.shape[1]], dtype="<u8").tobytes()
        raw += np.ascontiguousarray(data, dtype="<f8").tobytes()
        _emit(out, raw)
        if out not in (None, "-"):
            atomic_write(f"{out}.json", _json("embed", cfg, {"shape": list(data.shape)}))
    elif cfg["format"] == "json":
        _emit(out, _json("embed", cfg, {"shape": list(data.shape), "embedding": data}))
    else:
        cols = ["node"] + [f"e{c}" for c in range(data.shape[1])]
        rows = [{"node": i, **{f"e{c}": float(v) for c, v in enumerate(row)}} for i, row in enumerate(data)]
        _emit(out, _csv("embed", cfg, cols, rows))
    print(f"embedded {g.num_nodes} nodes into {data.shape[1]} dims in {elapsed:.3f}s", file=sys.stderr)
    return EXIT_OK


def cmd_verify_gauge(cfg: dict[str, Any], out: str | None) -> int:
    from .harness import gauge_trial, jl_trial

    g = _load_graph(cfg, cfg["seed"])
    seeds = np.random.SeedSequence(cfg["seed"]).generate_state(cfg["trials"])
    trials = []
    for t, s in enumerate(seeds):
        kind = ("sign_flip", "block_rotation")[t % 2]
        rec = {"trial": t, "seed": int(s), **gauge_trial(g, kind, int(s), cfg["feature_map"],
                                                           gi_feature_map=cfg["gi_feature_map"])}
        rec["jl"] = {str(e): jl_trial(g, e, int(s)) for e in cfg["eps"]}
        trials.append(rec)
    max_dev = max(max(r["attention_dev"], r["block_dev"]) for r in trials)
    jl_min = min(v["fraction_within_eps"] for r in trials for v in r["jl"].values())
    passed = max_dev <= cfg["tol"] and jl_min >= cfg["jl_fraction"]
    body = {
        "num_nodes": g.num_nodes,
        "trials": trials,
        "max_exact_gauge_deviation": max_dev,
        "max_attention_deviation": max(r["attention_dev"] for r in trials),
        "max_block_deviation": max(r["block_dev"] for r in trials),
        "max_phi_gram_deviation": max(r["phi_gram_dev"] for r in trials),
        "min_jl_fraction": jl_min,
        "passed": passed,
    }
    _emit(out, _json("verify-gauge", cfg, body))
    print(f"max exact-gauge deviation {max_dev:.3e} (tol {cfg['tol']:.1e}), "
          f"min JL fraction {jl_min:.3f}: {'PASS' if passed else 'FAIL'}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_sweep(cfg: dict[str, Any], out: str | None) -> int:
    from .harness import run_sweep

    rows = run_sweep(cfg["param"], cfg["values"], cfg["seeds"],
                     {"n": cfg["n"], "num_classes": cfg["classes"]}, epochs=cfg["epochs"], lr=cfg["lr"])
    if cfg["format"] == "json":
        _emit(out, _json("sweep", cfg, {"rows": rows}))
    else:
        _emit(out, _csv("sweep", cfg, ["value", "mean", "std"], rows))
    return EXIT_OK


def cmd_bench(cfg: dict[str, Any], out: str | None) -> int:
    from .harness import loglog_slope, run_bench

    rows = run_bench(cfg["ns"], cfg["ds"], cfg["r"], cfg["k"], cfg["degree"], repeats=cfg["repeats"], seed=cfg["seed"])
    slopes = {}
    for d in cfg["ds"]:
        sub = [row for row in rows if row["d"] == d]
        if len(sub) > 1:
            slopes[f"slope_d{d}"] = loglog_slope([r["n"] for r in sub], [r["time_s"] for r in sub])
    if cfg["format"] == "json":
        _emit(out, _json("bench", cfg, {"rows": rows, **slopes}))
    else:
        _emit(out, _csv("bench", cfg, ["n", "d", "time_s", "time_per_node_us", "peak_rss_mb"], rows, slopes))
    for key, val in slopes.items():
        print(f"{key}={val:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_disc_verify(cfg: dict[str, Any], out: str | None) -> int:
    report = discretization_mismatch(
        cfg["manifold"], cfg["ns"], cfg["ref_n"], cfg["r"], cfg["k"], cfg["num_pairs"],
        cfg["seeds"], cfg["knn_k"],
    )
    check = [m for m in cfg["check"].split(",") if m]
    unknown = set(check) - set(report.per_n)
    if unknown:
        raise UsageError(f"--check names unknown methods: {', '.join(sorted(unknown))}")
    verdict = {m: report.strictly_decreasing(m) and report.slope[m] < 0 for m in report.per_n}
    if cfg["format"] == "csv":
        extra = {f"slope_{m}": s for m, s in report.slope.items()}
        extra["theoretical_slope"] = report.theoretical_slope
        _emit(out, _header("disc-verify", cfg) + "".join(f"# {k}={v}\n" for k, v in extra.items()) + report.to_csv())
    else:
        body = json.loads(report.to_json())
        body["decreasing"] = verdict
        _emit(out, _json("disc-verify", cfg, {"report": body}))
    passed = all(verdict[m] for m in check)
    for m in report.per_n:
        print(f"{m}: slope {report.slope[m]:.3f}, decreasing {verdict[m]}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_transfer(cfg: dict[str, Any], out: str | None) -> int:
    rows = transfer_experiment(
        cfg["manifold"], cfg["n_train"], cfg["n_test"], cfg["seeds"], cfg["r"], cfg["hidden_dim"],
        cfg["epochs"], cfg["lr"], cfg["embedding"], cfg["k"],
    )
    wins = sum(r["gauge_invariant_drop"] < r["gauge_broken_drop"] for r in rows)
    if cfg["format"] == "csv":
        cols = list(rows[0].keys()) if rows else ["seed"]
        _emit(out, _csv("transfer", cfg, cols, rows, {"invariant_wins": wins}))
    else:
        _emit(out, _json("transfer", cfg, {"rows": rows, "invariant_wins": wins}))
    print(f"gauge-invariant drop smaller in {wins}/{len(rows)} seeds", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(cfg: dict[str, Any], out: str | None) -> int:
    from .block import ModelConfig, run_ablation
    from .datasets import community_task

    task = community_task(n=cfg["n"], num_classes=cfg["classes"], seed=cfg["data_seed"])
    mcfg = ModelConfig(num_blocks=cfg["num_blocks"], hidden_dim=cfg["hidden_dim"], embed_dim=cfg["r"],
                       fastrp_k=cfg["k"], input_dim=task.x.shape[1], output_dim=task.num_classes)
    rows = run_ablation(task.graph, task.x, task.labels, mcfg, task.train_idx, task.test_idx,
                        cfg["seeds"], cfg["epochs"], cfg["lr"])
    if cfg["format"] == "json":
        _emit(out, _json("ablate", cfg, {"rows": rows}))
    else:
        _emit(out, _csv("ablate", cfg, ["ablation", "accuracy", "accuracy_std", "delta"], rows))
    return EXIT_OK


_HELP = {
    "embed": "FastRP embedding of a graph",
    "verify-gauge": "exact gauge invariance and JL checks on exact eigenmaps",
    "sweep": "toy-task accuracy against r or k",
    "bench": "forward time and peak memory against N",
    "disc-verify": "kernel mismatch between manifold resolutions",
    "transfer": "coarse-to-fine transfer of gauge-invariant and gauge-broken models",
    "ablate": "single-branch ablation on the community task",
}

HANDLERS = {
    "embed": cmd_embed,
    "verify-gauge": cmd_verify_gauge,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "disc-verify": cmd_disc_verify,
    "transfer": cmd_transfer,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gist", description="Gauge-invariant spectral transformer tools")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in COMMANDS.items():
        p = sub.add_parser(command, help=_HELP[command])
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--out", help="output path (default: stdout)")
        for name, (typ, default, text) in options.items():
            flag = "--" + name.replace("_", "-")
            p.add_argument(flag, dest=name, type=typ, default=None, help=f"{text} (default: {_fmt(default)})")
        if "seeds" in options and "seed" not in options:
            # --seed N is shorthand for --seeds N
            p.add_argument("--seed", dest="seeds", type=_int_list, default=None, help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve(ns.command, ns)
        _validate(ns.command, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gist {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return HANDLERS[ns.command](cfg, ns.out)
    except UsageError as exc:
        print(f"gist {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, GraphFormatError, ValueError) as exc:
        print(f"gist {ns.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
