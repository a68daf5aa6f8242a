"""Command-line entry point: ``mechdis <subcommand> [flags]``.

Flag values resolve as CLI > ``--config`` JSON file > defaults, with the
``MECHDIS_SEED`` environment variable as the lowest-precedence seed. Every
JSON artifact embeds ``format_version``, the resolved config and the seed, and
contains no wall-clock data, so reruns with identical flags are byte-identical.

Exit codes: 0 ok, 2 usage or validation error, 3 numeric failure,
4 counterexample found.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, fields

import numpy as np

from . import metrics, model, synthdata, theory, training
from .diffengine import Rng
from .errors import ContractError, MechDisError, NumericError

FORMAT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_COUNTEREXAMPLE = 0, 2, 3, 4
SWEEP_COLUMNS = ["kind", "status", "alpha_a", "alpha_z", "seed", "mcc", "linear_score", "elbo", "shd_a", "shd_z"]

log = logging.getLogger("mechdis")


class UsageError(MechDisError):
    pass


# ---------------------------------------------------------------- config resolution


# name -> (type, default); None default means required unless noted
TRAIN_FLAGS = {
    "alpha_a": (float, 0.0), "alpha_z": (float, 0.0), "lr": (float, 0.0005),
    "epochs": (int, 100), "batch_size": (int, 256), "temperature": (float, 1.0),
    "log_every": (int, 1), "checkpoint_every": (int, 0), "test_fraction": (float, 0.1),
    "enc_hidden": (int, 128), "enc_layers": (int, 3), "tr_hidden": (int, 64), "tr_layers": (int, 3),
}

COMMANDS = {
    "generate": {"variant": (str, None), "dz": (int, None), "dx": (int, None), "da": (int, 0),
                 "n_seq": (int, 10000), "t_len": (int, 2), "sigma_z": (float, synthdata.DEFAULT_SIGMA_Z),
                 "seed": (int, 0), "out": (str, None)},
    "train": dict(TRAIN_FLAGS, data=(str, None), seed=(int, 0), out=(str, None), baseline=(str, "none")),
    "eval": {"data": (str, None), "checkpoint": (str, None), "seed": (int, 0),
             "test_fraction": (float, 0.1), "out": (str, None)},
    "sweep": dict(TRAIN_FLAGS, data=(str, None), alpha_a=(list, [0.0]), alpha_z=(list, [0.0]),
                  seeds=(list, [0]), jobs=(int, 1), baselines=(bool, True), out=(str, None)),
    "check": {"graph": (str, ""), "variant": (str, ""), "dz": (int, 3), "dx": (int, 0), "mode": (str, "auto"),
              "probes": (int, 0), "seed": (int, 0), "out": (str, "")},
    "verify-lemmas": {"trials": (int, 200), "dim": (list, [3]), "seed": (int, 0), "out": (str, "")},
}


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser():
    p = argparse.ArgumentParser(prog="mechdis", description="Mechanism-sparsity regularized nonlinear ICA.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "sample a synthetic dataset", "train": "train a model on a dataset",
        "eval": "evaluate a checkpoint", "sweep": "grid of train+eval runs with baselines",
        "check": "graphical criterion and variability checks", "verify-lemmas": "randomized lemma oracles",
    }
    for cmd, spec in COMMANDS.items():
        sp = sub.add_parser(cmd, help=helps[cmd])
        sp.add_argument("--config", default=None, help="JSON file with flag values")
        for name, (typ, _) in spec.items():
            if typ is list:
                elem = int if name in ("seeds", "dim") else float
                sp.add_argument(_flag(name), nargs="+", type=elem, default=None)
            elif typ is bool:
                sp.add_argument(_flag(name), action=argparse.BooleanOptionalAction, default=None)
            else:
                sp.add_argument(_flag(name), type=typ, default=None)
    return p


def _read_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in obj.items()}


def resolve(command, args, environ=None):
    """Resolved flag dict for ``command`` (CLI > file > MECHDIS_SEED > defaults)."""
    environ = os.environ if environ is None else environ
    spec = COMMANDS[command]
    file_cfg = _read_config_file(args.config)
    unknown = sorted(set(file_cfg) - set(spec))
    if unknown:
        raise UsageError(f"unknown keys in config file: {', '.join(unknown)}")
    out = {}
    for name, (typ, default) in spec.items():
        value = getattr(args, name, None)
        if value is None:
            value = file_cfg.get(name)
        if value is None and name == "seed" and environ.get("MECHDIS_SEED"):
            try:
                value = int(environ["MECHDIS_SEED"])
            except ValueError:
                raise UsageError("MECHDIS_SEED must be an integer") from None
        if value is None:
            value = default
        if value is None:
            raise UsageError(f"missing required flag {_flag(name)}")
        try:
            if typ is list:
                if not isinstance(value, list):
                    value = [value]
                elem = int if name in ("seeds", "dim") else float
                value = [elem(v) for v in value]
            elif typ is bool:
                value = bool(value)
            else:
                value = typ(value)
        except (TypeError, ValueError):
            raise UsageError(f"bad value for {_flag(name)}: {value!r}") from None
        out[name] = value
    return out


def _train_config(cfg, **override):
    names = {f.name for f in fields(training.TrainConfig)}
    kw = {k: v for k, v in cfg.items() if k in names}
    kw.update(override)
    return training.TrainConfig(**kw).validate()


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(_dump(obj))
    os.replace(tmp, path)


def _envelope(command, cfg, body):
    return dict(body, format_version=FORMAT_VERSION, command=command, config=cfg, seed=cfg.get("seed"))


def _mkdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {path}: {exc}") from None


# ---------------------------------------------------------------- subcommands


def cmd_generate(cfg):
    variant = cfg["variant"].lower()
    if variant not in synthdata.VARIANTS:
        raise UsageError(f"unknown variant {cfg['variant']!r}; expected one of {', '.join(synthdata.VARIANTS)}")
    if cfg["dz"] < 1 or cfg["dx"] < cfg["dz"]:
        raise UsageError("need 1 <= dz <= dx")
    if cfg["n_seq"] < 1 or cfg["t_len"] < 2:
        raise UsageError("need n_seq >= 1 and t_len >= 2")
    proc, batch = synthdata.generate(variant, cfg["dz"], cfg["dx"], cfg["n_seq"], cfg["t_len"], seed=cfg["seed"],
                                     sigma_z=cfg["sigma_z"], d_a=cfg["da"] or None)
    meta = synthdata.process_metadata(proc, batch)
    meta.update(format_version=FORMAT_VERSION, config=cfg)
    _mkdir(cfg["out"])
    synthdata.save_dataset(batch, meta, cfg["out"])
    summary = {"variant": variant, "shapes": {"x": list(batch.x.shape), "a": list(batch.a.shape),
                                              "z": list(batch.z.shape)},
               "x_mean": float(batch.x.mean()), "x_std": float(batch.x.std())}
    _write_json(os.path.join(cfg["out"], "report.json"), _envelope("generate", cfg, summary))
    return EXIT_OK


def _load_data(path):
    return synthdata.load_dataset(path)


def _plain_meta(meta):
    return {k: v for k, v in meta.items() if k not in ("graph_a", "graph_z")}


def _report(params, batch, meta, conf, cfg, command, extra=None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = metrics.evaluate(params, batch, meta, test_fraction=conf.test_fraction, seed=cfg["seed"])
    rep["dataset"] = {k: meta[k] for k in ("variant", "d_z", "d_x", "d_a", "n_seq", "T", "seed") if k in meta}
    if extra:
        rep.update(extra)
    return _envelope(command, cfg, rep)


def cmd_train(cfg):
    batch, meta = _load_data(cfg["data"])
    conf = _train_config(cfg)
    _mkdir(cfg["out"])
    ckpt = os.path.join(cfg["out"], "checkpoint.json")
    extra = {"train_config": asdict(conf), "run_config": cfg, "seed": cfg["seed"]}
    baseline = cfg["baseline"]
    if baseline == "none":
        params, history = training.train(batch, meta, conf, out_dir=cfg["out"])
        with open(os.path.join(cfg["out"], "log.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(history.to_csv())
        body = {"kind": "model"}
    elif baseline in ("supervised", "random"):
        fn = metrics.supervised_baseline if baseline == "supervised" else metrics.random_baseline
        score, params = fn(batch, meta, conf)
        body = {"kind": baseline, "baseline_mcc": score}
    else:
        raise UsageError(f"--baseline must be none, supervised or random, got {baseline!r}")
    model.save_checkpoint(params, ckpt, dict(extra, kind=body["kind"]))
    _write_json(os.path.join(cfg["out"], "report.json"), _report(params, batch, meta, conf, cfg, "train", body))
    return EXIT_OK


def cmd_eval(cfg):
    batch, meta = _load_data(cfg["data"])
    params, raw = model.load_checkpoint(cfg["checkpoint"])
    mc = params.config
    if (mc.d_z, mc.d_x, mc.d_a) != (meta["d_z"], meta["d_x"], meta["d_a"]):
        raise UsageError(f"checkpoint dims (d_z={mc.d_z}, d_x={mc.d_x}, d_a={mc.d_a}) do not match dataset "
                         f"(d_z={meta['d_z']}, d_x={meta['d_x']}, d_a={meta['d_a']})")
    conf = training.TrainConfig(test_fraction=cfg["test_fraction"]).validate()
    rep = _report(params, batch, meta, conf, cfg, "eval", {"kind": raw.get("kind", "model")})
    out = cfg["out"]
    if os.path.isdir(out) or out.endswith(os.sep):
        _mkdir(out)
        out = os.path.join(out, "report.json")
    _write_json(out, rep)
    return EXIT_OK


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _sweep_job(job):
    """One sweep row; runs in a worker process, never raises."""
    kind, alpha_a, alpha_z, seed, cfg = job
    row = {"kind": kind, "status": "ok", "alpha_a": alpha_a, "alpha_z": alpha_z, "seed": seed}
    try:
        batch, meta = _load_data(cfg["data"])
        conf = _train_config(cfg, seed=seed, alpha_a=alpha_a or 0.0, alpha_z=alpha_z or 0.0)
        if kind == "model":
            run_dir = os.path.join(cfg["out"], "runs", f"a{alpha_a!r}_z{alpha_z!r}_s{seed}")
            os.makedirs(run_dir, exist_ok=True)
            params, history = training.train(batch, meta, conf, out_dir=run_dir)
            with open(os.path.join(run_dir, "log.csv"), "w", encoding="utf-8", newline="") as fh:
                fh.write(history.to_csv())
            run_cfg = dict(cfg, seed=seed, alpha_a=alpha_a, alpha_z=alpha_z, out=run_dir)
            rep = _report(params, batch, meta, conf, run_cfg, "sweep", {"kind": "model"})
            model.save_checkpoint(params, os.path.join(run_dir, "checkpoint.json"),
                                  {"train_config": asdict(conf), "run_config": run_cfg,
                                   "seed": seed, "kind": "model"})
            _write_json(os.path.join(run_dir, "report.json"), rep)
            row.update(mcc=rep["mcc"], linear_score=rep["linear_score"], elbo=rep["elbo_test"],
                       shd_a=rep["shd_a"], shd_z=rep["shd_z"])
        else:
            fn = metrics.supervised_baseline if kind == "supervised" else metrics.random_baseline
            score, params = fn(batch, meta, conf)
            row["mcc"] = score
    except Exception as exc:  # recorded as a failed row, the sweep goes on
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _row_key(row):
    order = {"model": 0, "supervised": 1, "random": 2}
    return (order[row["kind"]], row["alpha_a"] if row["alpha_a"] is not None else -1.0,
            row["alpha_z"] if row["alpha_z"] is not None else -1.0, row["seed"])


def _csv_text(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def cmd_sweep(cfg):
    if not cfg["alpha_a"] or not cfg["alpha_z"] or not cfg["seeds"]:
        raise UsageError("alpha and seed lists must be non-empty")
    if any(a < 0 for a in cfg["alpha_a"] + cfg["alpha_z"]):
        raise UsageError("alpha values must be >= 0")
    if cfg["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    _train_config(cfg, alpha_a=0.0, alpha_z=0.0)   # validate shared settings up front
    _load_data(cfg["data"])
    _mkdir(cfg["out"])
    jobs = [("model", a, z, s, cfg) for a in cfg["alpha_a"] for z in cfg["alpha_z"] for s in cfg["seeds"]]
    if cfg["baselines"]:
        jobs += [(kind, None, None, s, cfg) for kind in ("supervised", "random") for s in cfg["seeds"]]

    path = os.path.join(cfg["out"], "sweep.csv")
    rows = []
    # single writer: rows are appended (and flushed) here as they finish, then
    # the file is atomically rewritten in canonical order
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        fh.flush()

        def emit(row):
            rows.append(row)
            fh.write(_csv_text([row]).split("\n", 1)[1])
            fh.flush()
            if row["status"] != "ok":
                log.warning("sweep row failed: %s", row.get("error"))

        if cfg["jobs"] == 1:
            for job in jobs:
                emit(_sweep_job(job))
        else:
            with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
                for fut in as_completed([pool.submit(_sweep_job, j) for j in jobs]):
                    emit(fut.result())
    rows.sort(key=_row_key)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(_csv_text(rows))
    os.replace(tmp, path)
    failures = [{k: r.get(k) for k in ("kind", "alpha_a", "alpha_z", "seed", "error")}
                for r in rows if r["status"] != "ok"]
    _write_json(os.path.join(cfg["out"], "report.json"),
                _envelope("sweep", cfg, {"rows": len(rows), "failed": failures,
                                         "columns": SWEEP_COLUMNS, "csv": "sweep.csv"}))
    return EXIT_OK


def _load_graph(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return synthdata.BipartiteGraph.from_json(json.load(fh))
    except OSError as exc:
        raise UsageError(f"cannot read graph file {path}: {exc}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, ContractError) as exc:
        raise UsageError(f"malformed graph file {path}: {exc}") from None


def cmd_check(cfg):
    mode = cfg["mode"]
    if mode not in ("auto", "action", "temporal"):
        raise UsageError("--mode must be auto, action or temporal")
    if bool(cfg["graph"]) == bool(cfg["variant"]):
        raise UsageError("give exactly one of --graph or --variant")
    process = None
    if cfg["variant"]:
        variant = cfg["variant"].lower()
        if variant not in synthdata.VARIANTS:
            raise UsageError(f"unknown variant {cfg['variant']!r}")
        if cfg["dz"] < 1:
            raise UsageError("--dz must be >= 1")
        process = synthdata.make_process(variant, cfg["dz"], cfg["dx"] or 2 * cfg["dz"], seed=cfg["seed"])
        if mode == "auto":
            mode = "action" if variant in synthdata.ACTION_VARIANTS else "temporal"
        graph = process.graph_a if mode == "action" else process.graph_z
    else:
        graph = _load_graph(cfg["graph"])
        if mode == "auto":
            mode = "temporal" if graph.rows == graph.cols else "action"
    if mode == "temporal" and graph.rows != graph.cols:
        raise UsageError(f"temporal mode needs a square graph, got {graph.rows}x{graph.cols}")
    crit = (theory.check_action_criterion if mode == "action" else theory.check_temporal_criterion)(graph)
    body = {"mode": mode, "graph": graph.to_json(), "criterion": crit.to_json()}
    satisfied = crit.satisfied
    if process is not None:
        rng = Rng(cfg["seed"])
        probes = cfg["probes"] or None
        if mode == "action":
            reps = [theory.check_action_variability(process, l, probes, rng) for l in range(process.d_a)]
        else:
            reps = [theory.check_temporal_variability(process, probes, rng)]
        body["variability"] = [r.to_json() for r in reps]
        body["variability_satisfied"] = all(r.satisfied for r in reps)
        satisfied = satisfied and body["variability_satisfied"]
    body["satisfied"] = satisfied
    text = _dump(_envelope("check", cfg, body))
    sys.stdout.write(text)
    if cfg["out"]:
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def lemma_patterns(m):
    """``(lemma, name, pattern)`` triples checked by verify-lemmas at dimension ``m``."""
    out = [("action", "cyclic", synthdata.adjacency("nt-a", m, m)[0])]
    if m == 3:
        out.append(("action", "figure", np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1]])))
    out.append(("temporal", "nt-t", synthdata.adjacency("nt-t", m, m)[1]))
    return out


def cmd_verify_lemmas(cfg):
    if cfg["trials"] < 1 or any(m < 1 for m in cfg["dim"]):
        raise UsageError("--trials and --dim must be >= 1")
    streams = iter(Rng(cfg["seed"]).spawn(4 * len(cfg["dim"])))
    results, found = [], False
    for m in cfg["dim"]:
        for lemma, name, S in lemma_patterns(m):
            rng = next(streams)
            entry = {"lemma": lemma, "pattern": name, "dim": m, "S": np.asarray(S).tolist()}
            try:
                if lemma == "action":
                    res = theory.verify_lemma_action(m, m, S, cfg["trials"], rng)
                else:
                    res = theory.verify_lemma_temporal(m, S, cfg["trials"], rng)
            except theory.PreconditionError as exc:
                entry.update(status="skipped", reason=str(exc), trials=0)
            else:
                entry.update(status="ok" if res.ok else "counterexample", trials=res.trials,
                             sparse_hits=res.hits, counterexample=res.counterexample)
                found = found or not res.ok
            results.append(entry)
    body = {"results": results, "counterexample_found": found,
            "trials_run": {k: sum(r["trials"] for r in results if r["lemma"] == k) for k in ("action", "temporal")}}
    text = _dump(_envelope("verify-lemmas", cfg, body))
    sys.stdout.write(text)
    if cfg["out"]:
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_COUNTEREXAMPLE if found else EXIT_OK


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "check": cmd_check, "verify-lemmas": cmd_verify_lemmas}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except NumericError as exc:
        print(f"mechdis: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MechDisError, ValueError) as exc:
        print(f"mechdis: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
