"""Command line entry points: ``dcwb``, ``hostctl`` and ``sitectl``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
configuration error, 3 privacy refusal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .config import FitConfig, build_specs, heart_config, specs_for_data
from .dataio import (
    EFFECT_COLUMNS,
    Dataset,
    dump_json,
    export_partial_effects,
    heart_schema,
    load_csv,
    load_heart_file,
    load_heart_sites,
    clean_heart,
    partition_horizontal,
    write_rows_csv,
)
from .errors import DcwbError, InputError
from .host import HostState, audit_costs
from .model import AdditiveModel, compare_models
from .pooled import fit_pooled_sites
from .transport import (
    HostEndpoint,
    SiteNode,
    TcpCarrier,
    listen,
    serve_site,
    spawn_loopback_cluster,
    spawn_simulated_cluster,
)
from .site import SiteState

log = logging.getLogger("dcwb")

RISK_COLUMNS = ("iteration", "train_risk", "validation_risk")
SELECTION_COLUMNS = ("iteration", "spec_id", "learner", "site_specific", "sse")


class UsageError(InputError):
    pass


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def load_config(args) -> FitConfig:
    cfg = FitConfig.load(args.config) if getattr(args, "config", None) else FitConfig()
    d = cfg.to_dict()
    for name in ("max_iters", "learning_rate", "patience", "seed", "privacy_level", "ridge_jitter", "loss"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    if getattr(args, "audit", False):
        d["audit"] = True
    if getattr(args, "no_early_stop", False):
        d["patience"] = None
    return FitConfig.from_dict(d)


def load_dataset(args, cfg: FitConfig) -> Dataset:
    if getattr(args, "heart_dir", None):
        return load_heart_sites(args.heart_dir)
    if not getattr(args, "data", None):
        raise UsageError("one of --data or --heart-dir is required")
    if not cfg.schema:
        raise UsageError("CSV input needs a 'schema' in the config")
    site_col = cfg.site_column if cfg.site_column in cfg.schema else None
    return load_csv(args.data, cfg.schema, cfg.response, site_col)


def make_partitions(data: Dataset, args, cfg: FitConfig):
    scheme = getattr(args, "partition", None)
    S = getattr(args, "simulate", None)
    if scheme is None:
        scheme = "by-site-tag" if data.site_column is not None else "random"
    if scheme == "by-site-tag":
        parts = partition_horizontal(data, S, "by-site-tag", cfg.seed, site_column=data.site_column or "site")
    else:
        if S is None:
            raise UsageError(f"--partition {scheme} needs --simulate S")
        parts = partition_horizontal(data, S, scheme, cfg.seed)
    for p in parts:
        log.info("site %s (%s): %d rows", p.columns[p.site_column][0], p.name, p.n_rows)
    return parts


def prepare(args):
    cfg = load_config(args)
    data = load_dataset(args, cfg)
    if getattr(args, "heart_dir", None):
        cfg = heart_config(cfg)
    parts = make_partitions(data, args, cfg)
    return cfg, parts, specs_for_data(cfg, data, len(parts))


def write_outputs(model: AdditiveModel, out: Path, cfg: FitConfig):
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(model.to_json(), encoding="utf-8")
    write_rows_csv(model.risk_trace, out / "risk_trace.csv", RISK_COLUMNS)
    rows = []
    for r in model.selection_log:
        s = model.specs[r.spec_id]
        rows.append(
            {
                "iteration": r.iteration,
                "spec_id": r.spec_id,
                "learner": s.label,
                "site_specific": int(s.site_specific),
                "sse": r.sse[r.spec_id],
            }
        )
    write_rows_csv(rows, out / "selection_log.csv", SELECTION_COLUMNS)
    dump_json(cfg.to_dict(), out / "config.json")


def summary(model: AdditiveModel) -> str:
    shared = sum(1 for r in model.selection_log[: model.best_iteration] if not model.specs[r.spec_id].site_specific)
    site = model.best_iteration - shared
    return (
        f"iterations run {model.n_iterations}, best {model.best_iteration} "
        f"(shared {shared}, site-specific {site}), train risk {model.final_risk:.6g}"
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit_pooled(args) -> int:
    cfg, parts, specs = prepare(args)
    model = fit_pooled_sites(parts, specs, cfg.host_settings())
    write_outputs(model, Path(args.out), cfg)
    print(summary(model))
    return 0


def _run_host(endpoint, specs, cfg: FitConfig, args) -> int:
    host = HostState(endpoint, specs, cfg.host_settings())
    try:
        model = host.run()
    finally:
        endpoint.close()
        if getattr(args, "transcript", None):
            endpoint.write_transcript(args.transcript)
        for t in getattr(endpoint, "threads", []):
            t.join(timeout=5)
    out = Path(args.out)
    write_outputs(model, out, cfg)
    ledger = host.ledger.report()
    if cfg.audit:
        ledger["audit"] = audit_costs(host.ledger, model.n_iterations, specs=model.specs)
    dump_json(ledger, out / "ledger.json")
    print(summary(model))
    if model.metadata.get("partial"):
        print("warning: some site-specific effects were withheld by the sites; the model is partial")
    return 0


def cmd_fit_distributed(args) -> int:
    if args.sites:
        return cmd_host_fit(args)
    cfg, parts, specs = prepare(args)
    spawn = spawn_loopback_cluster if args.carrier == "tcp" else spawn_simulated_cluster
    endpoint, _ = spawn(parts, cfg.privacy_level)
    return _run_host(endpoint, specs, cfg, args)


def cmd_host_fit(args) -> int:
    cfg = load_config(args)
    if not cfg.learners and not cfg.schema:
        raise UsageError("remote fits need 'learners' or a 'schema' in the config")
    specs = build_specs(cfg, cfg.schema)
    addresses = [a for a in args.sites.split(",") if a]
    endpoint = HostEndpoint(TcpCarrier(addresses))
    return _run_host(endpoint, specs, cfg, args)


def cmd_compare(args) -> int:
    a = _load_model(args.model_a)
    b = _load_model(args.model_b)
    report = compare_models(a, b, args.rtol, args.risk_tol)
    print(json.dumps(report, sort_keys=True, indent=1))
    return 0 if report["pass"] else 1


def _load_model(path) -> AdditiveModel:
    try:
        return AdditiveModel.from_json(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from None


def _schema_for_model(model: AdditiveModel, header) -> dict:
    categorical = {f for s in model.specs for f in s.levels}
    return {h: ("categorical" if h in categorical or h not in _numeric_features(model) else "numeric") for h in header}


def _numeric_features(model):
    return {f for s in model.specs for f in s.features if f not in s.levels}


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    with open(args.data, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().strip().split(",")]
    schema = _schema_for_model(model, header)
    site_col = args.site_column if args.site_column in header else None
    data = load_csv(args.data, schema, None, site_col)
    if model.has_site_terms() and args.site is None and site_col is None and not args.shared_only:
        raise UsageError("site-specific terms are selected: pass --site, a site column, or --shared-only")
    f = model.predict(data, site=args.site, shared_only=args.shared_only)
    p = model.loss.response(f)
    rows = [{"row": i + 1, "link": float(a), "response": float(b)} for i, (a, b) in enumerate(zip(f, p))]
    write_rows_csv(rows, args.out, ("row", "link", "response"))
    return 0


def cmd_effects(args) -> int:
    model = _load_model(args.model)
    write_rows_csv(export_partial_effects(model, args.resolution), args.out, EFFECT_COLUMNS)
    return 0


def cmd_importance(args) -> int:
    model = _load_model(args.model)
    imp = model.importance()
    counts = model.selection_counts()
    rows = [
        {"spec_id": k, "learner": model.specs[k].label, "selections": counts.get(k, 0), "importance": v}
        for k, v in sorted(imp.items(), key=lambda kv: (-kv[1], kv[0]))
    ]
    write_rows_csv(rows, args.out, ("spec_id", "learner", "selections", "importance"))
    return 0


def cmd_site_serve(args) -> int:
    cfg = FitConfig.load(args.config) if args.config else FitConfig()
    if args.heart_file:
        hs = heart_schema()
        raw = load_heart_file(args.heart_file, hs)
        data = clean_heart(raw, schema=hs)
    else:
        if not cfg.schema:
            raise UsageError("--data needs a config with a 'schema'")
        site_col = cfg.site_column if cfg.site_column in cfg.schema else None
        data = load_csv(args.data, cfg.schema, cfg.response, site_col)
    if data.site_column is not None:
        from .site import load_site_data

        data = load_site_data(data, args.site_id)
    level = args.privacy_level if args.privacy_level is not None else cfg.privacy_level
    node = SiteNode(SiteState(args.site_id, data, level))
    sock = listen(args.listen)
    print("site %d listening on %s:%d" % ((args.site_id,) + sock.getsockname()[:2]), flush=True)
    serve_site(node, sock)
    return node.state.abort_code


# ---------------------------------------------------------------------------
# Parsers
# ---------------------------------------------------------------------------


def _fit_options(p, data=True):
    p.add_argument("--config", help="run configuration JSON (see CONFIG.md)")
    if data:
        src = p.add_mutually_exclusive_group()
        src.add_argument("--data", help="CSV file described by the config schema")
        src.add_argument("--heart-dir", help="directory with the four processed heart-disease files")
        p.add_argument("--partition", choices=("by-site-tag", "random", "contiguous"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-iters", type=positive_int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--patience", type=positive_int)
    p.add_argument("--no-early-stop", action="store_true", help="run all iterations")
    p.add_argument("--seed", type=int)
    p.add_argument("--privacy-level", type=positive_int)
    p.add_argument("--ridge-jitter", type=float, help="added to every system diagonal before factorizing")
    p.add_argument("--loss", choices=("gaussian", "binomial"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcwb", description="Distributed component-wise boosting")
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-pooled", help="fit on pooled data (reference)")
    _fit_options(p)
    p.add_argument("--simulate", type=positive_int, metavar="S", help="number of sites for random/contiguous partitions")
    p.set_defaults(func=cmd_fit_pooled)

    p = sub.add_parser("fit-distributed", help="fit over simulated or remote sites")
    _fit_options(p)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--simulate", type=positive_int, metavar="S")
    mode.add_argument("--sites", help="comma separated host:port list of running site agents")
    p.add_argument("--carrier", choices=("simulated", "tcp"), default="simulated", help="tcp runs site servers on loopback")
    p.add_argument("--audit", action="store_true", help="disable early stopping and check the cost formulas")
    p.add_argument("--transcript", help="write every frame as one JSON line")
    p.set_defaults(func=cmd_fit_distributed)

    p = sub.add_parser("compare", help="compare two model files")
    p.add_argument("model_a")
    p.add_argument("model_b")
    p.add_argument("--rtol", type=float, default=1e-8)
    p.add_argument("--risk-tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("predict", help="predictions on a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--site", type=int)
    p.add_argument("--site-column", default="site")
    p.add_argument("--shared-only", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("effects", help="partial effects table")
    p.add_argument("--model", required=True)
    p.add_argument("--resolution", type=positive_int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_effects)

    p = sub.add_parser("importance", help="risk-reduction importance per learner")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)
    return ap


def _dispatch(ap, argv) -> int:
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DcwbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except AssertionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return _dispatch(build_parser(), argv)


def hostctl_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="hostctl", description="Coordinate a distributed fit over site agents")
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("fit")
    _fit_options(p, data=False)
    p.add_argument("--sites", required=True, help="comma separated host:port list")
    p.add_argument("--audit", action="store_true")
    p.add_argument("--transcript")
    p.set_defaults(func=cmd_host_fit)
    return _dispatch(ap, argv)


def sitectl_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sitectl", description="Serve one data site")
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--heart-file", help="one processed heart-disease file")
    p.add_argument("--config")
    p.add_argument("--site-id", type=positive_int, required=True)
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--privacy-level", type=positive_int)
    p.set_defaults(func=cmd_site_serve)
    return _dispatch(ap, argv)


if __name__ == "__main__":
    sys.exit(main())
