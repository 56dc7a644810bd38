"""Command-line interface.

Exit codes: 0 success, 1 a checked property was violated, 2 usage or
input/output error.  Every CSV starts with provenance comment lines
(``#tool-version``, ``#seed``, ``#config-hash``) followed by a header row.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import __version__
from .linalg import TOLERANCE_PROFILES

log = logging.getLogger("apsim")


class UsageError(Exception):
    """Bad arguments or unreadable inputs (exit code 2)."""


class PropertyViolation(Exception):
    """A checked property failed (exit code 1)."""


# ----------------------------------------------------------------- output

def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n"


class Output:
    """Writes artifacts into the output directory with provenance."""

    def __init__(self, out_dir: Path, seed: int, cfg_hash: str):
        self.dir = Path(out_dir)
        self.seed = seed
        self.cfg_hash = cfg_hash
        self.written: list[Path] = []

    def provenance(self) -> dict:
        return {"tool-version": __version__, "seed": self.seed, "config-hash": self.cfg_hash}

    def path(self, name: str) -> Path:
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {self.dir}: {exc}") from exc
        return self.dir / name

    def csv(self, name: str, header: Sequence[str], rows) -> Path:
        buf = io.StringIO()
        prov = self.provenance()
        for k in sorted(prov):
            buf.write(f"#{k}={prov[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(header))
        for r in rows:
            w.writerow([_cell(v) for v in r])
        return self.text(name, buf.getvalue())

    def text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        self.written.append(p)
        return p

    def json(self, name: str, obj) -> Path:
        return self.text(name, dumps(obj))


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_, bool)):
        return int(bool(v))
    return v


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _load_model(path):
    from .models import model_from_dict, validate_model
    d = _read_json(path)
    try:
        m = model_from_dict(d)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid model file {path}: {exc}") from exc
    diags = validate_model(m)
    if diags:
        raise UsageError(f"invalid model file {path}: " + "; ".join(diags))
    return m


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--{name}: expected comma-separated numbers, got {text!r}") from exc


def _matrix(text: str, name: str) -> np.ndarray:
    rows = [_floats(r, name) for r in text.split(";")]
    if len({len(r) for r in rows}) != 1:
        raise UsageError(f"--{name}: rows differ in length")
    return np.array(rows)


# --------------------------------------------------------------- commands

def cmd_lift_min_delta(args, out: Output) -> int:
    from .coupling import min_delta_lifting
    if args.input:
        d = _read_json(args.input)
        Delta, Theta, R = d["Delta"], d["Theta"], d["R"]
    else:
        if not (args.nu and args.theta and args.relation):
            raise UsageError("give --input FILE or all of --nu, --theta, --relation")
        Delta, Theta, R = _floats(args.nu, "nu"), _floats(args.theta, "theta"), _matrix(args.relation, "relation")
    try:
        cm = min_delta_lifting(Delta, Theta, np.asarray(R) > 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    n1, n2 = cm.W.shape
    out.csv("lifting.csv", ["i", "j", "mass", "related"],
            [(i, j, cm.W[i, j], cm.relation[i, j]) for i in range(n1) for j in range(n2)])
    out.json("lifting.json", {"delta": cm.delta, "W": cm.W})
    print(f"delta={cm.delta!r}")
    return 0


def cmd_reduce(args, out: Output) -> int:
    from .models import model_to_dict
    from .reduction import balanced_truncation, prefeedback_gain
    model = _load_model(args.model)
    F = None
    if args.prefeedback == "auto":
        F = prefeedback_gain(model, args.input_weight)
    red = balanced_truncation(model, args.order, prefeedback=F, method=args.method, tol=args.tol)
    out.json("reduced.json", model_to_dict(red.model))
    out.csv("hankel.csv", ["index", "hankel_value"], enumerate(red.hankel_values))
    out.json("reduce_meta.json", {"F": F, "source": red.source, "T": red.T, "Ti": red.Ti,
                                  "hankel_values": red.hankel_values})
    print(f"order={args.order} hankel={red.hankel_values.tolist()}")
    return 0


def cmd_interface(args, out: Output) -> int:
    from .simrel import LtiPair, default_relation_matrix, synthesize_interface
    c, a = _load_model(args.concrete), _load_model(args.abstract)
    K = _floats(args.K, "K") if args.K else None
    iface = synthesize_interface(c, a, k_gain=K, lam=args.lam, r_u=args.input_weight, tol=args.tol)
    M = default_relation_matrix(c.A, c.B, iface.K, c.C, args.lam)
    res = LtiPair(c, a).sylvester_residual(iface)
    out.json("interface.json", {"R": iface.R, "Q": iface.Q, "K": iface.K, "P": iface.P, "M": M,
                                "sylvester_residual": res})
    print(f"sylvester_residual={res}")
    return 0


def _interface_file(path):
    from .simrel import LtiInterface
    d = _read_json(path)
    try:
        return LtiInterface(d["R"], d["Q"], d["K"], d["P"]), np.asarray(d["M"], float)
    except KeyError as exc:
        raise UsageError(f"interface file {path} lacks {exc}") from exc


def cmd_tradeoff(args, out: Output) -> int:
    from .simrel import (LtiPair, QuadraticRelation, SimRelCertificate, reference_deltas,
                         tradeoff_normbound, tradeoff_sprocedure)
    from .models import model_to_dict
    c, a = _load_model(args.concrete), _load_model(args.abstract)
    iface, M = _interface_file(args.interface)
    deltas = np.asarray(_floats(args.deltas, "deltas")) if args.deltas else reference_deltas()
    pair = LtiPair(c, a)
    fn = tradeoff_sprocedure if args.method == "sproc" else tradeoff_normbound
    curve = fn(pair, iface, M, deltas, args.c1, args.dof)
    out.text("tradeoff.csv", curve.to_csv(out.provenance()))
    if args.certificate_delta is not None:
        eps = curve.epsilon_at(args.certificate_delta)
        cert = SimRelCertificate(QuadraticRelation(M, iface.P, eps), iface, args.certificate_delta, eps,
                                 curve.meta["dof"], args.c1, curve.method)
        out.json("certificate.json", {"certificate": cert.to_dict(), "abstract": model_to_dict(a),
                                      "concrete": model_to_dict(c)})
    for d, e in zip(curve.deltas, curve.epsilons):
        print(f"delta={d:.6g} epsilon={e:.6g}")
    return 0


def _certificate_file(path):
    from .models import model_from_dict
    from .simrel import SimRelCertificate
    d = _read_json(path)
    try:
        a, c = model_from_dict(d["abstract"]), model_from_dict(d["concrete"])
        return SimRelCertificate.from_dict(d["certificate"], a, c)
    except KeyError as exc:
        raise UsageError(f"certificate file {path} lacks {exc}") from exc


def cmd_certify(args, out: Output) -> int:
    from .simrel import LtiPair, certify_by_sampling
    cert = _certificate_file(args.certificate)
    res = certify_by_sampling(cert, LtiPair(cert.concrete, cert.abstract), cert.interface,
                              args.samples, args.seed)
    out.json("certify.json", {"ok": res.ok, "max_ratio": res.max_ratio, "samples": res.samples,
                              "counterexample": res.counterexample})
    print(f"ok={res.ok} max_ratio={res.max_ratio:.6g} samples={res.samples}")
    return 0 if res.ok else 1


def cmd_grid_dp(args, out: Output) -> int:
    from .models import Box
    from .safety import (Grid, balanced_counts, decorrelate, default_grid, lipschitz_constants,
                         quantized_inputs, value_iteration_safety)
    model = _load_model(args.model)
    lo, hi = _floats(args.safe, "safe")
    safe = Box([lo], [hi])
    if args.epsilon:
        safe = safe.shrink(args.epsilon)
    if safe.empty:
        raise UsageError("safe set is empty")
    tr = decorrelate(model)
    c1 = args.c1 if args.c1 is not None else model.input_bound
    if c1 is None:
        raise UsageError("the model has no input bound; pass --c1")
    g0 = default_grid(model, safe, 1, c1=c1, transform=tr)
    if args.delta_cells:
        grid = Grid.from_widths(g0.lo, g0.hi, _floats(args.delta_cells, "delta-cells"))
    else:
        H = lipschitz_constants(tr.model(model))
        grid = Grid(g0.lo, g0.hi, balanced_counts(H, g0.lo, g0.hi, args.cells))
    vf = value_iteration_safety(model, grid, safe, quantized_inputs(c1, model.m, args.inputs),
                                args.horizon, transform=tr)
    out.text("value_function.csv", vf.to_csv(0, out.provenance()))
    out.text("policy.csv", vf.policy_csv(out.provenance()))
    out.json("value_function.json", vf.to_dict())
    v0 = float(vf.value_at(model.x0))
    print(f"V0={v0:.6f} E={vf.error_bound:.6f} cells={grid.n_cells}")
    return 0


def cmd_refine_simulate(args, out: Output) -> int:
    from .refine import RecoveryPolicy, simulate_refined_lti
    from .safety import GridValueFunction, grid_to_strategy
    cert = _certificate_file(args.certificate)
    vf = GridValueFunction.from_dict(_read_json(args.value_function))
    horizon = args.horizon if args.horizon is not None else vf.horizon
    if horizon > vf.horizon:
        raise UsageError(f"strategy too short: horizon {horizon} > {vf.horizon}")
    rec = RecoveryPolicy.reset() if args.recovery == "reset" else RecoveryPolicy.hold()
    st = grid_to_strategy(vf)
    run = simulate_refined_lti(cert.concrete, cert.abstract, st.actions_batch, cert.relation,
                               cert.interface, horizon, args.trials, args.seed, rec)
    lo, hi = _floats(args.safe, "safe")
    y = run["concrete_outputs"][..., 0]
    safe = np.all((y >= lo) & (y <= hi), axis=1)
    out.csv("refine_trials.csv", ["trial", "safe", "exits", "first_exit"],
            zip(range(args.trials), safe, run["exits"], run["first_exit"]))
    print(f"safe_fraction={safe.mean():.6f} exit_fraction={np.mean(run['exits'] > 0):.6f}")
    return 0


def cmd_verify(args, out: Output) -> int:
    from .validate import sandwich_suite
    if not args.sandwich:
        raise UsageError("verify needs --sandwich")
    res = sandwich_suite(args.instances, args.seed)
    out.csv("sandwich_suite.csv", ["instance", "exact", "n1", "n2", "horizon", "delta", "gamma", "tv", "pass"],
            [(r.index, r.exact, r.n1, r.n2, r.horizon, r.delta, r.gamma, r.tv, r.passed) for r in res])
    failed = [r.index for r in res if not r.passed]
    print(f"instances={len(res)} passed={len(res) - len(failed)} failed={len(failed)}")
    return 1 if failed else 0


def cmd_demo(args, out: Output) -> int:
    if args.id == "case1":
        return _demo_case1(args, out)
    from .cases import Case2Config
    cfg = Case2Config(seed=args.seed, trials=args.trials or Case2Config.trials)
    return _run_pipeline(cfg, out, resume=False)


def _demo_case1(args, out: Output) -> int:
    from .cases import Case1Config, run_case1
    cfg = Case1Config(seed=args.seed, trials=args.trials or Case1Config.trials)
    r = run_case1(cfg)
    ex = r["curve_exact"]
    out.csv("tradeoff.csv", ["epsilon", "delta", "delta_exact"],
            zip(r["curve"].epsilons, r["curve"].deltas, ex.deltas))
    out.csv("excursions.csv", ["trial", "excursions"], enumerate(r["excursions"]))
    e = r["example"]
    n = e["concrete_outputs"].shape[0]
    out.csv("trace.csv", ["t", "y_abstract_1", "y_abstract_2", "y_1", "y_2", "u_1", "u_2", "excursion"],
            [(t, *e["abstract_outputs"][t], *e["concrete_outputs"][t],
              *(e["inputs"][t] if t < n - 1 else ("", "")), e["exit_steps"][t]) for t in range(n)])
    summary = {k: r[k] for k in ("epsilon", "delta", "delta_exact", "excursion_mean", "excursion_se",
                                 "excursion_bound", "exit_probability_bound",
                                 "target_fraction_last_quarter")}
    summary["trials"] = cfg.trials
    summary["steps"] = cfg.steps
    ok = summary["excursion_mean"] <= summary["excursion_bound"] + 3 * summary["excursion_se"]
    summary["excursion_check"] = "PASS" if ok else "FAIL"
    out.json("summary.json", summary)
    print(f"epsilon={r['epsilon']} delta={r['delta']:.6f} (exact tail {r['delta_exact']:.6f}) "
          f"mean excursions={r['excursion_mean']:.3f} bound={r['excursion_bound']:.3f} {summary['excursion_check']}")
    return 0 if ok else 1


# ---------------------------------------------------------------- pipeline

def _model_digest(path, embedded: str) -> str:
    """Digest of the canonical model content.

    A file holding the embedded model hashes like the embedded default, so
    configurations are identified by what they compute with.
    """
    from .cases import load_case_data
    from .models import load_model, model_from_dict, model_to_dict
    model = load_model(path) if path else model_from_dict(load_case_data("office")[embedded])
    return hashlib.sha256(dumps(model_to_dict(model)).encode()).hexdigest()


def _identity_blob(cfg) -> dict:
    blob = dataclasses.asdict(cfg)
    blob["concrete_model"] = _model_digest(cfg.concrete_model, "concrete")
    blob["reduced_model"] = _model_digest(cfg.reduced_model, "reduced")
    return blob


def _stage_checksum(name: str, cfg_blob: dict, upstream: list[str]) -> str:
    """Hash of the stage's configuration subset and its upstream checksums.

    Model fields enter through their content digest (see :func:`_identity_blob`).
    """
    from .cases import STAGE_FIELDS
    sub = {f: cfg_blob[f] for f in STAGE_FIELDS[name]}
    return hashlib.sha256(dumps({"stage": name, "config": sub, "upstream": upstream,
                                 "version": __version__}).encode()).hexdigest()


def _run_pipeline(cfg, out: Output, resume: bool = True) -> int:
    from . import cases
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for p in (cfg.concrete_model, cfg.reduced_model):
        if p and not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    blob = _identity_blob(cfg)
    out.cfg_hash = config_hash(blob)
    out.seed = cfg.seed
    stages: list[tuple[str, Callable, tuple]] = [
        ("reduce", cases.stage_reduce, ()),
        ("interface", cases.stage_interface, ("reduce",)),
        ("tradeoff", cases.stage_tradeoff, ("interface",)),
        ("grid-dp", cases.stage_grid_dp, ("interface", "tradeoff")),
        ("refine-simulate", cases.stage_refine_simulate, ("interface", "tradeoff", "grid-dp")),
        ("verify", cases.stage_verify, ("interface", "tradeoff", "grid-dp", "refine-simulate")),
    ]
    results: dict = {}
    sums: dict = {}
    for name, fn, deps in stages:
        chk = _stage_checksum(name, blob, [sums[d] for d in deps])
        path = out.path(f"stage_{name}.json")
        if resume and path.is_file():
            try:
                stored = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError):
                stored = {}
            if stored.get("checksum") == chk:
                log.info("stage %s: checksum match, skipping", name)
                results[name], sums[name] = stored["result"], chk
                continue
        log.info("stage %s: running", name)
        try:
            res = fn(cfg, *[results[d] for d in deps])
        except Exception as exc:  # report the stage and stop
            raise StageFailure(name, exc) from exc
        res = json.loads(dumps(res))
        out.json(path.name, {"stage": name, "checksum": chk, "result": res})
        results[name], sums[name] = res, chk
    _case2_reports(results, out, cfg)
    verdict = results["verify"]["sandwich"]
    v = results["verify"]
    print(f"epsilon={results['tradeoff']['certificate']['epsilon']:.6f} delta={cfg.delta} "
          f"V0={v['V0']:.4f} E={v['E']:.4f} abstract(A-eps)={v['abstract_modified_fraction']:.4f} "
          f"concrete(A)={v['concrete_fraction']:.4f} gamma={v['gamma']:.6f} sandwich={verdict}")
    return 0 if verdict == "PASS" else 1


class StageFailure(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage} failed: {type(exc).__name__}: {exc}")
        self.stage = stage


def _case2_reports(results: dict, out: Output, cfg):
    from .cases import office_models
    from .models import model_to_dict
    t = results["tradeoff"]
    out.csv("tradeoff.csv", ["delta", "epsilon_normbound", "epsilon_sprocedure", "sprocedure_source"],
            zip(t["deltas"], t["normbound"], t["sprocedure"], t["sprocedure_source"]))
    out.json("certificate.json", {"certificate": t["certificate"],
                                  "abstract": results["interface"]["abstract"],
                                  "concrete": model_to_dict(office_models(cfg)[0])})
    from .safety import GridValueFunction
    vf = GridValueFunction.from_dict(results["grid-dp"])
    out.text("value_function.csv", vf.to_csv(0, out.provenance()))
    out.text("policy.csv", vf.policy_csv(out.provenance()))
    out.json("value_function.json", results["grid-dp"])
    s = results["refine-simulate"]
    out.csv("refine_trials.csv", ["trial", "safe", "safe_modified", "exits", "first_exit"],
            zip(range(len(s["safe"])), s["safe"], s["safe_modified"], s["exits"], s["first_exit"]))
    v = results["verify"]
    out.csv("sandwich.csv", ["quantity", "value"], sorted(v.items()))


def cmd_pipeline(args, out: Output) -> int:
    from .cases import Case2Config
    d = _read_json(args.config) if args.config else {}
    known = {f.name for f in dataclasses.fields(Case2Config)}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if "deltas" in d:
        d["deltas"] = tuple(d["deltas"])
    d.setdefault("seed", args.seed)
    cfg = Case2Config(**d)
    return _run_pipeline(cfg, out, resume=not args.no_resume)


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apsim", description="Approximate probabilistic simulation toolkit")
    p.add_argument("--seed", type=int, default=2017, help="master seed (default 2017)")
    p.add_argument("--out-dir", default="out", help="directory for artifacts (default ./out)")
    p.add_argument("--threads", type=int, default=None, help="worker threads for linear algebra")
    p.add_argument("--tolerance-profile", choices=sorted(TOLERANCE_PROFILES), default="default")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("lift-min-delta", help="minimum-delta lifting of two finite distributions")
    s.add_argument("--input", help="JSON with Delta, Theta, R")
    s.add_argument("--nu", help="left distribution, comma separated")
    s.add_argument("--theta", help="right distribution, comma separated")
    s.add_argument("--relation", help="0/1 matrix, rows separated by ';'")
    s.set_defaults(func=cmd_lift_min_delta)

    s = sub.add_parser("reduce", help="balanced truncation of a linear model")
    s.add_argument("--model", required=True)
    s.add_argument("--order", type=int, required=True)
    s.add_argument("--prefeedback", choices=("auto", "none"), default="auto")
    s.add_argument("--input-weight", type=float, default=0.02)
    s.add_argument("--method", choices=("truncate", "matchdc"), default="truncate")
    s.set_defaults(func=cmd_reduce)

    s = sub.add_parser("interface", help="interface gains and relation matrix for a linear pair")
    s.add_argument("--concrete", required=True)
    s.add_argument("--abstract", required=True)
    s.add_argument("--K", help="feedback gain, comma separated (default: LQR)")
    s.add_argument("--lam", type=float, default=1e-3)
    s.add_argument("--input-weight", type=float, default=0.02)
    s.set_defaults(func=cmd_interface)

    s = sub.add_parser("tradeoff", help="epsilon-delta trade-off curve")
    s.add_argument("--concrete", required=True)
    s.add_argument("--abstract", required=True)
    s.add_argument("--interface", required=True, help="JSON with R, Q, K, P, M")
    s.add_argument("--method", choices=("normbound", "sproc"), default="sproc")
    s.add_argument("--deltas", help="comma separated (default: ten log-spaced values)")
    s.add_argument("--c1", type=float, default=0.04)
    s.add_argument("--dof", type=int, default=None, help="chi-square degrees of freedom (default: noise dim)")
    s.add_argument("--certificate-delta", type=float, default=None)
    s.set_defaults(func=cmd_tradeoff)

    s = sub.add_parser("certify", help="sample the relation boundary for counterexamples")
    s.add_argument("--certificate", required=True)
    s.add_argument("--samples", type=int, default=1_000_000)
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("grid-dp", help="grid safety value iteration")
    s.add_argument("--model", required=True)
    s.add_argument("--horizon", type=int, default=6)
    s.add_argument("--delta-cells", help="cell widths per axis in decorrelated coordinates")
    s.add_argument("--cells", type=int, default=10000, help="cell budget when widths are not given")
    s.add_argument("--inputs", type=int, default=21)
    s.add_argument("--safe", default="-0.5,0.5")
    s.add_argument("--epsilon", type=float, default=0.0, help="shrink the safe set by epsilon")
    s.add_argument("--c1", type=float, default=None)
    s.set_defaults(func=cmd_grid_dp)

    s = sub.add_parser("refine-simulate", help="Monte Carlo of a refined strategy")
    s.add_argument("--certificate", required=True)
    s.add_argument("--value-function", required=True)
    s.add_argument("--trials", type=int, default=100000)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--recovery", choices=("reset", "hold"), default="reset")
    s.add_argument("--safe", default="-0.5,0.5")
    s.set_defaults(func=cmd_refine_simulate)

    s = sub.add_parser("verify", help="exact sandwich checks on random finite pairs")
    s.add_argument("--sandwich", "--paper-sandwich", dest="sandwich", action="store_true",
                   help="run the random finite-pair sandwich suite")
    s.add_argument("--instances", type=int, default=500)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("demo", help="embedded case studies")
    s.add_argument("id", choices=("case1", "case2"))
    s.add_argument("--trials", type=int, default=None)
    s.set_defaults(func=cmd_demo)

    s = sub.add_parser("pipeline", help="reduce, interface, tradeoff, grid-dp, refine-simulate, verify")
    s.add_argument("--config", help="JSON with case-2 configuration fields")
    s.add_argument("--no-resume", action="store_true")
    s.set_defaults(func=cmd_pipeline)
    return p


def _set_threads(n: Optional[int]):
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl not installed; --threads ignored")
        return
    threadpool_limits(n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    args.tol = TOLERANCE_PROFILES[args.tolerance_profile]
    _set_threads(args.threads)
    blob = {k: v for k, v in vars(args).items() if k not in ("func", "out_dir", "tol", "verbose", "threads")}
    sub = args.id if args.command == "demo" else None
    out_dir = Path(args.out_dir) / sub if sub else Path(args.out_dir)
    out = Output(out_dir, args.seed, config_hash(blob))
    try:
        return args.func(args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PropertyViolation as exc:
        print(f"violation: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
