"""The two embedded case studies.

``case1``: a two-zone heating model with an unmodelled ambient state,
abstracted by its deterministic two-state mean dynamics.  The interface
cancels the one-step mean mismatch, so the output error after a step is
pure noise and the (ε, δ) trade-off is a Gaussian tail.

``case2``: a five-state office model reduced to two states.  The pipeline
runs reduce → interface → tradeoff → grid-dp → refine-simulate → verify;
every stage consumes and produces JSON-serializable dictionaries so that
the command line can persist and resume it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Optional

import numpy as np

from .linalg import markov_parameters
from .models import Box, GaussianLtiGmdp, model_from_dict, model_to_dict
from .reduction import balanced_truncation, prefeedback_gain
from .refine import RecoveryPolicy, simulate_refined_lti
from .safety import (GridValueFunction, balanced_counts, decorrelate, default_grid, grid_to_strategy,
                     lipschitz_constants, quantized_inputs, shrink_safe_set, value_iteration_safety,
                     expand_safe_set, Grid)
from .simrel import (BallRelation, CancellingInterface, LtiInterface, LtiPair, QuadraticRelation,
                     SimRelCertificate, case1_exact_cancel_tradeoff, certify_by_sampling,
                     default_relation_matrix, gamma_horizon, synthesize_interface,
                     reference_deltas, tradeoff_normbound, tradeoff_sprocedure)
from .strategy import FeedbackPolicy
from .validate import paired_difference_ci, wilson_interval

__all__ = [
    "load_case_data", "case1_models", "RegulationPolicy", "Case1Config", "run_case1",
    "Case2Config", "office_models", "stage_reduce", "stage_interface", "stage_tradeoff",
    "stage_grid_dp", "stage_refine_simulate", "stage_verify", "CASE2_STAGES",
    "certificate_from_artifacts",
]


def load_case_data(name: str) -> dict:
    """Embedded matrices of ``"case1"`` or ``"office"``."""
    if name not in ("case1", "office"):
        raise ValueError(f"unknown case {name!r}")
    with resources.files("apsim.data").joinpath(f"{name}.json").open() as fh:
        return json.load(fh)


# ------------------------------------------------------------------ case 1

def case1_models(data: Optional[dict] = None) -> tuple[GaussianLtiGmdp, GaussianLtiGmdp, dict]:
    d = load_case_data("case1") if data is None else data
    return model_from_dict(d["concrete"]), model_from_dict(d["abstract"]), d


class RegulationPolicy:
    """Proportional regulation of the abstract state toward a target point.

    ``u = sat(B⁻¹(x + κ(c − x) − A x))``: the abstract state moves a fraction
    ``κ`` of the remaining distance per step, with inputs clipped to the box.
    """

    def __init__(self, abstract: GaussianLtiGmdp, target_center, gain: float, input_box: Box):
        self.A = abstract.A
        self.Binv = np.linalg.inv(abstract.B)
        self.c = np.asarray(target_center, float)
        self.gain = float(gain)
        self.box = input_box

    def __call__(self, t: int, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, float)
        want = X + self.gain * (self.c - X) - X @ self.A.T
        return np.clip(want @ self.Binv.T, self.box.lo, self.box.hi)

    def strategy(self, horizon: int) -> FeedbackPolicy:
        return FeedbackPolicy(self, horizon)


@dataclass
class Case1Config:
    """Settings of the case-1 demo."""

    seed: int = 2017
    trials: int = 1000
    steps: int = 200
    epsilon: float = 0.16
    method: str = "isotropic"
    epsilon_grid: tuple = tuple(np.round(np.arange(1, 41) * 0.01, 10).tolist())


def run_case1(cfg: Case1Config = Case1Config()) -> dict:
    """Trade-off curve, refined closed loop and excursion statistics.

    Returns a dictionary with ``curve`` (the chosen method), ``curve_exact``,
    ``delta`` at ``cfg.epsilon``, per-trial excursion counts and one
    example trajectory.
    """
    concrete, abstract, d = case1_models()
    eps_grid = np.unique(np.append(np.asarray(cfg.epsilon_grid, float), cfg.epsilon))
    curve = case1_exact_cancel_tradeoff(concrete, abstract, eps_grid, method=cfg.method)
    exact = case1_exact_cancel_tradeoff(concrete, abstract, eps_grid, method="exact")
    delta = curve.delta_at(cfg.epsilon)
    delta_exact = exact.delta_at(cfg.epsilon)
    target = np.asarray(d["target"], float)
    policy = RegulationPolicy(abstract, target.mean(axis=1), d["gain"],
                              Box(np.asarray(d["input_box"])[:, 0], np.asarray(d["input_box"])[:, 1]))
    iface = CancellingInterface.for_pair(concrete, abstract, concrete.C)
    relation = BallRelation(cfg.epsilon, concrete.C)
    run = simulate_refined_lti(concrete, abstract, policy, relation, iface, cfg.steps, cfg.trials,
                               cfg.seed, RecoveryPolicy.reset())
    counts = run["exits"].astype(float)
    mean = float(counts.mean())
    se = float(counts.std(ddof=1) / math.sqrt(counts.size)) if counts.size > 1 else 0.0
    y2 = run["concrete_outputs"]
    in_target = np.all((y2 >= target[:, 0]) & (y2 <= target[:, 1]), axis=2)
    tail = max(1, cfg.steps // 4)
    return {
        "curve": curve, "curve_exact": exact, "epsilon": cfg.epsilon,
        "delta": delta, "delta_exact": delta_exact,
        "excursions": run["exits"], "excursion_mean": mean, "excursion_se": se,
        "excursion_bound": cfg.steps * delta,
        "exit_probability_bound": gamma_horizon(delta, cfg.steps, steps=True),
        "target_fraction_last_quarter": float(in_target[:, -tail:].mean()),
        "example": {"abstract_outputs": run["abstract_outputs"][0],
                    "concrete_outputs": run["concrete_outputs"][0],
                    "exit_steps": run["exit_steps"][0], "inputs": run["inputs"][0]},
        "config": asdict(cfg),
    }


# ------------------------------------------------------------------ case 2

@dataclass
class Case2Config:
    """Settings of the office pipeline.

    ``certificate_source="embedded"`` uses the embedded reduced model,
    interface gains and relation matrix; ``"synthesized"`` uses our own
    reduction, the Sylvester interface with an LQR gain and the Lyapunov
    relation matrix.  ``noise_dof=None`` means the noise dimension.
    """

    seed: int = 2017
    order: int = 2
    prefeedback_weight: float = 0.02
    certificate_source: str = "embedded"
    method: str = "sprocedure"
    noise_dof: Optional[int] = None
    delta: float = 0.01
    deltas: tuple = tuple(reference_deltas().tolist())
    c1: float = 0.04
    horizon: int = 6
    cells: int = 10000
    inputs: int = 21
    trials: int = 100000
    recovery: str = "reset"
    certify_samples: int = 100000
    synth_lambda: float = 1e-3
    synth_input_weight: float = 0.02
    concrete_model: Optional[str] = None
    reduced_model: Optional[str] = None

    def validate(self):
        if self.certificate_source not in ("embedded", "synthesized"):
            raise ValueError("certificate_source must be 'embedded' or 'synthesized'")
        if self.method not in ("sprocedure", "normbound"):
            raise ValueError("method must be 'sprocedure' or 'normbound'")
        if self.recovery not in ("reset", "hold"):
            raise ValueError("recovery must be 'reset' or 'hold'")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


def office_models(cfg: Case2Config, data: Optional[dict] = None) -> tuple[GaussianLtiGmdp, GaussianLtiGmdp]:
    """Concrete office model and the embedded reduced model (files override)."""
    from .models import load_model
    d = load_case_data("office") if data is None else data
    concrete = load_model(cfg.concrete_model) if cfg.concrete_model else model_from_dict(d["concrete"])
    reduced = load_model(cfg.reduced_model) if cfg.reduced_model else model_from_dict(d["reduced"])
    return concrete, reduced


def _stacked_markov_error(a: GaussianLtiGmdp, b: GaussianLtiGmdp, count: int = 6) -> float:
    Ma = markov_parameters(a.A, np.hstack([a.B, a.Bw]), a.C, count)
    Mb = markov_parameters(b.A, np.hstack([b.B, b.Bw]), b.C, count)
    return float(np.linalg.norm(Ma - Mb) / np.linalg.norm(Mb))


def stage_reduce(cfg: Case2Config) -> dict:
    """Pre-feedback gain and balanced truncation of the concrete model."""
    concrete, ref = office_models(cfg)
    F = prefeedback_gain(concrete, cfg.prefeedback_weight)
    red = balanced_truncation(concrete, cfg.order, prefeedback=F)
    embedded_F = np.asarray(load_case_data("office")["prefeedback_F"], float)
    return {"F": F.tolist(), "hankel_values": red.hankel_values.tolist(),
            "reduced": model_to_dict(red.model.with_(input_bound=cfg.c1)),
            "markov_relative_error": _stacked_markov_error(red.model, ref),
            "F_max_deviation_from_embedded": float(np.abs(np.abs(F) - np.abs(embedded_F)).max())}


def stage_interface(cfg: Case2Config, reduce_out: dict) -> dict:
    """Abstract model, interface gains and relation matrix."""
    concrete, ref = office_models(cfg)
    data = load_case_data("office")
    if cfg.certificate_source == "embedded":
        abstract = ref.with_(input_bound=cfg.c1)
        g = data["interface"]
        iface = LtiInterface(g["R"], g["Q"], g["K"], g["P"])
        M = np.asarray(data["M"], float)
    else:
        abstract = model_from_dict(reduce_out["reduced"])
        iface = synthesize_interface(concrete, abstract, lam=cfg.synth_lambda, r_u=cfg.synth_input_weight)
        M = default_relation_matrix(concrete.A, concrete.B, iface.K, concrete.C, cfg.synth_lambda)
    pair = LtiPair(concrete, abstract)
    res = pair.sylvester_residual(iface)
    return {"source": cfg.certificate_source, "abstract": model_to_dict(abstract),
            "R": iface.R.tolist(), "Q": iface.Q.tolist(), "K": iface.K.tolist(), "P": iface.P.tolist(),
            "M": M.tolist(), "sylvester_residual": list(res),
            "output_dominance_gap": QuadraticRelation(M, iface.P, 1.0).output_dominance_gap(concrete.C)}


def _iface_from(d: dict) -> LtiInterface:
    return LtiInterface(d["R"], d["Q"], d["K"], d["P"])


def stage_tradeoff(cfg: Case2Config, iface_out: dict) -> dict:
    """Trade-off curves and the certificate at ``cfg.delta``."""
    concrete, _ = office_models(cfg)
    abstract = model_from_dict(iface_out["abstract"])
    iface = _iface_from(iface_out)
    M = np.asarray(iface_out["M"], float)
    pair = LtiPair(concrete, abstract)
    deltas = np.unique(np.append(np.asarray(cfg.deltas, float), cfg.delta))
    nb = tradeoff_normbound(pair, iface, M, deltas, cfg.c1, cfg.noise_dof)
    sp = tradeoff_sprocedure(pair, iface, M, deltas, cfg.c1, cfg.noise_dof)
    chosen = sp if cfg.method == "sprocedure" else nb
    eps = chosen.epsilon_at(cfg.delta)
    cert = SimRelCertificate(QuadraticRelation(M, iface.P, eps), iface, cfg.delta, eps,
                             chosen.meta["dof"], cfg.c1, cfg.method, abstract, concrete)
    check = certify_by_sampling(cert, pair, iface, cfg.certify_samples, cfg.seed)
    cdict = cert.to_dict()
    cdict["provenance"] = f"{cfg.method}:{cfg.certificate_source}"
    return {"deltas": nb.deltas.tolist(), "normbound": nb.epsilons.tolist(),
            "sprocedure": sp.epsilons.tolist(), "sprocedure_source": sp.meta["source"],
            "dof": chosen.meta["dof"], "certificate": cdict,
            "epsilon_normbound": nb.epsilon_at(cfg.delta), "epsilon_sprocedure": sp.epsilon_at(cfg.delta),
            "certify": {"ok": check.ok, "max_ratio": check.max_ratio, "samples": check.samples}}


def certificate_from_artifacts(cfg: Case2Config, iface_out: dict, trade_out: dict) -> SimRelCertificate:
    concrete, _ = office_models(cfg)
    abstract = model_from_dict(iface_out["abstract"])
    return SimRelCertificate.from_dict(trade_out["certificate"], abstract, concrete)


def stage_grid_dp(cfg: Case2Config, iface_out: dict, trade_out: dict) -> dict:
    """Safety value iteration on the abstract model for the shrunk safe set."""
    abstract = model_from_dict(iface_out["abstract"])
    eps = float(trade_out["certificate"]["epsilon"])
    data = load_case_data("office")
    safe = Box([data["safe"][0]], [data["safe"][1]])
    shrunk = shrink_safe_set(safe, eps)
    if shrunk.empty:
        raise ValueError(f"safe set is empty after shrinking by epsilon = {eps:.4f}")
    tr = decorrelate(abstract)
    g0 = default_grid(abstract, shrunk, 1, c1=cfg.c1, transform=tr)
    H = lipschitz_constants(tr.model(abstract))
    grid = Grid(g0.lo, g0.hi, balanced_counts(H, g0.lo, g0.hi, cfg.cells))
    inputs = quantized_inputs(cfg.c1, abstract.m, cfg.inputs)
    vf = value_iteration_safety(abstract, grid, shrunk, inputs, cfg.horizon, transform=tr)
    out = vf.to_dict()
    out["V0_at_origin"] = float(vf.value_at(np.zeros(abstract.n)))
    out["shrunk_safe"] = [float(shrunk.lo[0]), float(shrunk.hi[0])]
    return out


def _abstract_mc(abstract: GaussianLtiGmdp, vf: GridValueFunction, cfg: Case2Config) -> dict:
    st = grid_to_strategy(vf)
    run = st.simulate_batch(abstract, cfg.horizon, cfg.trials, cfg.seed)
    return run


def stage_refine_simulate(cfg: Case2Config, iface_out: dict, trade_out: dict, dp_out: dict) -> dict:
    """Refined closed loop on the concrete model (vectorized Monte Carlo)."""
    concrete, _ = office_models(cfg)
    cert = certificate_from_artifacts(cfg, iface_out, trade_out)
    vf = GridValueFunction.from_dict(dp_out)
    st = grid_to_strategy(vf)
    rec = RecoveryPolicy.reset() if cfg.recovery == "reset" else RecoveryPolicy.hold()
    run = simulate_refined_lti(concrete, cert.abstract, st.actions_batch, cert.relation, cert.interface,
                               cfg.horizon, cfg.trials, cfg.seed, rec)
    safe = Box([-0.5], [0.5])
    y = run["concrete_outputs"]
    ok = np.all(safe.contains(y), axis=1)
    ok_mod = np.all(Box([dp_out["shrunk_safe"][0]], [dp_out["shrunk_safe"][1]]).contains(y), axis=1)
    return {"safe": ok.astype(int).tolist(), "safe_modified": ok_mod.astype(int).tolist(),
            "exits": run["exits"].astype(int).tolist(), "first_exit": run["first_exit"].astype(int).tolist(),
            "exit_any_fraction": float(np.mean(run["exits"] > 0)),
            "safe_fraction": float(ok.mean()), "safe_modified_fraction": float(ok_mod.mean())}


def stage_verify(cfg: Case2Config, iface_out: dict, trade_out: dict, dp_out: dict, sim_out: dict) -> dict:
    """Sandwich report: abstract Monte Carlo against the refined concrete run.

    The abstract model is simulated with the same seed, hence the same
    noise sequences (common random numbers).  With a point-mass initial
    coupling inside the relation only the ``N`` transitions contribute to
    ``γ = 1 − (1 − δ)^N``.
    """
    cert = certificate_from_artifacts(cfg, iface_out, trade_out)
    vf = GridValueFunction.from_dict(dp_out)
    eps = cert.epsilon
    run = _abstract_mc(cert.abstract, vf, cfg)
    y1 = run["outputs"]
    base = Box([-0.5], [0.5])
    a_minus = np.all(shrink_safe_set(base, eps).contains(y1), axis=1)
    a_plus = np.all(expand_safe_set(base, eps).contains(y1), axis=1)
    conc = np.asarray(sim_out["safe"], bool)
    gamma = gamma_horizon(cfg.delta, cfg.horizon, steps=True)
    n = conc.size
    d_lo, h_lo = paired_difference_ci(conc, a_minus)
    d_hi, h_hi = paired_difference_ci(a_plus, conc)
    lower_ok = d_lo >= -gamma - h_lo
    upper_ok = d_hi >= -gamma - h_hi
    V0 = float(dp_out["V0_at_origin"])
    E = float(dp_out["error_bound"])
    return {"abstract_modified_fraction": float(a_minus.mean()),
            "abstract_modified_interval": list(wilson_interval(int(a_minus.sum()), n)),
            "abstract_expanded_fraction": float(a_plus.mean()),
            "concrete_fraction": float(conc.mean()),
            "concrete_interval": list(wilson_interval(int(conc.sum()), n)),
            "concrete_modified_fraction": float(np.mean(sim_out["safe_modified"])),
            "gamma": gamma, "lower_halfwidth": h_lo, "upper_halfwidth": h_hi,
            "lower_ok": bool(lower_ok), "upper_ok": bool(upper_ok),
            "V0": V0, "E": E, "guaranteed_abstract": V0 - E, "guaranteed_concrete": V0 - E - gamma,
            "exit_fraction": sim_out["exit_any_fraction"], "trials": n,
            "sandwich": "PASS" if (lower_ok and upper_ok) else "FAIL"}


CASE2_STAGES = ("reduce", "interface", "tradeoff", "grid-dp", "refine-simulate", "verify")

# configuration fields read by each stage (upstream results chain the rest)
STAGE_FIELDS = {
    "reduce": ("order", "prefeedback_weight", "c1", "concrete_model", "reduced_model"),
    "interface": ("certificate_source", "synth_lambda", "synth_input_weight", "c1",
                  "concrete_model", "reduced_model"),
    "tradeoff": ("method", "noise_dof", "delta", "deltas", "c1", "certify_samples", "seed",
                 "concrete_model"),
    "grid-dp": ("cells", "inputs", "horizon", "c1"),
    "refine-simulate": ("trials", "seed", "recovery", "horizon", "concrete_model"),
    "verify": ("trials", "seed", "horizon", "delta"),
}
