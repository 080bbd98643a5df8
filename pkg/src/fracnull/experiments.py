"""Declarative experiment runner: config -> scenario pipeline -> CSV/JSON outputs + manifest.

Config files are YAML (JSON is accepted, being a subset).  Schema, version 1::

    schema_version: 1            # optional, must be 1
    scenario: criterion | simulate | control | moment | density | strongfeller
    name: free text              # optional
    model:                       # not used by ``moment``
      preset: heat | order_2m    # with n_modes (and m, d for order_2m)
      # or explicit sequences: lists, or {form, c, p} generators (see below)
      alphas: [..] | {form: power, c: 9.8696, p: 2}
      lambdas: [..] | {form: power|alpha_power|exp_alpha, c: 1.0, p: ..}
      n_modes: 32
    beta: 0.75
    T: 1.0
    n_steps: 256
    n_paths: 1000
    seed: 0
    x: [..] | {form: power, c: 1.0, p: -0.6}   # initial state, default ones

Generators give the n-th entry (n = 1, 2, ...): ``power``: ``c n^p``;
``alpha_power``: ``c alpha_n^p``; ``exp_alpha``: ``c exp(p alpha_n T)``.

Scenario knobs: ``control`` takes ``control: explicit`` (default) or
``{form: power, p: -0.4}`` (a scalar control ``t^p``), and ``levels``;
``moment`` takes ``exponents``, ``targets``, ``n_trunc``, ``ridge``;
``density`` takes ``f`` (zero, sin, -arctan) and ``transfer`` (bool);
``strongfeller`` takes ``f``, ``direction``, ``levels``.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .control import ControlFunction, MomentProblem, explicit_control, hstar_norm, moment_solve, verify_steering
from .errors import InvalidInputError
from .girsanov import densities, densities_to_csv, nemytskii, strong_feller_probe, transfer_check
from .grid import Grid
from .spectral import (
    build_model,
    covariance_qn,
    empirical_covariance,
    equivalence_report,
    heat_dirichlet,
    order_2m,
    simulate_ou,
)

SCHEMA_VERSION = 1
SCENARIOS = ("criterion", "simulate", "control", "moment", "density", "strongfeller")
MANIFEST_NAME = "manifest.json"


class ConfigError(InvalidInputError):
    """Schema violation; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def scenario(self) -> str:
        return self.raw["scenario"]

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))


# ---------------------------------------------------------------------------
# loading and validation


def load_config(path) -> ExperimentConfig:
    """Read a YAML/JSON config file, or a shipped scenario by name."""
    p = Path(path)
    if not p.exists():
        shipped = _scenario_files().get(str(path))
        if shipped is None:
            raise ConfigError("<file>", f"no such file or scenario: {path}")
        text = shipped.read_text()
    else:
        text = p.read_text()
    try:
        raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError("<file>", f"not valid YAML/JSON ({exc})") from exc
    return validate_config(raw)


def _number(raw, key, lo=None, hi=None, integer=False, required=True, default=None, open_lo=False, prefix=""):
    label = prefix + key
    if key not in raw:
        if required:
            raise ConfigError(label, "missing required field")
        return default
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(label, f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(label, f"expected an integer, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(label, "must be finite")
    if lo is not None and (v < lo or (open_lo and v == lo)):
        raise ConfigError(label, f"must be {'>' if open_lo else '>='} {lo}")
    if hi is not None and v > hi:
        raise ConfigError(label, f"must be <= {hi}")
    return int(v) if integer else float(v)


def _sequence(spec, field, n, alphas=None, T=1.0):
    if isinstance(spec, list):
        arr = np.asarray(spec, dtype=float)
        if arr.size != n:
            raise ConfigError(field, f"has {arr.size} entries, expected {n}")
        return arr
    if not isinstance(spec, dict) or "form" not in spec:
        raise ConfigError(field, "expected a list or a {form, c, p} generator")
    form = spec["form"]
    c = float(spec.get("c", 1.0))
    p = float(spec.get("p", 0.0))
    k = np.arange(1, n + 1, dtype=float)
    if form == "power":
        return c * k**p
    if alphas is None and form in ("alpha_power", "exp_alpha"):
        raise ConfigError(field, f"form {form!r} needs alphas")
    if form == "alpha_power":
        return c * alphas**p
    if form == "exp_alpha":
        return c * np.exp(p * alphas * T)
    raise ConfigError(f"{field}.form", f"unknown form {form!r}")


def validate_config(raw) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {raw['schema_version']!r}")
    sc = raw.get("scenario")
    if sc is None:
        raise ConfigError("scenario", "missing required field")
    if sc not in SCENARIOS:
        raise ConfigError("scenario", f"unknown scenario {sc!r}; known: {', '.join(SCENARIOS)}")
    _number(raw, "beta", 0.0, 1.0, open_lo=True)
    if raw["beta"] >= 1:
        raise ConfigError("beta", "must be < 1")
    _number(raw, "T", 0.0, required=False, open_lo=True)
    _number(raw, "n_steps", 8, 2**16, integer=True, required=False)
    _number(raw, "n_paths", 1, 10**7, integer=True, required=False)
    _number(raw, "seed", 0, 2**63 - 1, integer=True, required=False)
    if sc != "moment":
        m = raw.get("model")
        if not isinstance(m, dict):
            raise ConfigError("model", "missing or not a mapping")
        if "preset" in m:
            if m["preset"] not in ("heat", "order_2m"):
                raise ConfigError("model.preset", f"unknown preset {m['preset']!r}")
        elif not ("alphas" in m and "lambdas" in m):
            raise ConfigError("model", "give a preset or both alphas and lambdas")
        _number(m, "n_modes", 1, 4096, integer=True,
                required="preset" in m or not isinstance(m.get("alphas"), list), prefix="model.")
    else:
        for key in ("exponents", "targets"):
            if key not in raw:
                raise ConfigError(key, "missing required field")
        _number(raw, "n_trunc", 1, integer=True)
        if raw.get("ridge") is not None:
            _number(raw, "ridge", 0.0)
    return ExperimentConfig(raw)


def make_model(cfg: ExperimentConfig):
    raw = cfg.raw
    m = raw["model"]
    beta, T = raw["beta"], float(raw.get("T", 1.0))
    if m.get("preset") == "heat":
        return heat_dirichlet(int(m["n_modes"]), beta, T)
    if m.get("preset") == "order_2m":
        return order_2m(int(m["n_modes"]), int(m.get("m", 1)), beta, T, int(m.get("d", 1)))
    n = int(m["n_modes"]) if "n_modes" in m else len(m["alphas"])
    alphas = _sequence(m["alphas"], "model.alphas", n, T=T)
    lambdas = _sequence(m["lambdas"], "model.lambdas", n, alphas, T)
    return build_model(alphas, lambdas, beta, T, name=raw.get("name", "custom"))


def _initial_state(cfg, n):
    x = cfg.get("x")
    if x is None:
        return np.ones(n)
    return _sequence(x, "x", n)


# ---------------------------------------------------------------------------
# output helpers


def atomic_write(path: Path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(v if isinstance(v, str) else repr(float(v)) if isinstance(v, float) else str(v) for v in r))
    return "\n".join(lines) + "\n"


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# scenarios; each returns ({filename: text}, summary dict)


def _run_criterion(cfg):
    model = make_model(cfg)
    rep = equivalence_report(model, n_steps=int(cfg.get("n_steps", 1024)))
    summary = {"verdict": rep.verdict, "sup_necsuf": rep.sup_necsuf, "bounds": list(rep.bounds)}
    return {"criterion.csv": rep.to_csv(), "criterion.json": rep.to_json() + "\n"}, summary


def _run_simulate(cfg):
    model = make_model(cfg)
    grid = Grid(model.T, int(cfg.get("n_steps", 256)))
    ens = simulate_ou(model, grid, np.zeros(model.n_modes), int(cfg.get("n_paths", 1000)), cfg.seed)
    q, se = empirical_covariance(ens)
    rows = []
    worst = 0.0
    for i in range(model.n_modes):
        qn = covariance_qn(model, i + 1, n_steps=512)
        z = (q[i] - qn) / se[i] if se[i] > 0 else 0.0
        worst = max(worst, abs(z))
        rows.append([i + 1, float(qn), float(q[i]), float(se[i]), float(z)])
    summary = {"max_abs_z": worst, "max_alpha_dt": float(np.max(model.alphas) * grid.dt)}
    return {"covariance.csv": _csv(["n", "q_theory", "q_empirical", "se", "z"], rows)}, summary


def _run_control(cfg):
    model = make_model(cfg)
    n_steps = int(cfg.get("n_steps", 1024))
    spec = cfg.get("control", "explicit")
    b = model.beta
    out = {}
    if spec == "explicit":
        x = _initial_state(cfg, model.n_modes)
        u = explicit_control(model, x, n_steps=n_steps)
        residual = verify_steering(model, x, u)
    elif isinstance(spec, dict) and spec.get("form") == "power":
        p = float(spec.get("p", 0.0))
        u = ControlFunction.from_callable(Grid(model.T, n_steps), lambda t: t**p)
        residual = None
    else:
        raise ConfigError("control", "expected 'explicit' or {form: power, p: ..}")
    u = hstar_norm(b, u, levels=int(cfg.get("levels", 3)))
    doc = {
        "beta": b.beta,
        "norm_l2": u.norm_l2,
        "norm_hstar": u.norm_hstar,
        "flag": u.hstar_flag,
        "trace": [{"level": lev, "value": v} for lev, v in u.trace],
        "steering_residual": residual,
    }
    out["control.json"] = _dumps(doc)
    out["control.csv"] = u.to_csv()
    out["hstar_trace.csv"] = _csv(["level", "hstar_norm"], [[lev, float(v)] for lev, v in u.trace])
    return out, {"flag": u.hstar_flag, "norm_hstar": u.norm_hstar, "steering_residual": residual}


def _run_moment(cfg):
    raw = cfg.raw
    T = float(raw.get("T", 1.0))
    n = int(raw["n_trunc"])
    size = len(raw["exponents"]) if isinstance(raw["exponents"], list) else n
    lam = _sequence(raw["exponents"], "exponents", size)
    c = _sequence(raw["targets"], "targets", lam.size)
    sol = moment_solve(MomentProblem(lam, c, T, n, ridge=raw.get("ridge")), n_steps=int(raw.get("n_steps", 1024)))
    summary = {"max_residual": float(np.max(np.abs(sol.residuals))), "condition": sol.condition, "ridge": sol.ridge}
    if cfg.get("hstar", True):
        u = hstar_norm(cfg.get("beta"), sol.control)
        summary.update(norm_hstar=u.norm_hstar, flag=u.hstar_flag)
    return {"moment.json": sol.to_json() + "\n", "u0.csv": sol.control.to_csv()}, summary


def _run_density(cfg):
    model = make_model(cfg)
    grid = Grid(model.T, int(cfg.get("n_steps", 400)))
    G = nemytskii(model, cfg.get("f", "sin"))
    x = _initial_state(cfg, model.n_modes)
    n_paths = int(cfg.get("n_paths", 2000))
    from .girsanov import MC_BATCH

    parts = []
    done = 0
    while done < n_paths:
        m = min(MC_BATCH, n_paths - done)
        parts.append(densities(G, simulate_ou(model, grid, x, m, cfg.seed, path_offset=done)))
        done += m
    d = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    rho = np.exp(d["log_rho"])
    mean, se = float(rho.mean()), float(rho.std(ddof=1) / math.sqrt(rho.size)) if rho.size > 1 else 0.0
    summary = {"mean_rho": mean, "mean_rho_se": se, "normalized": bool(abs(mean - 1) <= 3 * se)}
    out = {"density.csv": densities_to_csv(d)}
    if cfg.get("transfer", False):
        rec = transfer_check(model, G, x, n_paths=n_paths, n_steps=grid.n_steps, seed=cfg.seed)
        out["transfer.json"] = _dumps(rec)
        summary["transfer_max_abs_z"] = max(abs(f["z"]) for f in rec["functionals"])
    return out, summary


def _run_strongfeller(cfg):
    model = make_model(cfg)
    G = nemytskii(model, cfg.get("f", "sin"))
    x = _initial_state(cfg, model.n_modes)
    d = cfg.get("direction")
    d = np.ones(model.n_modes) if d is None else _sequence(d, "direction", model.n_modes)
    rec = strong_feller_probe(model, G, x, d, levels=int(cfg.get("levels", 5)),
                              n_paths=int(cfg.get("n_paths", 4000)), n_steps=int(cfg.get("n_steps", 200)),
                              seed=cfg.seed)
    rows = [[off, m, s] for off, m, s in zip(rec["offsets"], rec["mean_abs_drho"], rec["se"])]
    summary = {"monotone": rec["monotone"], "final_over_initial": rec["final_over_initial"]}
    return {"strongfeller.json": _dumps(rec), "strongfeller.csv": _csv(["x", "y", "yerr"], rows)}, summary


_DISPATCH = {
    "criterion": _run_criterion,
    "simulate": _run_simulate,
    "control": _run_control,
    "moment": _run_moment,
    "density": _run_density,
    "strongfeller": _run_strongfeller,
}


def run_experiment(cfg: ExperimentConfig, out_dir, seed: int | None = None, name: str | None = None) -> dict:
    """Run one scenario, write its outputs and ``manifest.json`` into ``out_dir``."""
    if seed is not None:
        cfg = validate_config(dict(cfg.raw, seed=int(seed)))
    out = Path(out_dir)
    t0 = time.perf_counter()
    files, summary = _DISPATCH[cfg.scenario](cfg)
    for fname, text in files.items():
        atomic_write(out / fname, text)
    manifest = {
        "manifest_version": 1,
        "name": cfg.raw.get("name") or name or cfg.scenario,
        "tool": "fracnull",
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": cfg.raw,
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "outputs": {f: f for f in files},
        "summary": summary,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    atomic_write(out / MANIFEST_NAME, _dumps(manifest))
    return manifest


# ---------------------------------------------------------------------------
# reports


def _sci(log_x: float) -> str:
    # from the natural log, so values below the double range still print
    e = math.floor(log_x / math.log(10.0))
    m = math.exp(log_x - e * math.log(10.0))
    if m >= 9.99995:
        m, e = m / 10, e + 1
    return f"{m:.4f}e{e:+03d}"


def emit_report(manifest_path) -> str:
    """One-page markdown summary of a finished run."""
    mp = Path(manifest_path)
    if mp.is_dir():
        mp = mp / MANIFEST_NAME
    if not mp.exists():
        raise InvalidInputError(f"manifest not found: {mp}")
    text = mp.read_text().strip()
    if not text:
        raise InvalidInputError("manifest is empty")
    man = json.loads(text)
    if not man.get("outputs"):
        raise InvalidInputError("manifest lists no outputs")
    base = mp.parent
    for name in man["outputs"].values():
        if not (base / name).exists():
            raise InvalidInputError(f"missing artifact: {name}")
    sc = man["scenario"]
    s = man.get("summary", {})
    lines = [f"# {man.get('name', sc)} ({sc})", "",
             f"seed {man['seed']}, tool {man['tool']} {man['tool_version']}, wall time {man['wall_time_s']} s", ""]
    if sc == "criterion":
        doc = json.loads((base / "criterion.json").read_text())
        lines += ["| n | q_n | necsuf_n | ratio |", "|---|---|---|---|"]
        for r in doc["per_mode"]:
            lines.append(f"| {r['n']} | {_sci(r['log_q'])} | {_sci(r['log_necsuf'])} | {_sci(r['log_ratio'])} |")
        lines += ["", f"verdict: **{doc['verdict']}**"]
    elif sc == "strongfeller":
        ok = s["monotone"] and s["final_over_initial"] <= 0.1
        lines.append(f"monotone trend: {'PASS' if ok else 'FAIL'} "
                     f"(nonincreasing: {s['monotone']}, final/initial {s['final_over_initial']:.3g})")
    elif sc == "density":
        lines.append(f"mean rho = {s['mean_rho']:.5f} +- {s['mean_rho_se']:.5f}: "
                     f"{'PASS' if s['normalized'] else 'FAIL'} (within 3 SE of 1)")
        if "transfer_max_abs_z" in s:
            z = s["transfer_max_abs_z"]
            lines.append(f"transfer identity: max |z| = {z:.2f}: {'PASS' if z <= 3 else 'FAIL'}")
    elif sc == "simulate":
        z = s["max_abs_z"]
        lines.append(f"empirical vs theoretical q_n: max |z| = {z:.2f}: {'PASS' if z <= 3 else 'FAIL'}")
        lines.append(f"stiffness: max alpha_n dt = {s['max_alpha_dt']:.3g} (values above ~0.2 bias the scheme)")
    elif sc == "control":
        lines.append(f"H-star norm {s['norm_hstar']:.6g}, flag **{s['flag']}**")
        if s.get("steering_residual") is not None:
            r = s["steering_residual"]
            lines.append(f"steering residual {r:.3g}: {'PASS' if r <= 1e-10 else 'FAIL'}")
    elif sc == "moment":
        r = s["max_residual"]
        lines.append(f"max residual {r:.3g} (condition {s['condition']:.3g}, ridge {s['ridge']:.3g}): "
                     f"{'PASS' if r <= 1e-8 else 'FAIL'}")
        if "flag" in s:
            lines.append(f"H-star norm of u0 {s['norm_hstar']:.6g}, flag {s['flag']}")
    lines += ["", "outputs: " + ", ".join(sorted(man["outputs"]))]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shipped scenarios


def _scenario_files() -> dict:
    root = resources.files("fracnull") / "scenarios"
    out = {}
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith((".yaml", ".yml", ".json")):
            out[entry.name.rsplit(".", 1)[0]] = entry
    return out


def list_scenarios() -> list[tuple[str, str]]:
    rows = []
    for name, entry in _scenario_files().items():
        raw = yaml.safe_load(entry.read_text())
        rows.append((name, raw.get("description", "")))
    return rows
