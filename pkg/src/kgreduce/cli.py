"""Command line front end: ``kg-reduce --config run.json --mode full --out results/``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cantor_measure import FrequencyWindow, in_cantor, measure_estimate, sample_window
from .fourier_core import LatticeBox, TorusFunction, default_tau
from .reduction_pipeline import KGCoefficients, _jsonable, assemble_conjugator, outer, run_pipeline, select_reference_omega, system_operator
from .evolution_bench import EvolutionConfig, brute_force_spectrum, compare_spectrum, conjugated_agreement, evolve_original, predicted_spectrum, stability_report

SCHEMA_VERSION = 1
MODES = ("pipeline", "measure", "evolve", "oracle", "full")
log = logging.getLogger("kgreduce")


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: str | None = None, index: int | None = None):
        self.field_name = field_name
        self.index = index
        super().__init__(message)


@dataclass
class RunConfig:
    mode: str = "pipeline"
    nu: int = 1
    mass_m: float = 1.0
    K_phi: int = 8
    K_x: int = 12
    coefficients: dict | None = None
    coefficients_file: str | None = None
    reference_eps: float | None = 1e-3
    gamma: float = 0.01
    tau_dioph: float | None = None
    N0: int | None = None
    rho: int = 2
    depth: int = 3
    tol: float = 1e-12
    max_steps: int = 12
    omega: dict = field(default_factory=lambda: {"kind": "auto"})
    seed: int = 0
    measure: dict = field(default_factory=lambda: {"N": 100000, "gammas": [0.05, 0.02, 0.01], "sampler": "monte_carlo"})
    evolve: dict = field(default_factory=lambda: {"T_final": 100.0, "dt": 0.02, "integrator": "magnus4", "s_report": [2, 3, 4], "sample_every": 1.0})
    schema_version: int = SCHEMA_VERSION

    @property
    def box(self) -> LatticeBox:
        return LatticeBox(self.nu, self.K_phi, self.K_x)

    def effective(self) -> dict:
        d = asdict(self)
        if d["tau_dioph"] is None:
            d["tau_dioph"] = default_tau(self.nu)
        return d


def parse_config(payload: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("the configuration must be a JSON object")
    known = set(RunConfig.__dataclass_fields__)
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown field {key!r}", key)
    if payload.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {payload.get('schema_version')!r}", "schema_version")
    cfg = RunConfig(**payload)
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}", "mode")
    for name in ("nu", "K_phi", "K_x", "rho", "max_steps"):
        if not isinstance(getattr(cfg, name), int) or getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be a positive integer", name)
    if not 0 < cfg.gamma < 0.5:
        raise ConfigError("gamma must lie in (0, 1/2)", "gamma")
    if not cfg.mass_m > 0:
        raise ConfigError("mass_m must be positive", "mass_m")
    if cfg.tau_dioph is not None and cfg.tau_dioph <= 2 * cfg.nu + 4:
        log.warning("tau_dioph = %s does not exceed 2 nu + 4", cfg.tau_dioph)
    if cfg.coefficients_file is not None:
        path = Path(cfg.coefficients_file)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"coefficients file {str(path)!r} does not exist", "coefficients_file")
        cfg.coefficients_file = str(path)
    return cfg


def load_coefficients(cfg: RunConfig) -> KGCoefficients:
    box = cfg.box
    source = cfg.coefficients
    if cfg.coefficients_file is not None:
        with open(cfg.coefficients_file) as fh:
            source = json.load(fh)
    if source is None:
        if cfg.reference_eps is None:
            return KGCoefficients.zero(box, cfg.mass_m)
        return KGCoefficients.reference(box, cfg.reference_eps, cfg.mass_m)
    funcs = {}
    for name in ("a2", "a1", "a0"):
        try:
            funcs[name] = TorusFunction.from_records(box, source.get(name, []))
        except ValueError as exc:
            idx = _index_of(str(exc))
            raise ConfigError(f"{name}: {exc}", f"coefficients.{name}", idx) from exc
    return KGCoefficients(funcs["a2"], funcs["a1"], funcs["a0"], cfg.mass_m)


def _index_of(message: str) -> int | None:
    marker = "at index "
    if marker in message:
        tail = message.split(marker, 1)[1]
        digits = "".join(ch for ch in tail.split(":", 1)[0] if ch.isdigit())
        return int(digits) if digits else None
    return None


def omegas_from(cfg: RunConfig) -> list[tuple]:
    choice = cfg.omega
    kind = choice.get("kind", "auto")
    box = cfg.box
    if kind == "auto":
        return [select_reference_omega(box, cfg.mass_m, cfg.gamma, cfg.tau_dioph)]
    if kind == "explicit":
        vals = [tuple(float(v) for v in np.atleast_1d(w)) for w in choice["values"]]
        for w in vals:
            if len(w) != cfg.nu:
                raise ConfigError("every omega needs nu components", "omega")
        return vals
    window = FrequencyWindow(cfg.nu, cfg.gamma, cfg.tau_dioph, L_max=cfg.K_phi, mass=cfg.mass_m, lo=choice.get("lo", -0.5), hi=choice.get("hi", 0.5))
    if kind == "random":
        pts = sample_window(window, int(choice["N"]), "monte_carlo", int(choice.get("seed", cfg.seed)))
    elif kind == "grid":
        pts = sample_window(window, int(choice["N"]), "grid")
    else:
        raise ConfigError(f"unknown omega kind {kind!r}", "omega")
    return [tuple(float(v) for v in p) for p in pts]


def _threads() -> int:
    raw = os.environ.get("KG_REDUCE_THREADS")
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError("KG_REDUCE_THREADS must be an integer", "KG_REDUCE_THREADS")


# ---------------------------------------------------------------------------
# modes


def _pipeline_one(c, cfg, omega):
    res = run_pipeline(c, omega, rho=cfg.rho, gamma=cfg.gamma, tau=cfg.tau_dioph, N0=cfg.N0, max_steps=cfg.max_steps, tol=cfg.tol)
    return omega, res


def run_pipelines(c: KGCoefficients, cfg: RunConfig, omegas: list) -> list:
    window = FrequencyWindow(cfg.nu, cfg.gamma, cfg.tau_dioph, L_max=cfg.K_phi, mass=cfg.mass_m)
    todo = []
    skipped = []
    for w in omegas:
        check = in_cantor(w, window)
        (todo if check["ok"] else skipped).append((w, check))
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(lambda item: _pipeline_one(c, cfg, item[0]), todo))
    return results, skipped


def _eigen_rows(omega, res):
    lp, lm = res.normal.eigenvalues()
    return [{"omega": list(omega), "j": j, "plus": float(lp[j]), "minus": float(lm[j])} for j in range(len(lp))]


def _pipeline_report(omega, res) -> dict:
    rep = dict(res.report)
    rep.pop("timings", None)
    rep.pop("runtime", None)
    rep["eigenvalues"] = [{"j": r["j"], "plus": r["plus"], "minus": r["minus"]} for r in _eigen_rows(omega, res)]
    return _jsonable(rep)


def mode_pipeline(c, cfg, out, report):
    results, skipped = run_pipelines(c, cfg, omegas_from(cfg))
    report["pipeline"] = [_pipeline_report(w, r) for w, r in results]
    report["rejected_omegas"] = [{"omega": list(w), "which_set": chk["which_set"], "witness": chk["witness"]} for w, chk in skipped]
    rows = [row for w, r in results for row in _eigen_rows(w, r)]
    _write_csv(out / "eigenvalues.csv", ["omega", "j", "plus", "minus"], [[_fmt_vec(r["omega"]), r["j"], _f(r["plus"]), _f(r["minus"])] for r in rows])
    eps_rows = []
    for w, r in results:
        for h in r.history:
            eps_rows.append([_fmt_vec(w), h.n, _f(h.eps_n), _f(h.eps_n_b), h.N_n])
    _write_csv(out / "eps_sequence.csv", ["omega", "n", "eps", "eps_b", "N_n"], eps_rows)
    return results


def mode_measure(c, cfg, out, report):
    window = FrequencyWindow(cfg.nu, cfg.gamma, cfg.tau_dioph, L_max=cfg.K_phi, mass=cfg.mass_m)
    m = cfg.measure
    est = measure_estimate(window, m.get("sampler", "monte_carlo"), int(m.get("N", 100000)), cfg.seed, m.get("gammas"))
    report["measure"] = _jsonable(est)
    rows = []
    for w in omegas_from(cfg):
        chk = in_cantor(w, window)
        wit = chk["witness"]
        rows.append([_fmt_vec(w), int(chk["ok"]), chk["which_set"] or "", json.dumps(wit, sort_keys=True) if wit else ""])
    _write_csv(out / "measure.csv", ["omega", "accepted", "which_set", "witness"], rows)


def mode_oracle(c, cfg, out, report, results=None):
    if results is None:
        results, _ = run_pipelines(c, cfg, omegas_from(cfg))
    G0 = outer(system_operator(c))
    rows = []
    for w, res in results:
        ev = brute_force_spectrum(G0, w)
        pv, labels = predicted_spectrum(res.normal, c.box, w)
        rows.append({"omega": list(w), **compare_spectrum(ev, pv, labels)})
    report["oracle"] = _jsonable(rows)
    return results


def mode_evolve(c, cfg, out, report, results=None):
    if results is None:
        results, _ = run_pipelines(c, cfg, omegas_from(cfg))
    e = cfg.evolve
    ecfg = EvolutionConfig(float(e.get("T_final", 100.0)), float(e.get("dt", 0.02)), e.get("integrator", "magnus4"), tuple(float(s) for s in e.get("s_report", [2, 3, 4])), sample_every=float(e.get("sample_every", 1.0)))
    runs = []
    traj_rows = []
    for k, (w, res) in enumerate(results):
        traj = evolve_original(c, w, ecfg)
        F, _ = assemble_conjugator(res.transforms) if res.transforms else (None, None)
        agreement = conjugated_agreement(F, traj, res.normal, w) if F is not None else None
        runs.append({"omega": w, "in_set": True, "trajectory": traj, "agreement": agreement})
        for i, t in enumerate(traj.t):
            traj_rows.append([k, _f(t)] + [_f(traj.norms[s][i]) for s in ecfg.s_report])
    rep = stability_report(runs)
    for row in rep["runs"]:
        row.pop("runtime", None)
    report["evolve"] = _jsonable(rep)
    _write_csv(out / "trajectories.csv", ["run", "t"] + [f"norm_s{_f(s)}" for s in ecfg.s_report], traj_rows)
    return results


def run(cfg: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    c = load_coefficients(cfg)
    report = {"schema_version": SCHEMA_VERSION, "mode": cfg.mode, "config": _jsonable(cfg.effective())}
    results = None
    if cfg.mode in ("pipeline", "full"):
        results = mode_pipeline(c, cfg, out, report)
    if cfg.mode in ("measure", "full"):
        mode_measure(c, cfg, out, report)
    if cfg.mode in ("oracle", "full"):
        results = mode_oracle(c, cfg, out, report, results)
    if cfg.mode in ("evolve", "full"):
        mode_evolve(c, cfg, out, report, results)
    write_json(out / "report.json", report)
    return report


# ---------------------------------------------------------------------------
# output


def _f(x) -> str:
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        return str(x)
    return format(x, ".17g")


def _fmt_vec(v) -> str:
    return " ".join(_f(x) for x in v)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _dump(obj, indent=0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_dump(v, indent + 1)}" for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + _dump(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return json.dumps(str(x)) if (math.isnan(x) or math.isinf(x)) else format(x, ".17g")
    return json.dumps(str(obj))


def write_json(path: Path, obj):
    path.write_text(_dump(obj) + "\n")


def _error(kind: str, message: str, **extra) -> None:
    record = {"error": kind, "message": message, **{k: v for k, v in extra.items() if v is not None}}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kg-reduce", description="Reduce a quasi-periodic Klein-Gordon operator to constant normal form.")
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--mode", choices=MODES, help="override the configured mode")
    p.add_argument("--out", type=Path, default=Path("kg_reduce_out"), help="output directory")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--omega", type=str, help="explicit frequency vector, comma separated")
    p.add_argument("--gamma", type=float, help="diophantine constant")
    p.add_argument("--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        payload = {}
        base = None
        if args.config is not None:
            try:
                text = args.config.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}", "config") from exc
            try:
                payload = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}", "config") from exc
            base = args.config.parent
        if args.mode:
            payload["mode"] = args.mode
        if args.seed is not None:
            payload["seed"] = args.seed
        if args.gamma is not None:
            payload["gamma"] = args.gamma
        if args.omega:
            try:
                vec = [float(v) for v in args.omega.split(",")]
            except ValueError as exc:
                raise ConfigError(f"--omega: {exc}", "omega") from exc
            payload["omega"] = {"kind": "explicit", "values": [vec]}
        try:
            cfg = parse_config(payload, base)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        run(cfg, args.out)
    except ConfigError as exc:
        _error("config", str(exc), field=exc.field_name, index=exc.index)
        return 2
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        _error("numerical", str(exc), type=type(exc).__name__)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
