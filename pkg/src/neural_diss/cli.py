"""Command-line front end: ``neural-diss <subcommand> --config run.ini``.

Exit status: 0 success, 1 usage or input error, 2 training did not converge,
3 verification did not certify.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .barrier import BoxBarrier
from .lipcert import WeibullFitConfig
from .net import FeedforwardNet, load_net, save_net
from .plant import BENCHMARKS, BlackBoxSystem, estimate_plant_lipschitz, integrate_rk4, subprocess_system
from .sampling import BoxDomain, build_cover, export_cover, import_cover, verify_cover
from .synth import Dataset, HyperParams, Multipliers, certify, kl_envelope, train, write_history
from .synth.scp import closed_loop_inputs

log = logging.getLogger("neural_diss")

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_NOT_CERTIFIED = 0, 1, 2, 3

COVER_X, COVER_W = "cover_x.csv", "cover_w.csv"
CLF_FILE, CTRL_FILE = "clf.weights", "controller.weights"
MULT_FILE, LIP_FILE = "multipliers.json", "lipschitz.json"
CERT_FILE, HIST_FILE = "certificate.json", "history.csv"


class ConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SimulateConfig:
    dt: float = 0.01
    t_end: float = 10.0
    initial_states: list = field(default_factory=list)
    inputs: list = field(default_factory=list)


@dataclass
class KlGridConfig:
    s_max: float = 1.0
    n_s: int = 5
    t_max: float = 10.0
    n_t: int = 11
    r_max: float = 0.1
    n_r: int = 5


@dataclass
class RunConfig:
    plant: BlackBoxSystem
    hp: HyperParams
    lip_x: Optional[float]
    lip_u: Optional[float]
    weibull: WeibullFitConfig
    simulate: SimulateConfig
    kl: KlGridConfig
    out: Path
    digest: str
    source: Optional[Path] = None

    @property
    def barrier(self) -> BoxBarrier:
        return BoxBarrier(self.plant.state_box)


def _floats(text: str, where: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _vectors(text: str, where: str) -> list[list[float]]:
    return [_floats(chunk, where) for chunk in text.split(";") if chunk.strip()]


def _line_of(text: str, section: str, key: str) -> str:
    cur = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
        elif cur == section and s.split("=", 1)[0].strip() == key:
            return f" (line {i})"
    return ""


_PLANT_KEYS = {"name", "command", "state_dim", "input_dim", "x_lo", "x_hi", "u_lo", "u_hi", "w_lo", "w_hi"}


def _build_plant(sec, where) -> BlackBoxSystem:
    if "command" in sec:
        for k in ("state_dim", "input_dim", "x_lo", "x_hi", "u_lo", "u_hi", "w_lo", "w_hi"):
            if k not in sec:
                raise ConfigError(f"{where}: external plant needs '{k}'")
        sys_ = subprocess_system(sec["command"], int(sec["state_dim"]), int(sec["input_dim"]))
    else:
        name = sec.get("name")
        if name not in BENCHMARKS:
            raise ConfigError(f"{where}: unknown plant {name!r}; choose from {sorted(BENCHMARKS)} or set 'command'")
        kwargs = {k: float(v) for k, v in sec.items() if k not in _PLANT_KEYS}
        try:
            sys_ = BENCHMARKS[name](**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{where}: bad parameter for plant {name!r}: {exc}") from None
    for attr, key in (("state_box", "x"), ("input_box", "u"), ("external_box", "w")):
        if f"{key}_lo" in sec or f"{key}_hi" in sec:
            try:
                box = BoxDomain(_floats(sec[f"{key}_lo"], where), _floats(sec[f"{key}_hi"], where))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{where}: box {key}: {exc}") from None
            setattr(sys_, attr, box)
    if sys_.state_box is None or sys_.external_box is None:
        raise ConfigError(f"{where}: state and external-input boxes are required")
    return sys_


def _hyper(sec, text: str) -> HyperParams:
    kwargs = {}
    types = {f.name: f for f in dataclasses.fields(HyperParams)}
    for key, raw in sec.items():
        if key not in types:
            raise ConfigError(f"[hyper] unknown key '{key}'{_line_of(text, 'hyper', key)}")
        try:
            if key in ("c", "cl"):
                kwargs[key] = tuple(_floats(raw, key))
            elif key in ("clf_hidden", "ctrl_hidden"):
                kwargs[key] = tuple(int(v) for v in _floats(raw, key))
            elif key in ("clf_activation", "ctrl_activation"):
                kwargs[key] = raw.strip()
            elif key in ("epochs", "batch_size", "n_batches", "seed"):
                kwargs[key] = int(raw)
            elif key in ("d_min", "eps_w") and raw.strip().lower() in ("", "none", "auto"):
                kwargs[key] = None
            else:
                kwargs[key] = float(raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"[hyper] {key}{_line_of(text, 'hyper', key)}: {exc}") from None
    try:
        return HyperParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[hyper]: {exc}") from None


def parse_config(text: str, path: Optional[Path] = None, out: Optional[str] = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str  # keys are case sensitive (lip_L vs lip_l)
    try:
        cp.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if "plant" not in cp:
        raise ConfigError("missing [plant] section")
    plant = _build_plant(cp["plant"], "[plant]")
    hp = _hyper(cp["hyper"] if "hyper" in cp else {}, text)

    lip = cp["lipschitz"] if "lipschitz" in cp else {}
    try:
        lip_x = float(lip["lip_x"]) if "lip_x" in lip else None
        lip_u = float(lip["lip_u"]) if "lip_u" in lip else None
        weibull = WeibullFitConfig(
            int(lip.get("n_batches", 30)), int(lip.get("pairs_per_batch", 1000)), float(lip.get("pair_radius", 0.1))
        )
    except ValueError as exc:
        raise ConfigError(f"[lipschitz]: {exc}") from None

    sim = SimulateConfig()
    if "simulate" in cp:
        s = cp["simulate"]
        sim = SimulateConfig(
            float(s.get("dt", sim.dt)),
            float(s.get("t_end", sim.t_end)),
            _vectors(s.get("initial_states", ""), "[simulate] initial_states"),
            _vectors(s.get("inputs", ""), "[simulate] inputs"),
        )
    kl = KlGridConfig()
    if "kl" in cp:
        k = cp["kl"]
        kl = KlGridConfig(
            float(k.get("s_max", kl.s_max)), int(k.get("n_s", kl.n_s)), float(k.get("t_max", kl.t_max)),
            int(k.get("n_t", kl.n_t)), float(k.get("r_max", kl.r_max)), int(k.get("n_r", kl.n_r)),
        )
    run = cp["run"] if "run" in cp else {}
    out_dir = Path(out or run.get("out", "out"))
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    return RunConfig(plant, hp, lip_x, lip_u, weibull, sim, kl, out_dir, digest, path)


def load_config(path, out: Optional[str] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), path, out)


def shipped_config(name: str) -> Path:
    """Path of a config shipped with the package (``linear_toy``, ``scalar_desk``, ...)."""
    return Path(__file__).parent / "configs" / f"{name}.ini"


# ---------------------------------------------------------------------------
# artifacts


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    return path


def _covers(cfg: RunConfig, fresh: bool = False):
    out = cfg.out
    if not fresh and (out / COVER_X).exists() and (out / COVER_W).exists():
        return import_cover(out / COVER_X), import_cover(out / COVER_W)
    xs = build_cover(cfg.plant.state_box, cfg.hp.eps)
    ws = build_cover(cfg.plant.external_box, cfg.hp.eps_input)
    return xs, ws


def _lipschitz(cfg: RunConfig, seed: int) -> tuple[float, float]:
    if cfg.lip_x is not None and cfg.lip_u is not None:
        return cfg.lip_x, cfg.lip_u
    path = cfg.out / LIP_FILE
    if path.exists():
        doc = json.loads(path.read_text())
        return (cfg.lip_x or doc["lip_x"]), (cfg.lip_u or doc["lip_u"])
    lx, lu = estimate_plant_lipschitz(cfg.plant, cfg.weibull, seed)
    return (cfg.lip_x or lx.value), (cfg.lip_u or lu.value)


def build_dataset(cfg: RunConfig, seed: int, fresh: bool = False) -> Dataset:
    xs, ws = _covers(cfg, fresh)
    lx, lu = _lipschitz(cfg, seed)
    return Dataset(cfg.plant, cfg.barrier, xs, ws, cfg.hp, lx, lu)


def _provenance(cfg: RunConfig, seed: int) -> dict:
    return {"seed": seed, "config_digest": cfg.digest, "config": str(cfg.source) if cfg.source else None}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    xs, ws = _covers(cfg, fresh=True)
    for cover, name in ((xs, COVER_X), (ws, COVER_W)):
        if args.probe:
            v = verify_cover(cover, args.probe, args.seed)
            print(f"{name}: {len(cover)} points, probe worst {v.worst_distance:.6g} <= {cover.eps}: {v.passed}")
            if not v.passed:
                return EXIT_USAGE
        export_cover(cover, cfg.out / name)
    print(f"wrote {cfg.out / COVER_X} ({len(xs)} points) and {cfg.out / COVER_W} ({len(ws)} points)")
    return EXIT_OK


def cmd_estimate_lipschitz(cfg: RunConfig, args) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    lx, lu = estimate_plant_lipschitz(cfg.plant, cfg.weibull, args.seed)
    doc = {
        "lip_x": lx.value,
        "lip_u": lu.value,
        "sample_max_x": lx.sample_max,
        "sample_max_u": lu.sample_max,
        "fallback": bool(lx.fallback or lu.fallback),
        "seed": args.seed,
    }
    (cfg.out / LIP_FILE).write_text(json.dumps(doc, indent=1) + "\n")
    print(f"L_x = {lx.value:.6g}, L_u = {lu.value:.6g}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    data = build_dataset(cfg, args.seed)
    for cover, name in ((data.xs, COVER_X), (data.ws, COVER_W)):
        if not (cfg.out / name).exists():
            export_cover(cover, cfg.out / name)
    res = train(data, seed=args.seed, epochs=args.epochs)
    save_net(res.V, cfg.out / CLF_FILE, "clf")
    save_net(res.g, cfg.out / CTRL_FILE, "controller")
    mult = res.lambdas.to_dict()
    mult["eta"] = res.eta
    (cfg.out / MULT_FILE).write_text(json.dumps(mult) + "\n")
    write_history(res.history, cfg.out / HIST_FILE)
    cert = certify(res.V, res.g, res.lambdas, res.eta, None, None, data, _provenance(cfg, args.seed))
    cert.diagnostics["provisional"] = True
    cert.diagnostics["converged"] = res.converged
    cert.save(cfg.out / CERT_FILE)
    print(f"epochs {res.epochs_run}, converged {res.converged}, margin {cert.margin:.6g}, verdict {cert.verdict}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def reference_dir(name: str) -> Path:
    """Directory of reference weights shipped with the package."""
    return Path(__file__).parent / "reference" / name


def load_trained(cfg: RunConfig, weights_dir: Optional[str]):
    if weights_dir and weights_dir.startswith("builtin:"):
        d = reference_dir(weights_dir.split(":", 1)[1])
    else:
        d = Path(weights_dir) if weights_dir else cfg.out
    V = load_net(_require(d / CLF_FILE))
    g = load_net(_require(d / CTRL_FILE))
    doc = json.loads(_require(d / MULT_FILE).read_text())
    return V, g, Multipliers.from_dict(doc), doc.get("eta")


def cmd_verify(cfg: RunConfig, args) -> int:
    V, g, lam, eta = load_trained(cfg, args.weights)
    data = build_dataset(cfg, args.seed, fresh=True)
    cover_ok = True
    if args.probe:
        for cover, name in ((data.xs, "X"), (data.ws, "W")):
            v = verify_cover(cover, args.probe, args.seed)
            cover_ok &= v.passed
            print(f"cover {name}: worst probe distance {v.worst_distance:.6g} (eps {cover.eps}) passed {v.passed}")
    cert = certify(V, g, lam, eta, None, None, data, _provenance(cfg, args.seed))
    cert.diagnostics["cover_probe_passed"] = cover_ok
    cert.diagnostics["cover_probes"] = args.probe
    cfg.out.mkdir(parents=True, exist_ok=True)
    cert.save(cfg.out / CERT_FILE)
    print(
        f"eta* = {cert.eta_star:.6g}, L = {cert.L:.6g}, eps = {cert.eps:.6g}, "
        f"margin = {cert.margin:.6g}, verdict {cert.verdict}"
    )
    return EXIT_OK if cert.certified and cover_ok else EXIT_NOT_CERTIFIED


def cmd_simulate(cfg: RunConfig, args) -> int:
    _, g, _, _ = load_trained(cfg, args.weights)
    sim = cfg.simulate
    if args.x0:
        x0s = [_floats(s, "--x0") for s in args.x0]
        ws = [_floats(s, "--w") for s in args.w] if args.w else []
    else:
        x0s = sim.initial_states
        ws = [_floats(s, "--w") for s in args.w] if args.w else sim.inputs
    if not x0s:
        raise ConfigError("no initial states: set [simulate] initial_states or pass --x0")
    if not ws:
        ws = [list(cfg.plant.external_box.center)]
    if len(ws) == 1:
        ws = ws * len(x0s)
    if len(ws) != len(x0s):
        raise ConfigError(f"{len(x0s)} initial states but {len(ws)} inputs")
    sys_ = cfg.plant
    for x0, w in zip(x0s, ws):
        x0 = np.asarray(x0, float)
        w = np.asarray(w, float)
        if x0.size != sys_.state_dim or not sys_.state_box.contains(x0):
            raise DomainError(f"initial state {x0.tolist()} is not in X = {sys_.state_box.lo}..{sys_.state_box.hi}")
        if w.size != sys_.external_box.dim or not sys_.external_box.contains(w):
            raise DomainError(f"input {w.tolist()} is not in W")
    cfg.out.mkdir(parents=True, exist_ok=True)
    for k, (x0, w) in enumerate(zip(x0s, ws)):
        w = np.asarray(w, float)
        ctrl = lambda x, t, w=w: closed_loop_inputs(g, sys_, x[None, :], w[None, :])[0]  # noqa: E731
        traj = integrate_rk4(sys_, ctrl, x0, sim.dt, sim.t_end, external=lambda t, w=w: w)
        traj.to_csv(cfg.out / f"traj_{k}.csv")
    print(f"wrote {len(x0s)} trajectories to {cfg.out}")
    return EXIT_OK


def cmd_kl_bounds(cfg: RunConfig, args) -> int:
    env = kl_envelope(cfg.hp)
    k = cfg.kl
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "kl_bounds.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["kind", "s_or_r", "t", "value"])
        for s in np.linspace(0.0, k.s_max, k.n_s):
            for t in np.linspace(0.0, k.t_max, k.n_t):
                wr.writerow(["beta", repr(float(s)), repr(float(t)), repr(float(env.beta(s, t)))])
        for r in np.linspace(0.0, k.r_max, k.n_r):
            wr.writerow(["gamma", repr(float(r)), "", repr(float(env.gamma(r)))])
    print(f"wrote {cfg.out / 'kl_bounds.csv'}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "estimate-lipschitz": cmd_estimate_lipschitz,
    "train": cmd_train,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "kl-bounds": cmd_kl_bounds,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neural-diss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI run configuration")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None, help="output directory (overrides [run] out)")
        s.add_argument("--epochs", type=int, default=None)
        s.add_argument("--probe", type=int, default=0, help="Monte-Carlo probes for cover verification")
        if name in ("verify", "simulate"):
            s.add_argument(
                "--weights",
                default=None,
                help="directory with trained weights, or builtin:NAME for shipped reference weights (default: --out)",
            )
        if name == "simulate":
            s.add_argument("--x0", action="append", help="initial state, comma separated (repeatable)")
            s.add_argument("--w", action="append", help="constant external input per trajectory")
    return p


def run_command(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.out)
        if args.seed is None:
            args.seed = cfg.hp.seed
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
