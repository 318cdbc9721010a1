"""Command-line entry point: ``sslglm {thresholds,simulate,adaptive}``.

Scenarios are read from an INI file::

    [scenario]
    mode = linear-constant        ; linear-random | misspecified | glm
    n = 50
    m = 5000
    pool_size = 20000
    replicates = 1000
    seed = 0

    [covariates]
    family = gaussian             ; uniform | t8
    p = 25
    blocks = 5
    rho = 0.9

    [mean]
    beta = 1.5                    ; coefficient used by simulate/adaptive
    beta_grid = 0.25, 0.5, 0.75, 1.0, 1.25, 1.5
    tau2 = 1.0                    ; linear-random
    delta = 0.4                   ; misspecified
    link = elu                    ; glm
    elu_a = 1.0

    [grid]
    sigma2 = 0, 50, 100           ; or start / stop / num

    [mc]
    replicates = 2000

Flags given on the command line override the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import (
    ConfigurationError,
    ConstantBeta,
    CovariateModel,
    GlmLink,
    Misspecified,
    RandomBeta,
    eval_mean,
)
from .estimators import Estimator
from .links import make_link
from .moments import McConfig, estimate_glm_moments, estimate_misspec_terms, estimate_moments
from .risk import Scenario, run_replicates
from .thresholds import (
    closed_form_t,
    thresholds_glm,
    thresholds_linear,
    thresholds_misspecified,
    thresholds_random_beta,
)

MODES = ("linear-constant", "linear-random", "misspecified", "glm")

SIMULATE_HEADER = ["sigma2", "estimator", "risk", "stderr", "bias2", "variance"]
THRESHOLDS_HEADER = ["beta", "F_tilde", "U_tilde", "F_breve", "U_breve", "t_closed",
                     "se_F_tilde", "se_U_tilde", "se_F_breve", "se_U_breve"]
ADAPTIVE_HEADER = ["sigma2", "replicate", "sigma2_hat", "nsr_hat", "F_breve", "U_breve",
                   "F_breve_raw", "chosen", "loss"]

FULL_SCALE = {"n": 50, "m": 5000, "pool_size": 50_000, "replicates": 5000}

KNOWN_KEYS = {
    "scenario": {"mode", "n", "m", "pool_size", "replicates", "seed"},
    "covariates": {"family", "p", "blocks", "rho"},
    "mean": {"beta", "beta_grid", "tau2", "delta", "link", "elu_a"},
    "grid": {"sigma2", "start", "stop", "num"},
    "mc": {"replicates", "seed", "groups"},
}


class ConfigError(ConfigurationError):
    pass


@dataclass
class ScenarioConfig:
    mode: str = "linear-constant"
    n: int = 50
    m: int = 5000
    pool_size: int = 20_000
    replicates: int = 1000
    seed: int = 0
    family: str = "gaussian"
    p: int = 25
    blocks: int = 5
    rho: float = 0.9
    beta: float = 1.5
    beta_grid: list = field(default_factory=lambda: [1.5])
    tau2: float = 1.0
    delta: float = 0.4
    link: str = "identity"
    elu_a: float = 1.0
    sigma2: list = field(default_factory=lambda: list(np.linspace(0.0, 500.0, 41)))
    mc_replicates: int = 2000
    mc_seed: int | None = None
    mc_groups: int = 20

    def covariate_model(self) -> CovariateModel:
        return CovariateModel(self.p, self.family, self.blocks, self.rho)

    def mean_model(self, b: float | None = None):
        b = self.beta if b is None else b
        if self.mode == "linear-constant":
            return ConstantBeta(b)
        if self.mode == "linear-random":
            return RandomBeta(self.tau2)
        if self.mode == "misspecified":
            return Misspecified(b, self.delta)
        return GlmLink(np.full(self.p, float(b)), make_link(self.link, self.elu_a))

    def mc(self) -> McConfig:
        seed = self.seed if self.mc_seed is None else self.mc_seed
        return McConfig(B=self.mc_replicates, seed=seed, groups=self.mc_groups)

    def scenario(self) -> Scenario:
        return Scenario(self.covariate_model(), self.mean_model(), n=self.n, m=self.m,
                        pool_size=self.pool_size, replicates=self.replicates, seed=self.seed,
                        mc=self.mc())


# ---------------------------------------------------------------------------
# config parsing


def _line_numbers(text: str) -> dict:
    """(section, key) -> 1-based line number, for error messages."""
    where, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = i
            continue
        m = re.match(r"([^=:;#\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            where[(section, m.group(1).strip().lower())] = i
    return where


def _float_list(raw: str) -> list:
    parts = [t for t in re.split(r"[,\s]+", raw.strip()) if t]
    return [float(t) for t in parts]


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    lines = _line_numbers(text)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    def fail(section, key, msg):
        line = lines.get((section, key), lines.get((section, None)))
        loc = f"{path}:{line}" if line else str(path)
        name = f"[{section}] {key}" if key else f"[{section}]"
        raise ConfigError(f"{loc}: {name}: {msg}")

    cfg = ScenarioConfig()
    for sec in parser.sections():
        section = sec
        if sec not in KNOWN_KEYS:
            fail(sec, None, "unknown section")
        for key in parser[section]:
            if key not in KNOWN_KEYS[sec]:
                fail(sec, key, "unknown key")

    def get(section, key, conv, attr=None):
        if not parser.has_option(section, key):
            return
        raw = parser.get(section, key)
        try:
            val = conv(raw)
        except ValueError:
            fail(section, key, f"cannot parse {raw!r}")
        setattr(cfg, attr or key, val)

    get("scenario", "mode", str.strip)
    for key in ("n", "m", "pool_size", "replicates", "seed"):
        get("scenario", key, int)
    get("covariates", "family", lambda s: s.strip().lower())
    for key in ("p", "blocks"):
        get("covariates", key, int)
    get("covariates", "rho", float)
    for key in ("beta", "tau2", "delta", "elu_a"):
        get("mean", key, float)
    get("mean", "beta_grid", _float_list)
    get("mean", "link", lambda s: s.strip().lower())
    get("mc", "replicates", int, "mc_replicates")
    get("mc", "seed", int, "mc_seed")
    get("mc", "groups", int, "mc_groups")
    if parser.has_section("grid"):
        g = parser["grid"]
        if "sigma2" in g:
            get("grid", "sigma2", _float_list)
        elif {"start", "stop", "num"} <= set(g):
            try:
                start, stop, num = float(g["start"]), float(g["stop"]), int(g["num"])
            except ValueError:
                fail("grid", "num", "start/stop must be numbers and num an integer")
            if num < 0:
                fail("grid", "num", "must be non-negative")
            cfg.sigma2 = list(np.linspace(start, stop, num))
        elif g:
            fail("grid", None, "give either sigma2 or all of start, stop, num")
    if not parser.has_option("mean", "beta_grid") and parser.has_option("mean", "beta"):
        cfg.beta_grid = [cfg.beta]

    # validate against module preconditions, pointing at the offending line
    checks = [
        ("scenario", "mode", cfg.mode in MODES, f"unknown mode {cfg.mode!r}; expected one of {MODES}"),
        ("covariates", "family", cfg.family in ("gaussian", "uniform", "t8"),
         f"unknown covariate family {cfg.family!r}; expected gaussian, uniform or t8"),
        ("covariates", "p", cfg.p >= 1, "must be positive"),
        ("covariates", "blocks", cfg.blocks >= 1 and cfg.p % cfg.blocks == 0,
         f"p={cfg.p} is not divisible by blocks={cfg.blocks}"),
        ("scenario", "n", cfg.n > cfg.p, f"need n > p (n={cfg.n}, p={cfg.p})"),
        ("scenario", "m", cfg.m >= cfg.p, f"need m >= p (m={cfg.m}, p={cfg.p})"),
        ("scenario", "pool_size", cfg.pool_size >= cfg.n, "must be at least n"),
        ("scenario", "replicates", cfg.replicates >= 1, "must be positive"),
        ("mc", "replicates", cfg.mc_replicates >= 1, "must be positive"),
        ("mean", "tau2", cfg.tau2 >= 0, "must be non-negative"),
        ("mean", "link", cfg.link in ("identity", "elu"), f"unknown link {cfg.link!r}"),
        ("mean", "elu_a", cfg.elu_a > 0, "must be positive"),
        ("grid", "sigma2", all(s >= 0 for s in cfg.sigma2), "values must be non-negative"),
    ]
    for section, key, ok, msg in checks:
        if not ok:
            fail(section, key, msg)
    try:
        cfg.covariate_model()._chol
    except ConfigurationError as exc:
        fail("covariates", "rho", str(exc))
    return cfg


def apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    if getattr(args, "full_scale", False):
        for k, v in FULL_SCALE.items():
            setattr(cfg, k, v)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.replicates is not None:
        cfg.replicates = args.replicates
    if args.pool_size is not None:
        cfg.pool_size = args.pool_size
    if args.mc_replicates is not None:
        cfg.mc_replicates = args.mc_replicates
    if cfg.replicates < 1 or cfg.pool_size < cfg.n or cfg.mc_replicates < 1:
        raise ConfigError("--replicates and --mc-replicates must be positive and --pool-size at least n")
    return cfg


# ---------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    x = float(x)
    if math.isnan(x):
        return ""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _write(out, header, rows):
    close = False
    if out is None or out == "-":
        fh = sys.stdout
    else:
        fh = open(out, "w", encoding="utf-8", newline="")
        close = True
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------------------
# commands


def threshold_rows(cfg: ScenarioConfig):
    sc = cfg.scenario()
    pool = sc.pool()
    cov = cfg.covariate_model()
    gaussian = cfg.family == "gaussian"
    mc = cfg.mc()
    if cfg.mode == "glm":
        link = make_link(cfg.link, cfg.elu_a)
        for b in cfg.beta_grid:
            gm = estimate_glm_moments(pool, cfg.n, mc, np.full(cfg.p, b), link)
            yield _threshold_row(b, thresholds_glm(gm), None)
        return
    moments = estimate_moments(pool, cfg.n, mc)
    if cfg.mode == "linear-random":
        t = closed_form_t(cov.latent_covariance(), cfg.n) if gaussian else None
        yield _threshold_row(None, thresholds_random_beta(moments, t), t)
        return
    for b in cfg.beta_grid:
        beta = np.full(cfg.p, b)
        if cfg.mode == "misspecified":
            model = Misspecified(b, cfg.delta)
            terms = estimate_misspec_terms(pool, cfg.n, mc, lambda X, mm=model: eval_mean(mm, X))
            yield _threshold_row(b, thresholds_misspecified(terms, moments), None)
        else:
            t = closed_form_t(cov.latent_covariance(), cfg.n, beta) if gaussian else None
            yield _threshold_row(b, thresholds_linear(moments, beta, t), t)


def _threshold_row(b, rep, t):
    se = rep.se
    return [b, rep.f_tilde, rep.u_tilde, rep.f_breve, rep.u_breve, t,
            se.get("f_tilde"), se.get("u_tilde"), se.get("f_breve"), se.get("u_breve")]


def cmd_thresholds(cfg: ScenarioConfig, out) -> None:
    _write(out, THRESHOLDS_HEADER, threshold_rows(cfg))


def cmd_simulate(cfg: ScenarioConfig, out, workers: int = 1) -> None:
    rc = run_replicates(cfg.scenario(), cfg.sigma2, workers=workers)
    _warn_failures(rc)
    _write(out, SIMULATE_HEADER, rc.rows())


def cmd_adaptive(cfg: ScenarioConfig, out, workers: int = 1) -> None:
    rc = run_replicates(cfg.scenario(), cfg.sigma2, workers=workers)
    _warn_failures(rc)
    tr = rc.trace
    loss = rc.per_replicate[Estimator.ADAPTIVE]

    def rows():
        for g, s2 in enumerate(rc.sigma2_grid):
            for k in range(rc.K):
                yield [float(s2), str(k), tr["sigma2_hat"][k, g], tr["nsr_hat"][k, g],
                       tr["F_breve"][k, g], tr["U_breve"][k, g], tr["F_breve_raw"][k, g],
                       tr["chosen"][k, g] or "", loss[k, g]]

    _write(out, ADAPTIVE_HEADER, rows() if len(rc.sigma2_grid) else [])


def _warn_failures(rc) -> None:
    for s2, f in zip(rc.sigma2_grid, rc.failures):
        if f:
            print(f"warning: sigma2={s2:g}: {f} of {rc.K} replicates failed", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sslglm", description="Semi-supervised GLM thresholds and risk simulations.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("thresholds", "estimate threshold values from an unlabelled pool"),
                        ("simulate", "replicated supervised simulation of risk curves"),
                        ("adaptive", "per-replicate trace of the adaptive choice")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", metavar="PATH", help="INI scenario file (default: Gaussian constant-beta)")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--out", metavar="PATH", help="CSV output path (default stdout)")
        p.add_argument("--replicates", type=int, metavar="K", help="training replicates")
        p.add_argument("--pool-size", type=int, metavar="M", help="frozen pool size")
        p.add_argument("--mc-replicates", type=int, metavar="B", help="Monte Carlo covariate matrices")
        p.add_argument("--full-scale", action="store_true", help="K=5000, M=50000, m=5000, n=50")
        p.add_argument("--workers", type=int, default=1, help="worker processes for replicates")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ScenarioConfig()
        cfg = apply_overrides(cfg, args)
        if args.command == "thresholds":
            cmd_thresholds(cfg, args.out)
        elif args.command == "simulate":
            cmd_simulate(cfg, args.out, args.workers)
        else:
            cmd_adaptive(cfg, args.out, args.workers)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
