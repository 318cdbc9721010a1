import csv
import io
import subprocess
import sys
from pathlib import Path

import pytest

from sslglm.cli import (
    ADAPTIVE_HEADER,
    SIMULATE_HEADER,
    THRESHOLDS_HEADER,
    ConfigError,
    load_config,
    main,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = """\
[scenario]
mode = {mode}
n = 12
m = 200
pool_size = 1000
replicates = 4
seed = 3

[covariates]
family = uniform
p = 4
blocks = 2
rho = 0.5

[mean]
beta = 1.0
beta_grid = 0.5, 1.0
delta = 0.4
link = elu

[grid]
sigma2 = 0, 2, 8

[mc]
replicates = 100
"""


def _cfg(tmp_path, mode="linear-constant", text=None):
    path = tmp_path / f"{mode}.ini"
    path.write_text(text if text is not None else TINY.format(mode=mode))
    return path


def _read(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.mark.parametrize("mode", ["linear-constant", "linear-random", "misspecified", "glm"])
def test_thresholds_csv(tmp_path, mode):
    out = tmp_path / "t.csv"
    assert main(["thresholds", "--config", str(_cfg(tmp_path, mode)), "--out", str(out)]) == 0
    rows = _read(out)
    assert rows[0] == THRESHOLDS_HEADER
    assert len(rows) == (2 if mode == "linear-random" else 3)
    if mode == "linear-random":
        assert rows[1][0] == ""


@pytest.mark.parametrize("mode", ["linear-constant", "glm"])
def test_simulate_csv_is_byte_stable(tmp_path, mode):
    cfg = _cfg(tmp_path, mode)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["simulate", "--config", str(cfg), "--out", str(b), "--workers", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = _read(a)
    assert rows[0] == SIMULATE_HEADER
    assert len(rows) == 1 + 3 * 5
    assert [float(r[0]) for r in rows[1::5]] == [0.0, 2.0, 8.0]


def test_seed_flag_changes_output(tmp_path):
    cfg = _cfg(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["simulate", "--config", str(cfg), "--out", str(a)])
    main(["simulate", "--config", str(cfg), "--out", str(b), "--seed", "9"])
    assert a.read_bytes() != b.read_bytes()


def test_adaptive_trace(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["adaptive", "--config", str(_cfg(tmp_path)), "--out", str(out), "--replicates", "3"]) == 0
    rows = _read(out)
    assert rows[0] == ADAPTIVE_HEADER
    assert len(rows) == 1 + 3 * 3
    assert {r[7] for r in rows[1:]} <= {"hat", "breve", "null"}


def test_stdout_output(capsys):
    assert main(["thresholds", "--mc-replicates", "50", "--pool-size", "2000"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == THRESHOLDS_HEADER
    assert float(rows[1][5]) == pytest.approx(248.4)


@pytest.mark.parametrize("edit, where", [
    (("family = uniform", "family = cauchy"), "[covariates] family"),
    (("n = 12", "n = 3"), "[scenario] n"),
    (("rho = 0.5", "rho = 1.5"), "[covariates] rho"),
    (("sigma2 = 0, 2, 8", "sigma2 = 0, -2"), "[grid] sigma2"),
    (("p = 4", "p = four"), "[covariates] p"),
    (("link = elu", "link = probit"), "[mean] link"),
    (("seed = 3", "seed = 3\nbogus = 1"), "[scenario] bogus"),
])
def test_config_errors_name_the_line(tmp_path, edit, where):
    text = TINY.format(mode="glm").replace(*edit)
    path = _cfg(tmp_path, text=text)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    msg = str(info.value)
    key = where.split()[-1]
    line = next(i for i, l in enumerate(text.splitlines(), 1) if l.strip().startswith(key + " "))
    assert f"{path}:{line}: {where}:" in msg


def test_bad_config_exit_code(tmp_path, capsys):
    path = _cfg(tmp_path, text="[covariates]\np = 5\nblocks = 2\n")
    assert main(["thresholds", "--config", str(path)]) == 2
    assert "blocks" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.ini")]) == 2


def test_overrides(tmp_path):
    from sslglm.cli import apply_overrides, build_parser
    args = build_parser().parse_args(["simulate", "--replicates", "7", "--pool-size", "900",
                                      "--mc-replicates", "11", "--seed", "5"])
    cfg = apply_overrides(load_config(_cfg(tmp_path)), args)
    assert (cfg.replicates, cfg.pool_size, cfg.mc_replicates, cfg.seed) == (7, 900, 11, 5)
    full = apply_overrides(load_config(_cfg(tmp_path)), build_parser().parse_args(["simulate", "--full-scale"]))
    assert (full.replicates, full.pool_size, full.m, full.n) == (5000, 50_000, 5000, 50)
    with pytest.raises(ConfigError):
        apply_overrides(load_config(_cfg(tmp_path)), build_parser().parse_args(["simulate", "--replicates", "0"]))


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.ini")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.scenario().replicates == 1000


def test_module_entry_point(tmp_path):
    out = tmp_path / "x.csv"
    r = subprocess.run([sys.executable, "-m", "sslglm", "thresholds", "--config", str(_cfg(tmp_path)),
                        "--out", str(out)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert _read(out)[0] == THRESHOLDS_HEADER
