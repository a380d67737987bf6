import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from conftest import path_mm, rect_mask
from dispenseforge.cli import main
from dispenseforge.config import Config
from dispenseforge.geometry import GridSpec, TargetArea, format_path, with_required_feedrate
from dispenseforge.io_formats import write_pgm
from dispenseforge.quality import evaluate

SMALL_CFG = """\
width_cells=24
height_cells=24
surrogate_epochs=1
process_epochs=2
oracle_every=1
oracle_val_areas=4
refine_steps=3
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.cfg"
    cfg.write_text(SMALL_CFG)
    assert run("datagen", "--n", 40, "--seed", 3, "--config", cfg, "--out", d / "data.dfd") == 0
    for cmd, name in (("pretrain-flow", "flow.dfw"), ("pretrain-void", "void.dfw"), ("train-process", "process.dfw")):
        assert run(cmd, "--data", d / "data.dfd", "--config", cfg, "--seed", 1, "--out-weights", d / name) == 0
    mask = rect_mask(GridSpec(24, 24), 6, 6, 18, 16)
    write_pgm(d / "rect.pgm", mask)
    return d


def test_datagen_single_record(tmp_path):
    assert run("datagen", "--n", 1, "--seed", 7, "--out", tmp_path / "a.dfd") == 0
    assert run("datagen", "--n", 1, "--seed", 7, "--out", tmp_path / "b.dfd") == 0
    assert (tmp_path / "a.dfd").read_bytes() == (tmp_path / "b.dfd").read_bytes()
    assert "count=1" in (tmp_path / "a.dfd.stats.txt").read_text()


def test_missing_required_flag(capsys):
    with pytest.raises(SystemExit) as info:
        main(["datagen", "--n", "1"])
    assert info.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_bad_config_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("sigma=1.5\nnot a pair\n")
    assert run("datagen", "--n", 1, "--config", cfg, "--out", tmp_path / "x.dfd") == 2
    assert "line 2" in capsys.readouterr().err


def test_train_process_without_surrogates(tmp_path, capsys):
    assert run("datagen", "--n", 2, "--out", tmp_path / "d.dfd") == 0
    code = run("train-process", "--data", tmp_path / "d.dfd", "--out-weights", tmp_path / "p.dfw")
    assert code == 3
    err = capsys.readouterr().err
    assert "flow.dfw" in err and "pretrain-flow" in err


def test_training_outputs(trained):
    header = "epoch,split,loss,oracle_J,coverage_mean,void_rate,ms_per_item"
    for name in ("flow", "void", "process"):
        assert (trained / f"{name}.dfw").exists()
        assert (trained / f"{name}.dfw.log.csv").read_text().splitlines()[0] == header
    assert len((trained / "process.dfw.validation.csv").read_text().splitlines()) == 3


def test_training_rerun_bit_identical(trained, tmp_path):
    cfg = trained / "small.cfg"
    out = tmp_path / "process.dfw"
    flags = ["--flow-weights", trained / "flow.dfw", "--void-weights", trained / "void.dfw"]
    assert run("train-process", "--data", trained / "data.dfd", "--config", cfg, "--seed", 1, "--out-weights", out, *flags) == 0
    for suffix in ("", ".log.csv", ".validation.csv"):
        assert (trained / f"process.dfw{suffix}").read_bytes() == (tmp_path / f"process.dfw{suffix}").read_bytes()


def test_infer_outputs(trained, tmp_path, capsys):
    cfg = trained / "small.cfg"
    args = ["infer", "--weights", trained / "process.dfw", "--area", trained / "rect.pgm", "--config", cfg]
    capsys.readouterr()
    assert run(*args, "--out-path", tmp_path / "a.path", "--render", tmp_path / "a.svg") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "coverage,objective,inference_ms" and float(out[1].split(",")[2]) < 1000
    assert run(*args, "--out-path", tmp_path / "b.path") == 0
    assert (tmp_path / "a.path").read_bytes() == (tmp_path / "b.path").read_bytes()
    root = ET.parse(tmp_path / "a.svg").getroot()
    line = [el for el in root.iter() if el.get("id") == "path"][0]
    assert line.tag.endswith("polyline") and len(line.get("points").split()) == 6


def test_infer_degenerate_output(trained, tmp_path):
    from dispenseforge.models import ProcessNet, read_model, write_model

    grid = GridSpec(24, 24)
    net = read_model(ProcessNet, trained / "process.dfw", grid)
    last = sorted(n for n, _ in net.named_parameters())[-1]
    for n, p in net.named_parameters():
        if n.split(".")[0] == last.split(".")[0]:
            p.data[...] = 0
    write_model(net, tmp_path / "zero.dfw", grid, {}, Config(width_cells=24, height_cells=24))
    out = tmp_path / "z.path"
    code = run("infer", "--weights", tmp_path / "zero.dfw", "--area", trained / "rect.pgm",
               "--config", trained / "small.cfg", "--out-path", out)  # fmt: skip
    assert code == 4
    assert len((tmp_path / "z.path.raw.txt").read_text().split()) == 12


def test_infer_missing_weights(trained, tmp_path):
    code = run("infer", "--weights", tmp_path / "none.dfw", "--area", trained / "rect.pgm", "--out-path", tmp_path / "p")
    assert code == 3


def test_simulate_matches_oracle(tmp_path, capsys):
    grid = GridSpec()
    area = TargetArea(rect_mask(grid, 10, 10, 12, 20), grid)
    path = with_required_feedrate(path_mm([(10.5, 11.0), (19.5, 11.0)] + [(19.5, 11.0)] * 4, grid), area)
    write_pgm(tmp_path / "a.pgm", area.mask)
    (tmp_path / "p.path").write_text(format_path(path, grid))
    capsys.readouterr()
    code = run("simulate", "--path", tmp_path / "p.path", "--area", tmp_path / "a.pgm",
               "--out-footprint", tmp_path / "fp.pgm", "--out-heights", tmp_path / "h.csv")  # fmt: skip
    assert code == 0
    row = capsys.readouterr().out.splitlines()[1]
    expected = evaluate(path, area)
    assert expected.objective == 0.0
    assert row == expected.to_csv_row()
    assert np.loadtxt(tmp_path / "h.csv", delimiter=",").shape == (64, 64)


def test_simulate_no_convergence(tmp_path):
    grid = GridSpec()
    area = TargetArea(rect_mask(grid, 16, 16, 48, 48), grid)
    write_pgm(tmp_path / "a.pgm", area.mask)
    path = with_required_feedrate(path_mm([(20, 20), (44, 44)] * 3, grid), area)
    (tmp_path / "p.path").write_text(format_path(path, grid))
    (tmp_path / "c.cfg").write_text("compress_max_iters=1\n")
    code = run("simulate", "--path", tmp_path / "p.path", "--area", tmp_path / "a.pgm", "--config", tmp_path / "c.cfg")
    assert code == 5


def test_refine_zero_steps(trained, tmp_path):
    grid = GridSpec(24, 24)
    start = tmp_path / "start.path"
    area = TargetArea(rect_mask(grid, 6, 6, 18, 16), grid)
    path = path_mm([(7, 7), (17, 7), (17, 10), (7, 10), (7, 14), (17, 14)], grid)
    start.write_text(format_path(with_required_feedrate(path, area), grid))
    code = run("refine", "--flow-weights", trained / "flow.dfw", "--void-weights", trained / "void.dfw",
               "--area", trained / "rect.pgm", "--path", start, "--steps", 0,
               "--config", trained / "small.cfg", "--out-path", tmp_path / "out.path")  # fmt: skip
    assert code == 0
    assert (tmp_path / "out.path").read_bytes() == start.read_bytes()


def test_evaluate_report(trained, tmp_path):
    out = tmp_path / "eval"
    code = run("evaluate", "--weights", trained / "process.dfw", "--testset", trained / "data.dfd",
               "--config", trained / "small.cfg", "--out-dir", out)  # fmt: skip
    assert code == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert len(lines) == 2 + 4
    body = np.array([[float(v) for v in ln.split(",")[1:5]] for ln in lines[1:-1]])
    assert [float(v) for v in lines[-1].split(",")[1:5]] == [float(np.mean(body[:, k])) for k in range(4)]
    assert len(list((out / "overlays").glob("*.svg"))) == 4


def test_help_lists_subcommands():
    res = subprocess.run([sys.executable, "-m", "dispenseforge.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("datagen", "pretrain-flow", "pretrain-void", "train-process", "infer", "evaluate", "simulate", "refine"):
        assert cmd in res.stdout
