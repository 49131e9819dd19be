import re
import subprocess
import sys
import time

import numpy as np
import pytest
from PIL import Image

from osteovox.cli import build_parser, main
from osteovox.dataset import read_evolution, read_header, write_evolution
from osteovox.degradation import EvolutionSequence
from osteovox.transvnet import ModelConfig, TransVNet, save_model
from osteovox.voxel import VoxelGrid

ROWS = """1,1,0.4,20,5,10,0,1,0.01,0.6
2,1,0.3,10,3,5,1,1,0.0,0.8
3,1,0.25,30,0,1,0,0,0.02,0.5
"""

TINY = ModelConfig(input_resolution=16, cnn_downscalings=2, cnn_channels=4, patch_size=2, hidden_dim=8, n_layers=1,
                   n_heads=2, mlp_dim=16, decoder_channels=(8, 4, 4))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_blocks(directory, counts, n=10, frames=1):
    directory.mkdir(parents=True, exist_ok=True)
    for i, count in enumerate(counts):
        arr = np.zeros(n ** 3, dtype=np.uint8)
        arr[:count] = 1
        grid = VoxelGrid(arr.reshape((n, n, n)))
        write_evolution(EvolutionSequence([grid] * frames), directory / f"s{i:03d}.ovxe")


def subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return action.choices


# help and usage -----------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["generate", "degrade", "build-dataset", "train", "eval", "predict", "export"])
def test_help_lists_every_flag(name, capsys):
    with pytest.raises(SystemExit) as info:
        main([name, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    flags = [s for a in subparsers()[name]._actions for s in a.option_strings if s.startswith("--")]
    assert flags
    for flag in flags:
        assert flag in text


def test_usage_errors_exit_one(capsys):
    for argv in ([], ["nonsense"], ["generate"], ["generate", "--params", "x", "--out", "y", "--bogus"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 1
    code, _, err = run(capsys, "degrade", "--in", ".", "--months", 37)
    assert code == 1 and "months" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "osteovox.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "build-dataset" in proc.stdout


# generate / degrade ------------------------------------------------------------------------

def test_generate_three_rows_deterministic(tmp_path, capsys):
    csv = tmp_path / "rows.csv"
    csv.write_text(ROWS)
    code, out, _ = run(capsys, "generate", "--params", csv, "--out", tmp_path / "a", "--seed", 4, "--dims", 32)
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 3
    files = sorted((tmp_path / "a").glob("*.ovxe"))
    assert [f.name for f in files] == ["sample_0001.ovxe", "sample_0002.ovxe", "sample_0003.ovxe"]
    m = re.match(r"id 1  vf (\S+)  clustering (\S+)  shortfall (yes|no)", lines[0])
    assert m and 0.38 <= float(m.group(1)) <= 0.42 and float(m.group(2)) == 1.0
    assert read_header(files[0])["n_timesteps"] == 1
    run(capsys, "generate", "--params", csv, "--out", tmp_path / "b", "--seed", 4, "--dims", 32)
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_generate_parallel_matches_serial(tmp_path, capsys, monkeypatch):
    csv = tmp_path / "rows.csv"
    csv.write_text(ROWS)
    run(capsys, "generate", "--params", csv, "--out", tmp_path / "a", "--dims", 24)
    monkeypatch.setenv("OSTEOVOX_THREADS", "2")
    code, _, _ = run(capsys, "generate", "--params", csv, "--out", tmp_path / "b", "--dims", 24, "--jobs", 1)
    assert code == 0
    for f in (tmp_path / "a").glob("*.ovxe"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_generate_bad_csv_exit_two(tmp_path, capsys):
    csv = tmp_path / "rows.csv"
    csv.write_text(ROWS + "4,1,0.4,abc,5,10,0,1,0.01,0.6\n")
    code, _, err = run(capsys, "generate", "--params", csv, "--out", tmp_path / "o", "--dims", 16)
    assert code == 2 and "line 4" in err
    code, _, _ = run(capsys, "generate", "--params", tmp_path / "missing.csv", "--out", tmp_path / "o")
    assert code == 2


def test_degrade_months(tmp_path, capsys):
    write_blocks(tmp_path / "d", [300, 400])
    before = {f.name: f.read_bytes() for f in (tmp_path / "d").glob("*.ovxe")}
    code, out, _ = run(capsys, "degrade", "--in", tmp_path / "d", "--months", 0)
    assert code == 0 and len(out.strip().splitlines()) == 2
    for f in (tmp_path / "d").glob("*.ovxe"):
        assert f.read_bytes() == before[f.name]
    code, out, _ = run(capsys, "degrade", "--in", tmp_path / "d", "--months", 3, "--seed", 1)
    assert code == 0
    first = {f.name: f.read_bytes() for f in (tmp_path / "d").glob("*.ovxe")}
    for f in (tmp_path / "d").glob("*.ovxe"):
        assert len(read_evolution(f)) == 4
    # rerunning from the first frame with the same seed reproduces the files
    run(capsys, "degrade", "--in", tmp_path / "d", "--months", 3, "--seed", 1)
    assert first == {f.name: f.read_bytes() for f in (tmp_path / "d").glob("*.ovxe")}


def test_degrade_36_months_loss(tmp_path, capsys):
    csv = tmp_path / "rows.csv"
    csv.write_text(ROWS.splitlines()[0] + "\n")
    run(capsys, "generate", "--params", csv, "--out", tmp_path / "g", "--dims", 40)
    code, out, _ = run(capsys, "degrade", "--in", tmp_path / "g")
    assert code == 0
    loss = float(out.split("cumulative loss")[1])
    assert abs(loss - 0.35) <= 0.05


def test_degrade_without_mineral_names_file(tmp_path, capsys):
    write_blocks(tmp_path / "d", [300, 0])
    code, _, err = run(capsys, "degrade", "--in", tmp_path / "d", "--months", 2)
    assert code == 2 and "s001.ovxe" in err


# dataset / eval / predict -----------------------------------------------------------------

def test_build_dataset_hundred_files(tmp_path, capsys):
    rng = np.random.default_rng(0)
    write_blocks(tmp_path / "c", rng.integers(200, 500, 100), frames=2)
    code, out, _ = run(capsys, "build-dataset", "--in", tmp_path / "c")
    assert code == 0
    assert out.strip() == "test 10 / val 14 / train 76"
    assert (tmp_path / "c" / "manifest.json").exists()


def test_build_dataset_too_few_files(tmp_path, capsys):
    write_blocks(tmp_path / "c", [300] * 4, frames=2)
    code, _, _ = run(capsys, "build-dataset", "--in", tmp_path / "c")
    assert code == 2


def test_eval_stubs(tmp_path, capsys):
    write_blocks(tmp_path / "c", np.random.default_rng(1).integers(200, 500, 20), frames=3)
    run(capsys, "build-dataset", "--in", tmp_path / "c")
    manifest = tmp_path / "c" / "manifest.json"
    code, out, _ = run(capsys, "eval", "--manifest", manifest, "--stub", "copy")
    assert code == 0 and out.strip() == "stub-copy  DSC 1.000000, HD 0.000000"
    code, out, _ = run(capsys, "eval", "--manifest", manifest, "--stub", "invert", "--label", "anti",
                       "--json", tmp_path / "r.json")
    assert code == 0 and out.startswith("anti  DSC 0.000000, HD ")
    assert '"dsc": 0.0' in (tmp_path / "r.json").read_text()
    code, _, _ = run(capsys, "eval", "--manifest", manifest)
    assert code == 1
    code, _, _ = run(capsys, "eval", "--manifest", tmp_path / "nope.json", "--stub", "copy")
    assert code == 2


def test_predict_rollout_frames(tmp_path, capsys):
    save_model(TransVNet.create(TINY, 0), tmp_path / "model")
    grid = VoxelGrid((np.random.default_rng(2).random((16, 16, 16)) < 0.4).astype(np.uint8))
    write_evolution(EvolutionSequence([grid, grid]), tmp_path / "in.ovxe")
    code, _, _ = run(capsys, "predict", "--model", tmp_path / "model", "--in", tmp_path / "in.ovxe",
                     "--steps", 3, "--horizon", 4, "--out", tmp_path / "out.ovxe")
    assert code == 0
    out = read_evolution(tmp_path / "out.ovxe")
    assert len(out) == 4 and out.frames[0] == grid
    code, _, _ = run(capsys, "predict", "--model", tmp_path / "model", "--in", tmp_path / "in.ovxe",
                     "--frame", 5, "--out", tmp_path / "x.ovxe")
    assert code == 2
    write_evolution(EvolutionSequence([VoxelGrid.zeros((8, 8, 8))]), tmp_path / "small.ovxe")
    code, _, _ = run(capsys, "predict", "--model", tmp_path / "model", "--in", tmp_path / "small.ovxe",
                     "--out", tmp_path / "y.ovxe")
    assert code == 2


# export -----------------------------------------------------------------------------------

def test_export_slices(tmp_path, capsys):
    grid = VoxelGrid((np.random.default_rng(3).random((8, 8, 8)) < 0.5).astype(np.uint8))
    write_evolution(EvolutionSequence([grid]), tmp_path / "g.ovxe")
    code, _, _ = run(capsys, "export", "--in", tmp_path / "g.ovxe", "--mode", "slices", "--out", tmp_path / "s")
    assert code == 0
    pngs = sorted((tmp_path / "s").glob("*.png"))
    assert len(pngs) == 8
    for k, path in enumerate(pngs):
        img = np.array(Image.open(path))
        assert img.shape == (8, 8)
        assert set(np.unique(img)) <= {0, 255}
        # image rows run along x, columns along y
        assert np.array_equal(img == 255, grid.array[:, :, k].astype(bool))


def _faces(path):
    return [line for line in path.read_text().splitlines() if line.startswith("f ")]


def test_export_mesh(tmp_path, capsys):
    write_evolution(EvolutionSequence([VoxelGrid.zeros((4, 4, 4))]), tmp_path / "empty.ovxe")
    code, _, _ = run(capsys, "export", "--in", tmp_path / "empty.ovxe", "--mode", "mesh", "--out", tmp_path / "e.obj")
    assert code == 0 and _faces(tmp_path / "e.obj") == []
    arr = np.zeros((4, 4, 4), dtype=np.uint8)
    arr[1, 2, 3] = 1
    write_evolution(EvolutionSequence([VoxelGrid(arr)]), tmp_path / "one.ovxe")
    code, _, _ = run(capsys, "export", "--in", tmp_path / "one.ovxe", "--mode", "mesh", "--out", tmp_path / "o.obj")
    assert code == 0 and len(_faces(tmp_path / "o.obj")) == 12
    verts = [line for line in (tmp_path / "o.obj").read_text().splitlines() if line.startswith("v ")]
    assert len(verts) == 8
    code, _, _ = run(capsys, "export", "--in", tmp_path / "one.ovxe", "--frame", 1, "--out", tmp_path / "z")
    assert code == 2


# pipeline --------------------------------------------------------------------------------

@pytest.mark.slow
def test_pipeline_smoke(tmp_path, capsys):
    # twelve rows rather than four: build-dataset needs at least ten usable files
    rng = np.random.default_rng(5)
    rows = []
    for i in range(12):
        vf = rng.uniform(0.2, 0.5)
        rows.append(f"{i + 1},1,{vf:.3f},{int(rng.integers(5, 30))},2,5,0,1,0.01,{rng.uniform(0.4, 0.9):.3f}")
    (tmp_path / "rows.csv").write_text("\n".join(rows) + "\n")
    start = time.perf_counter()
    work = tmp_path / "work"
    assert run(capsys, "generate", "--params", tmp_path / "rows.csv", "--out", work, "--dims", 32)[0] == 0
    assert run(capsys, "degrade", "--in", work, "--months", 6)[0] == 0
    code, out, _ = run(capsys, "build-dataset", "--in", work)
    assert code == 0 and out.startswith("test ")
    code, out, _ = run(capsys, "train", "--manifest", work / "manifest.json", "--out", tmp_path / "run",
                       "--config", "toy", "--steps-per-epoch", 50)
    assert code == 0
    assert len((tmp_path / "run" / "loss.csv").read_text().splitlines()) == 51
    code, out, _ = run(capsys, "eval", "--manifest", work / "manifest.json", "--model", tmp_path / "run" / "model")
    assert code == 0 and re.match(r"model  DSC [01]\.\d{6}, HD \d+\.\d{6}", out)
    assert time.perf_counter() - start < 15 * 60
