import csv
import json

import numpy as np
import pytest

from icseg.cli import main
from icseg.volume import LabelMap, load_metaimage

FAST = {
    "registration.pyramid_levels": 1,
    "registration.refinement_cycles_per_level": 1,
    "registration.max_outer_iterations": 1,
    "registration.label_steps": 1,
}


@pytest.fixture(scope="module")
def population(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    code = main(["phantom", "--out", str(out), "--preset", "strong", "--seed", "3",
                 "--num-subjects", "3", "--dims", "24", "24", "24", "--deform-max-mm", "2"])
    assert code == 0
    return out


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_phantom_manifest(population):
    man = json.loads((population / "manifest.json").read_text())
    assert man["preset"] == "strong" and len(man["subjects"]) == 3
    assert man["spec"]["dims"] == [24, 24, 24]


def test_run_cosegment_outputs_and_determinism(population, tmp_path):
    cfg = {"manifest": str(population / "manifest.json"), **FAST}
    path = _write(tmp_path, cfg)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--config", path, "--out", str(out), "--threads", "1" if name == "a" else "2",
                     "--trace", "--dump-fields"]) == 0
        outs.append(out)
    a, b = outs
    for k in range(3):
        fa = (a / f"fused_{k:02d}.mha").read_bytes()
        assert fa == (b / f"fused_{k:02d}.mha").read_bytes()
        assert isinstance(load_metaimage(a / f"fused_{k:02d}.mha"), LabelMap)
        assert (a / f"field_{k:02d}.mha").exists()
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    report = json.loads((a / "report.json").read_text())
    assert report["mode"] == "cosegment"
    assert report["config"]["lambda"] == 5.0 and "workers" not in report["config"]
    assert all(s["final_energy"] <= s["initial_energy"] + 1e-9 for s in report["solves"])
    with open(a / "energy_trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["iteration", "target"] and len(rows) == 1 + len(report["solves"])
    timings = json.loads((a / "timings.json").read_text())
    assert timings["threads"] == 1


def test_run_oracle_and_pairwise_modes(population, tmp_path):
    for mode in ("oracle", "pairwise"):
        cfg = {"manifest": str(population / "manifest.json"), "mode": mode, "target": 1, **FAST}
        out = tmp_path / mode
        assert main(["run", "--config", _write(tmp_path, cfg, f"{mode}.json"), "--out", str(out)]) == 0
        assert (out / "fused_01.mha").exists()
        assert not (out / "fused_00.mha").exists()
        rows = (out / "metrics.csv").read_text().splitlines()
        assert rows[2].startswith("subject01,")


def test_dry_run_does_not_compute(population, tmp_path):
    cfg = {"manifest": str(population / "manifest.json")}
    out = tmp_path / "dry"
    assert main(["run", "--config", _write(tmp_path, cfg), "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()


def test_config_errors_exit_1(population, tmp_path, capsys):
    bad = {"manifest": str(population / "manifest.json"), "registration.lamda": 3}
    assert main(["run", "--config", _write(tmp_path, bad), "--out", str(tmp_path / "x")]) == 1
    assert "registration.lamda" in capsys.readouterr().err
    neg = {"manifest": str(population / "manifest.json"), "registration.lambda": -1}
    assert main(["run", "--config", _write(tmp_path, neg, "n.json"), "--out", str(tmp_path / "x")]) == 1
    mode = {"manifest": str(population / "manifest.json"), "mode": "groupwise"}
    assert main(["run", "--config", _write(tmp_path, mode, "m.json"), "--out", str(tmp_path / "x")]) == 1
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["run", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "x")]) == 1


def test_io_errors_exit_2(population, tmp_path, capsys):
    cfg = {"images": ["missing_a.mha", "missing_b.mha"], "priors": ["p.mha", "q.mha"]}
    assert main(["run", "--config", _write(tmp_path, cfg), "--out", str(tmp_path / "x")]) == 2
    assert "missing_a.mha" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")]) == 2
    (tmp_path / "junk.mha").write_text("ObjectType = Image\n")
    cfg = {"images": ["junk.mha", "junk.mha"], "priors": ["junk.mha", "junk.mha"]}
    assert main(["run", "--config", _write(tmp_path, cfg, "j.json"), "--out", str(tmp_path / "y")]) == 2


def test_numerical_error_exit_3(population, monkeypatch, capsys):
    from icseg import cli
    from icseg.transform import InversionError

    def boom(pred, gt):
        raise InversionError("field inversion did not converge: residual 2.0 voxel at voxel (1, 2, 3)")

    monkeypatch.setattr(cli, "evaluate", boom)
    gt0 = str(population / "subject00_gt.mha")
    assert main(["eval", "--pred", gt0, "--gt", gt0, "--out", "unused.csv"]) == 3
    assert "voxel (1, 2, 3)" in capsys.readouterr().err


def test_eval_and_register(population, tmp_path):
    man = json.loads((population / "manifest.json").read_text())
    s = man["subjects"]
    out_csv = tmp_path / "m.csv"
    gt0 = str(population / s[0]["gt"])
    assert main(["eval", "--pred", gt0, "--gt", gt0, "--out", str(out_csv)]) == 0
    rows = list(csv.reader(out_csv.read_text().splitlines()[1:]))
    assert all(float(r[2]) == 1.0 and float(r[3]) == 0.0 for r in rows[1:])

    cfg = _write(tmp_path, FAST, "fast.json")
    fused = tmp_path / "reg" / "fused.mha"
    argv = ["register", "--config", cfg, "--target", str(population / s[0]["image"]),
            "--atlas", str(population / s[1]["image"]), str(population / s[1]["gt"]),
            "--atlas", str(population / s[2]["image"]), str(population / s[2]["gt"]),
            "--out", str(fused)]
    assert main(argv) == 0
    lab = load_metaimage(fused)
    assert isinstance(lab, LabelMap) and set(np.unique(lab.data)) <= {0, 1, 2, 3}
