import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from probcontour import cli, data
from probcontour.encoder import load_checkpoint
from probcontour.inference import chi2_2dof_quantile

CONFIG = {
    "seed": 3,
    "mode": "probabilistic",
    "synth": {"count": 40, "image_size": [24, 24], "vertex_count": 12, "radius_range": [5, 7],
              "thickness_range": [2, 3], "harmonic_amplitudes": [0.5, 0.8, 0.5, 0.3]},
    "train": {"n_components": 4, "epochs": 2, "widths": [3, 3, 3], "learning_rate": 1e-3, "checkpoint_every": 1},
    "loss": {"lambda": 100.0},
}


def _write_cfg(path, **overrides):
    doc = json.loads(json.dumps(CONFIG))
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        if name:
            doc[section][name] = value
        else:
            doc[section] = value
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "cfg.json")
    assert cli.main(["--config", cfg, "synth", "--out", str(root / "data")]) == 0
    assert cli.main(["--config", cfg, "train", "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root, cfg


def _tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_writes_manifest_and_items(run):
    root, _ = run
    ds = data.load(root / "data")
    assert len(ds.ids) == 40
    assert (root / "data" / "manifest.json").exists() and (root / "data" / "run.json").exists()


def test_synth_is_reproducible(run, tmp_path):
    root, cfg = run
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert _tree_bytes(tmp_path / "again") == _tree_bytes(root / "data")


def test_missing_seed_exit_2_with_path(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"mode": "probabilistic"}))
    assert cli.main(["--config", str(p), "synth", "--out", str(tmp_path / "x")]) == 2
    assert "config error at $" in capsys.readouterr().err


def test_unknown_key_rejected_with_path(tmp_path, capsys):
    p = _write_cfg(tmp_path / "bad.json", train__epochz=3)
    assert cli.main(["--config", p, "synth", "--out", str(tmp_path / "x")]) == 2
    assert "$.train" in capsys.readouterr().err


def test_bad_type_and_usage_exit_2(tmp_path, capsys):
    p = _write_cfg(tmp_path / "bad.json", loss__sigma2=-1)
    assert cli.main(["--config", p, "synth", "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["--config", str(tmp_path / "absent.json"), "synth", "--out", str(tmp_path / "x")]) == 2


def test_train_outputs(run):
    root, _ = run
    out = root / "run"
    for name in ("train_log.csv", "run.json", "checkpoint/manifest.json", "checkpoint/shape_model.json",
                 "last/optimizer.bin"):
        assert (out / name).exists(), name
    lines = (out / "train_log.csv").read_text().splitlines()
    assert len(lines) == 3
    manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
    assert len(set(manifest["split_sha256"].values())) == 3


def test_train_direct_vertex_head_dim(run, tmp_path):
    root, _ = run
    cfg = _write_cfg(tmp_path / "dv.json", mode="direct-vertex", train__epochs=1)
    assert cli.main(["--config", cfg, "train", "--data", str(root / "data"), "--out", str(tmp_path / "dv")]) == 0
    _, manifest = load_checkpoint(tmp_path / "dv" / "checkpoint")
    assert manifest["head_dim"] == 24


def test_train_bit_identical(run, tmp_path):
    root, cfg = run
    assert cli.main(["--config", cfg, "train", "--data", str(root / "data"), "--out", str(tmp_path / "again")]) == 0
    for sub in ("checkpoint", "last"):
        assert _tree_bytes(tmp_path / "again" / sub) == _tree_bytes(root / "run" / sub)


def test_resume_continues_step_counter(run, tmp_path):
    root, cfg = run
    cfg4 = _write_cfg(tmp_path / "c4.json", train__epochs=4)
    assert cli.main(["--config", cfg4, "train", "--data", str(root / "data"), "--out", str(tmp_path / "full")]) == 0
    # resume a copy of the 2-epoch run up to 4 epochs
    part = tmp_path / "part"
    for rel, raw in _tree_bytes(root / "run").items():
        (part / rel).parent.mkdir(parents=True, exist_ok=True)
        (part / rel).write_bytes(raw)
    assert cli.main(["--config", cfg4, "train", "--data", str(root / "data"), "--out", str(part),
                     "--resume", str(part / "last")]) == 0
    _, m = load_checkpoint(part / "last")
    _, m_full = load_checkpoint(tmp_path / "full" / "last")
    assert m["epoch"] == 4 and m["step"] == m_full["step"]
    assert (part / "last" / "params.bin").read_bytes() == (tmp_path / "full" / "last" / "params.bin").read_bytes()
    steps = [int(l.split(",")[1]) for l in (part / "train_log.csv").read_text().splitlines()[1:]]
    assert steps == sorted(steps) and len(steps) == 4


def test_eval_table_and_csv(run, tmp_path, capsys):
    root, _ = run
    ck = str(root / "run" / "checkpoint")
    out = tmp_path / "t.csv"
    assert cli.main(["eval", "--checkpoint", ck, ck, ck, "--data", str(root / "data"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "probPCA 4" in text and "population std" in text
    assert len(out.read_text().splitlines()) == 4


def test_eval_missing_split_exit_3(run):
    root, _ = run
    assert cli.main(["eval", "--checkpoint", str(root / "run" / "checkpoint"), "--data", str(root / "data"),
                     "--split", "nope"]) in (2, 3)


def test_sample_zero_draws_is_mean_only(run, tmp_path):
    root, _ = run
    out = tmp_path / "p.json"
    args = ["sample", "--checkpoint", str(root / "run" / "checkpoint"), "--data", str(root / "data"), "--id", "s0001"]
    assert cli.main(args + ["--n", "0", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["samples"] == [] and len(doc["mean"]) == 24
    assert len(doc["reference_mahalanobis2"]) == 12


def test_sample_seed_reproducible(run, tmp_path):
    root, _ = run
    args = ["sample", "--checkpoint", str(root / "run" / "checkpoint"), "--data", str(root / "data"), "--id", "s0002",
            "--n", "5"]
    assert cli.main(args + ["--seed", "7", "--out", str(tmp_path / "a.json")]) == 0
    assert cli.main(args + ["--seed", "7", "--out", str(tmp_path / "b.json")]) == 0
    assert cli.main(args + ["--seed", "8", "--out", str(tmp_path / "c.json")]) == 0
    a, b, c = (json.loads((tmp_path / f"{x}.json").read_text())["samples"] for x in "abc")
    assert a == b and a != c


def test_sample_stats_within_three_se(run, tmp_path):
    root, _ = run
    out = tmp_path / "s.json"
    assert cli.main(["sample", "--checkpoint", str(root / "run" / "checkpoint"), "--data", str(root / "data"),
                     "--id", "s0003", "--n", "100000", "--stats", "--keep", "2", "--out", str(out)]) == 0
    stats = json.loads(out.read_text())["stats"]
    assert stats["n"] == 100000 and stats["within_3se"]


def test_sample_unknown_id_exit_2(run):
    root, _ = run
    assert cli.main(["sample", "--checkpoint", str(root / "run" / "checkpoint"), "--data", str(root / "data"),
                     "--id", "zzz"]) == 2


@pytest.fixture(scope="module")
def prediction(run):
    root, _ = run
    out = root / "pred.json"
    assert cli.main(["sample", "--checkpoint", str(root / "run" / "checkpoint"), "--data", str(root / "data"),
                     "--id", "s0004", "--n", "3", "--out", str(out)]) == 0
    return root, out


def test_plot_svg_structure_and_determinism(prediction, tmp_path):
    root, pred = prediction
    args = ["plot", "--prediction", str(pred), "--image", str(root / "data" / "img_s0004.pgm"), "--samples"]
    assert cli.main(args + ["--out", str(tmp_path / "a.svg")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.svg")]) == 0
    raw = (tmp_path / "a.svg").read_bytes()
    assert raw == (tmp_path / "b.svg").read_bytes()
    svg = ET.fromstring(raw)
    ns = {"s": "http://www.w3.org/2000/svg"}
    assert svg.get("version") == "1.1"
    groups = {g.get("id"): g for g in svg.findall("s:g", ns)}
    assert set(groups) == {"image", "samples", "reference", "mean", "ellipses"}
    assert len(groups["image"]) == 24 * 24 and len(groups["samples"]) == 3
    assert groups["reference"][0].get("stroke") == "#ff0000" and groups["mean"][0].get("stroke") == "#00ffff"
    ellipses = groups["ellipses"].findall("s:ellipse", ns)
    assert len(ellipses) == 6 * 3  # every other of 12 vertices, three levels
    by_vertex = {}
    for e in ellipses:
        by_vertex.setdefault(e.get("data-vertex"), []).append(float(e.get("rx")))
    assert all(a < b < c for a, b, c in by_vertex.values())


def test_plot_isotropic_draws_circles(tmp_path):
    doc = {"mean": [5.0, 5.0, 8.0, 5.0, 6.0, 8.0], "sigma2": 0.5, "latent_cov": [0.0],
           "factor": [[1.0], [0.0], [0.0], [1.0], [1.0], [1.0]]}
    (tmp_path / "p.json").write_text(json.dumps(doc))
    assert cli.main(["plot", "--prediction", str(tmp_path / "p.json"), "--every", "1", "--out", str(tmp_path / "c.svg")]) == 0
    svg = ET.parse(tmp_path / "c.svg").getroot()
    ellipses = svg.iter("{http://www.w3.org/2000/svg}ellipse")
    strokes = set()
    for e in ellipses:
        assert e.get("rx") == e.get("ry")
        strokes.add(e.get("stroke"))
        level = float(e.get("data-level"))
        assert float(e.get("rx")) == pytest.approx(8.0 * np.sqrt(0.5 * chi2_2dof_quantile(level)), abs=1e-3)
    assert len(strokes) == 1


def test_plot_missing_fields_exit_2(tmp_path, capsys):
    (tmp_path / "p.json").write_text(json.dumps({"mean": [1.0, 2.0]}))
    assert cli.main(["plot", "--prediction", str(tmp_path / "p.json"), "--out", str(tmp_path / "x.svg")]) == 2
    assert "latent_cov" in capsys.readouterr().err
    assert not (tmp_path / "x.svg").exists()


def test_fit_pca_verb(run, tmp_path):
    root, cfg = run
    assert cli.main(["--config", cfg, "fit-pca", "--data", str(root / "data"), "--k", "3", "--out", str(tmp_path / "m.json")]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["num_components"] == 3
    assert cli.main(["--config", cfg, "fit-pca", "--data", str(root / "data"), "--k", "999", "--out", str(tmp_path / "m.json")]) == 2
