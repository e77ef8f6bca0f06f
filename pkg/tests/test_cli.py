import json
import pytest

from mdfsc import autoencoder as ae
from mdfsc import cli, sparse
from mdfsc.errors import NumericError

TINY = """
seed = 5
image_size = 32
[synth]
n_normal = 10
n_anomalous = 5
size = 32
[ae]
epochs = 1
batch = 4
crop = 32
[features]
budget_per_image = 6
[sparse]
n_atoms = 4
max_outer = 3
[paths]
manifest = "data/manifest.tsv"
checkpoint = "out/model.ckpt"
dictionary = "out/dict.bin"
reports = "out/reports.jsonl"
metrics = "out/metrics.json"
run_log = "out/run.log"
"""


@pytest.fixture
def ws(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("MDFSC_SEED", raising=False)
    (tmp_path / "c.toml").write_text(TINY)
    return tmp_path


def run(*args):
    return cli.main([args[0], "--config", "c.toml", *args[1:]])


def test_synth_counts_and_determinism(ws):
    assert run("synth") == 0
    lines = (ws / "data/manifest.tsv").read_text().splitlines()
    assert len(lines) == 15 and sum(l.endswith("\tanomalous") for l in lines) == 5
    first = {p.name: p.read_bytes() for p in (ws / "data/images").iterdir()}
    manifest = (ws / "data/manifest.tsv").read_bytes()
    assert run("synth") == 0
    assert (ws / "data/manifest.tsv").read_bytes() == manifest
    assert {p.name: p.read_bytes() for p in (ws / "data/images").iterdir()} == first


def test_synth_without_anomalies(ws):
    assert run("synth", "--synth.n_anomalous=0") == 0
    assert all(l.endswith("\tnormal") for l in (ws / "data/manifest.tsv").read_text().splitlines())


def test_pipeline_end_to_end_and_reruns(ws):
    assert run("synth") == 0
    assert run("train-ae") == 0
    ck1 = (ws / "out/model.ckpt").read_bytes()
    assert run("train-ae") == 0
    assert (ws / "out/model.ckpt").read_bytes() == ck1

    assert run("fit-dict") == 0
    d1 = (ws / "out/dict.bin").read_bytes()
    assert run("fit-dict") == 0
    assert (ws / "out/dict.bin").read_bytes() == d1
    D = sparse.load_dict(ws / "out/dict.bin")
    assert D.meta["n_atoms"] == 4 and D.meta["objective_trace"]
    assert D.meta["model_digest"] == ae.load(ws / "out/model.ckpt").digest

    assert run("score") == 0
    r1 = (ws / "out/reports.jsonl").read_text()
    assert run("score") == 0
    assert (ws / "out/reports.jsonl").read_text() == r1
    rows = [json.loads(l) for l in r1.splitlines()]
    assert len(rows) == 7  # 2 held-out normals + 5 anomalies
    assert run("eval", "--paths.roc_csv=out/roc.csv") == 0
    m = json.loads((ws / "out/metrics.json").read_text())
    assert m["n"] == 7 and m["n_pos"] == 5 and 0 <= m["auc"] <= 1 and 0 < m["ap"] <= 1
    assert (ws / "out/roc.csv").read_text().startswith("fpr,tpr")

    log = (ws / "out/run.log").read_text()
    assert "# ---- mdfsc fit-dict" in log and "n_atoms = 4" in log


def test_zero_epochs_checkpoint_loads(ws):
    run("synth")
    assert run("train-ae", "--ae.epochs=0") == 0
    assert ae.load(ws / "out/model.ckpt").arch.stage_widths == ae.DESK_WIDTHS


def test_budget_one_single_image(ws):
    run("synth", "--synth.n_normal=1", "--synth.n_anomalous=0", "--split.train_fraction=1.0")
    run("train-ae", "--split.train_fraction=1.0", "--ae.epochs=0")
    assert run("fit-dict", "--split.train_fraction=1.0", "--features.budget_per_image=1") == 0
    assert sparse.load_dict(ws / "out/dict.bin").meta["m"] == 1


def test_anomalous_only_manifest_refused(ws, capsys):
    (ws / "data").mkdir()
    (ws / "data/manifest.tsv").write_text("x.png\tanomalous\n")
    assert run("train-ae") == cli.EXIT_DATA
    assert "no normal images" in capsys.readouterr().err


def test_recon_scorer_route(ws):
    run("synth")
    run("train-ae", "--ae.with_linear_head=false", "--paths.checkpoint=out/recon.ckpt")
    assert run("score", "--scorer", "recon", "--paths.checkpoint=out/recon.ckpt") == 0
    rows = [json.loads(l) for l in (ws / "out/reports.jsonl").read_text().splitlines()]
    assert rows and all(r["scorer"] == "recon" and r["dict_digest"] is None for r in rows)
    assert run("eval") == 0


def test_recon_scorer_rejects_head_model(ws):
    run("synth")
    run("train-ae")
    assert run("score", "--scorer", "recon") == cli.EXIT_DATA  # every image fails


def test_dictionary_model_mismatch(ws, capsys, monkeypatch):
    run("synth")
    run("train-ae")
    run("fit-dict")
    monkeypatch.setenv("MDFSC_SEED", "6")
    run("train-ae")
    assert run("score") == cli.EXIT_CONFIG
    assert "fitted on model" in capsys.readouterr().err


def test_eval_errors(ws, capsys):
    run("synth")
    (ws / "out").mkdir(exist_ok=True)
    (ws / "out/reports.jsonl").write_text("")
    assert run("eval") == cli.EXIT_DATA
    (ws / "out/reports.jsonl").write_text(json.dumps({"id": "ghost", "score": 1.0}) + "\n")
    assert run("eval") == cli.EXIT_DATA
    assert "ghost" in capsys.readouterr().err


def test_config_errors(ws):
    assert run("synth", "--nope.key=1") == cli.EXIT_CONFIG
    assert run("synth", "--features.patch=12") == cli.EXIT_CONFIG
    assert run("synth", "--ae.epochs=abc") == cli.EXIT_CONFIG
    assert cli.main(["synth", "--config", "missing.toml"]) == cli.EXIT_CONFIG
    (ws / "bad.toml").write_text("seed = = 3")
    assert cli.main(["synth", "--config", "bad.toml"]) == cli.EXIT_CONFIG


def test_numeric_failure_exit_code(ws, monkeypatch):
    run("synth")

    def boom(*a, **k):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(cli.ae, "train", boom)
    assert run("train-ae") == cli.EXIT_NUMERIC


def test_resolution_order(ws):
    cfg = cli.resolve_config("c.toml", [], env={"MDFSC_SEED": "77"})
    assert cfg["seed"] == 77 and cfg["image_size"] == 32 and cfg["scoring"]["k"] == 5
    cfg = cli.resolve_config("c.toml", ["seed=9", "sparse.alpha=2", "synth.kinds=[\"blur\"]"],
                             env={"MDFSC_SEED": "77"})
    assert cfg["seed"] == 9 and cfg["sparse"]["alpha"] == 2.0 and cfg["synth"]["kinds"] == ["blur"]


def test_resolved_config_reloads(ws, capsys):
    assert cli.main(["eval", "--config", "c.toml", "--print-config", "--sparse.alpha=0.5"]) == 0
    dumped = capsys.readouterr().out
    (ws / "resolved.toml").write_text(dumped)
    a = cli.resolve_config("resolved.toml", [], env={})
    b = cli.resolve_config("c.toml", ["sparse.alpha=0.5"], env={})
    assert a == b


def test_defaults_match_method_values():
    d = cli.DEFAULTS
    assert d["ae"]["lr"] == 1e-4 and d["ae"]["crop"] == 64
    assert d["features"]["patch"] == 16 and d["features"]["stride"] == 2
    assert d["sparse"]["n_atoms"] == 50 and d["sparse"]["alpha"] == 1.0
    assert d["scoring"]["k"] == 5 and d["image_size"] == 512
