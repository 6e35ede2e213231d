"""Command-line surface: config schema, dotted overrides, determinism of
the gen/eval/run wrappers, provenance stamping, and machine-readable errors.

Commands are invoked in-process through ``main`` with throwaway output
directories; scene counts and iteration budgets are kept tiny so the whole
file stays in smoke territory.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from garmentlab import cli
from garmentlab.io import read_json

SMALL = ["--simgen.n_suspended", "1", "--simgen.n_table", "1",
         "--simgen.image_size", "[64, 96]", "--simgen.mesh_density", "300"]


def run_cli(args, capsys=None):
    code = cli.main(args)
    if capsys is None:
        return code, None
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if out else None)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = root / "ds"
    assert cli.main(["gen", "--out", str(path), "--seed", "5"] + SMALL) == 0
    return path


# ---------------------------------------------------------------------------
# config machinery


def test_default_config_passes_validation():
    cfg = cli.default_config()
    assert cli.validate_config(cfg) is cfg
    assert cfg["schema_version"] == cli.SCHEMA_VERSION


@pytest.mark.parametrize("mutate", [
    lambda c: c.update(bogus=1),
    lambda c: c["planner"].update(bogus=1),
    lambda c: c["affordance"]["finetune"].update(nope=2),
    lambda c: c.update(schema_version=99),
    lambda c: c.update(seed="seven"),
    lambda c: c.update(seed=2 ** 63),
    lambda c: c.update(seed=True),
])
def test_invalid_configs_are_rejected(mutate):
    cfg = cli.default_config()
    mutate(cfg)
    with pytest.raises(cli.ConfigError):
        cli.validate_config(cfg)


def test_override_token_forms():
    pairs = cli.collect_overrides(["--descriptor.sigma", "2",
                                   "--planner.tau_aff=0.4"])
    assert pairs == [("descriptor.sigma", "2"), ("planner.tau_aff", "0.4")]
    with pytest.raises(cli.ConfigError):
        cli.collect_overrides(["--descriptor.sigma"])     # missing value
    with pytest.raises(cli.ConfigError):
        cli.collect_overrides(["--verbose", "1"])         # not dotted
    with pytest.raises(cli.ConfigError):
        cli.collect_overrides(["stray"])


def test_overrides_parse_json_values():
    cfg = cli.default_config()
    cli.apply_override(cfg, "descriptor.sigma", "2")
    cli.apply_override(cfg, "simgen.image_size", "[64, 96]")
    cli.apply_override(cfg, "planner.perception", "noisy")
    cli.apply_override(cfg, "planner.tactile_recovery", "false")
    assert cfg["descriptor"]["sigma"] == 2
    assert cfg["simgen"]["image_size"] == [64, 96]
    assert cfg["planner"]["perception"] == "noisy"
    assert cfg["planner"]["tactile_recovery"] is False
    with pytest.raises(cli.ConfigError):
        cli.apply_override(cfg, "planner.bogus", "1")
    with pytest.raises(cli.ConfigError):
        cli.apply_override(cfg, "nowhere.at.all", "1")


def test_sweep_grid_subtree_accepts_new_keys():
    cfg = cli.default_config()
    cli.apply_override(cfg, "eval.sweep.grid.sigma", "[1, 2]")
    assert cfg["eval"]["sweep"]["grid"]["sigma"] == [1, 2]
    cli.validate_config(cfg)


def test_config_file_merges_partially(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 9, "descriptor": {"dim": 8}}))
    cfg = cli.load_config(path, [("planner.tau_corr", "0.2")])
    assert cfg["seed"] == 9
    assert cfg["descriptor"]["dim"] == 8
    assert cfg["descriptor"]["sigma"] == 2.0      # untouched default
    assert cfg["planner"]["tau_corr"] == 0.2
    cfg2 = cli.load_config(path, [], seed=77)     # flag beats file
    assert cfg2["seed"] == 77
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"descriptor": {"wat": 1}}))
    with pytest.raises(cli.ConfigError):
        cli.load_config(bad, [])


def test_thread_cap_reads_environment(monkeypatch):
    monkeypatch.delenv("GARMENT_LAB_THREADS", raising=False)
    assert cli.thread_cap() is None
    monkeypatch.setenv("GARMENT_LAB_THREADS", "3")
    assert cli.thread_cap() == 3
    monkeypatch.setenv("GARMENT_LAB_THREADS", "0")
    with pytest.raises(cli.ConfigError):
        cli.thread_cap()


# ---------------------------------------------------------------------------
# commands


def test_gen_is_deterministic_and_stamped(dataset, tmp_path, capsys):
    code, out = run_cli(["gen", "--out", str(tmp_path / "again"),
                         "--seed", "5"] + SMALL, capsys)
    assert code == 0
    manifest = read_json(dataset / "manifest.json")
    again = read_json(tmp_path / "again" / "manifest.json")
    assert manifest == again
    prov = manifest["provenance"]
    assert prov["command"] == "gen" and prov["seed"] == 5
    assert len(prov["config_hash"]) == 12
    assert out["scenes"] == 2


def test_gen_seed_changes_the_manifest(dataset, tmp_path):
    assert cli.main(["gen", "--out", str(tmp_path / "other"),
                     "--seed", "6"] + SMALL) == 0
    a = read_json(dataset / "manifest.json")
    b = read_json(tmp_path / "other" / "manifest.json")
    assert a["scenes"][0]["files"] != b["scenes"][0]["files"]


def test_eval_oracle_stub_is_perfect(dataset, tmp_path, capsys):
    report_path = tmp_path / "eval.json"
    code, out = run_cli(["eval", "--model", "oracle",
                         "--dataset", str(dataset),
                         "--out", str(report_path),
                         "--eval.queries_per_scene", "15",
                         "--eval.region_queries_per_scene", "8"], capsys)
    assert code == 0
    assert out["correct_rate"] == 1.0
    report = read_json(report_path)
    assert report["region"]["wrong"] == 0
    assert report["auc"] == 1.0
    fr = report["forward_curve"]["fractions"]
    assert all(b >= a for a, b in zip(fr, fr[1:]))
    assert report["provenance"]["inputs"]["dataset"]
    csv = report_path.with_suffix(".csv").read_text().splitlines()
    assert csv[0] == "curve,threshold_px,fraction"
    assert len(csv) > 10


def test_run_writes_traces_summary_and_is_deterministic(tmp_path, capsys):
    args = ["run", "--task", "fold", "--episodes", "2", "--seed", "7",
            "--planner.image_size", "[64, 96]",
            "--planner.mesh_density", "300"]
    code, out = run_cli(args + ["--out", str(tmp_path / "a")], capsys)
    assert code == 0
    assert out["gate_violations"] == 0
    summary = read_json(tmp_path / "a" / "summary.json")
    assert summary["task"] == "fold" and summary["episodes"] == 2
    taxonomy = summary["summary"]["failures"]
    assert set(taxonomy) == {"IncorrectCorrespondence", "DiagonalFeatureGrasp",
                             "GraspedExcessLayers", "Timeout"}
    episodes = (tmp_path / "a" / "episodes.jsonl").read_text().splitlines()
    assert len(episodes) == 2
    assert {"task", "success", "trace"} <= set(json.loads(episodes[0]))

    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    assert ((tmp_path / "a" / "traces.jsonl").read_bytes()
            == (tmp_path / "b" / "traces.jsonl").read_bytes())


def test_train_desc_saves_loadable_checkpoint(dataset, tmp_path, capsys):
    from garmentlab.descriptor import DescriptorNet
    out = tmp_path / "desc.net"
    code, res = run_cli(["train-desc", "--dataset", str(dataset),
                         "--out", str(out), "--seed", "5",
                         "--descriptor.iterations", "8",
                         "--descriptor.dim", "4",
                         "--descriptor.image_size", "[64, 96]",
                         "--descriptor.channels", "[4, 8, 8, 8, 8]"],
                        capsys)
    assert code == 0 and res["iterations"] == 8
    model = DescriptorNet.load(out)
    assert model.cfg.dim == 4
    feat = model.features(np.zeros((64, 96, 3), dtype=np.uint8))
    assert feat.shape == (64, 96, 4)


def test_sweep_single_cell_and_plots(dataset, tmp_path, capsys):
    report_path = tmp_path / "sweep.json"
    code, out = run_cli(["sweep", "--dataset", str(dataset),
                         "--out", str(report_path), "--seed", "5",
                         "--eval.sweep.grid", '{"dim": [3]}',
                         "--eval.queries_per_scene", "8",
                         "--descriptor.iterations", "6",
                         "--descriptor.image_size", "[64, 96]",
                         "--descriptor.channels", "[4, 8, 8, 8, 8]"],
                        capsys)
    assert code == 0 and out["cells"] == 1
    report = read_json(report_path)
    assert report["testset_hash"]
    assert report["cells"][0]["params"] == {"dim": 3}

    code, res = run_cli(["plot", "--report", str(report_path),
                         "--out", str(tmp_path / "plots")], capsys)
    assert code == 0
    for name in res["plots"]:
        assert Path(name).stat().st_size > 0


def test_plot_renders_episode_outcomes(tmp_path, capsys):
    summary = {"summary": {"successes": 3,
                           "failures": {"Timeout": 1,
                                        "IncorrectCorrespondence": 0}}}
    path = tmp_path / "summary.json"
    path.write_text(json.dumps(summary))
    code, res = run_cli(["plot", "--report", str(path),
                         "--out", str(tmp_path / "p")], capsys)
    assert code == 0
    assert res["plots"] and Path(res["plots"][0]).exists()


def test_errors_are_machine_readable(tmp_path, capsys):
    code = cli.main(["run", "--task", "fold", "--episodes", "1",
                     "--out", str(tmp_path / "x"), "--planner.bogus", "3"])
    err = json.loads(capsys.readouterr().err.strip())
    assert code == 2 and err["error"] == "config"

    code = cli.main(["eval", "--model", str(tmp_path / "missing.net"),
                     "--dataset", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "x.json")])
    err = json.loads(capsys.readouterr().err.strip())
    assert code == 1 and err["message"]

    code = cli.main(["frobnicate"])
    err = json.loads(capsys.readouterr().err.strip())
    assert code == 2 and err["error"] == "config"
