"""Config handling, sweep bookkeeping, record schema and the CLI surface.

The heavy numerical behaviour of the sweeps (does finetuning help, does the
excess-risk trend hold) lives in the acceptance tests; here a micro-sized
experiment exercises the plumbing end to end.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from ebtf import cli
from ebtf import model as M
from ebtf.datagen import (
    DirichletProcess,
    Exponential,
    GaussianMixture,
    NeuralPrior,
    PointMassSet,
    Uniform,
    standard_target,
)
from ebtf.experiments import (
    CSV_HEADER,
    ConfigError,
    ExperimentConfig,
    child_seed,
    csv_label,
    prior_from_spec,
    read_records,
    realized_target,
    run_pretrain,
    run_sweep_distance,
    run_sweep_n,
    spec_of_prior,
)
from ebtf.report import SUMMARY_HEADER, ReportError, infer_sweep_kind, render


MICRO = {
    "name": "micro",
    "root_seed": 7,
    "target": {"kind": "standard"},
    "n_pretrain_priors": 2,
    "model": {"p_emb": 8, "n_heads": 2, "emb_depth": 1, "emb_width": 8,
              "oh_depth": 1, "oh_width": 8},
    "pretrain": {"iterations": 6, "batch_size": 2, "seq_len": 16, "lr": 0.002},
    "finetune": {"epochs": 2, "lr": 0.02, "lora_rank": 2},
    "n_grid": [8, 16],
    "seeds": [0, 1],
    "variants": ["oracle", "plugin", "pretrained", "finetuned", "scratch"],
    "test_n": 40,
    "oracle_atoms": 2000,
    "environment_atoms": 200,
    "hellinger_samples": 2000,
    "hellinger_atoms": 2000,
}


def micro_config(out_dir, **overrides):
    data = dict(MICRO, out_dir=str(out_dir))
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    """One pretrain + both sweeps, shared by the read-only tests below."""
    out = tmp_path_factory.mktemp("micro")
    cfg = micro_config(out)
    run_pretrain(cfg, out / "ckpt")
    dist_csv = run_sweep_distance(cfg, out / "ckpt", out / "dist")
    size_csv = run_sweep_n(cfg, out / "ckpt", out / "size")
    return cfg, out, dist_csv, size_csv


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_roundtrips_through_dict():
    cfg = ExperimentConfig.from_dict(MICRO)
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again == cfg


@pytest.mark.parametrize("patch", [
    {"sigma": 0.0},
    {"name": "bad,name"},
    {"n_grid": []},
    {"n_grid": [16, 8]},
    {"n_grid": [8, 8]},
    {"seeds": []},
    {"variants": []},
    {"variants": ["oracle", "wizard"]},
    {"test_n": 1},
    {"newsvendor_b": 0.0},
    {"target": {"kind": "unobtainium"}},
    {"pretrain_priors": []},
    {"n_pretrain_priors": 0},
    {"model": {"p_emb": 7}},          # not divisible by heads
    {"pretrain": {"iterations": 0}},
    {"finetune": {"epochs": 0}},
    {"finetune": {"divergence": "magic"}},
])
def test_config_rejects_bad_fields(patch):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(dict(MICRO, **patch))


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict(dict(MICRO, turbo=True))


def test_config_from_file_errors(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.from_file(missing)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        ExperimentConfig.from_file(bad)


def test_prior_spec_roundtrip():
    priors = [
        standard_target(),
        GaussianMixture((0.2, 0.8), (0.0, 3.0), (1.0, 2.0)),
        Exponential(5.0),
        Uniform(-1.0, 2.0),
        PointMassSet((0.0, 1.0, 4.0), (0.5, 0.25, 0.25)),
        DirichletProcess(1.0, Uniform(0.0, 5.0)),
        NeuralPrior(seed=3),
    ]
    for prior in priors:
        spec = spec_of_prior(prior)
        again = prior_from_spec(spec)
        assert spec_of_prior(again) == spec


def test_prior_spec_rejects_garbage():
    with pytest.raises(ConfigError):
        prior_from_spec({"kind": "gmm", "weights": [1.0]})  # missing means
    with pytest.raises(ConfigError):
        prior_from_spec("exponential")
    with pytest.raises(ConfigError):
        prior_from_spec({"kind": "dp", "alpha": 1.0, "base": {"kind": "??"}})


def test_child_seed_is_deterministic_and_keyed():
    assert child_seed(7, "corpus", 0) == child_seed(7, "corpus", 0)
    assert child_seed(7, "corpus", 0) != child_seed(7, "corpus", 1)
    assert child_seed(7, "corpus", 0) != child_seed(8, "corpus", 0)
    assert child_seed(7, "corpus", 0) != child_seed(7, "test", 0)


def test_realized_target_pins_dp_draws():
    cfg = micro_config("unused", target={"kind": "dp", "alpha": 1.0,
                                         "base": {"kind": "uniform",
                                                  "low": 0.0, "high": 5.0}})
    t1 = realized_target(cfg)
    t2 = realized_target(cfg)
    assert isinstance(t1, PointMassSet)
    np.testing.assert_array_equal(np.asarray(t1.atoms), np.asarray(t2.atoms))
    assert len(t1.atoms) == cfg.environment_atoms


def test_csv_label_strips_delimiters():
    assert csv_label("gmm(means=[1,3,4])") == "gmm(means=[1;3;4])"
    assert "," not in csv_label("a,b,,c")


# ---------------------------------------------------------------------------
# sweeps and records
# ---------------------------------------------------------------------------

def test_distance_sweep_schema_and_row_count(micro_run):
    cfg, out, dist_csv, _ = micro_run
    text = Path(dist_csv).read_text(encoding="utf-8")
    lines = text.splitlines()
    assert lines[0] == CSV_HEADER
    # per seed: oracle + plugin + scratch, then per prior: pretrained + finetuned
    expected = len(cfg.seeds) * (3 + 2 * 2)
    assert len(lines) - 1 == expected
    rows = read_records(dist_csv)
    assert len(rows) == expected
    for row in rows:
        assert row["run_id"].startswith("micro:")
        assert row["variant"] in cfg.variants
        assert "," not in row["target"]


def test_oracle_rows_are_exactly_zero(micro_run):
    _, _, dist_csv, _ = micro_run
    for row in read_records(dist_csv):
        if row["variant"] == "oracle":
            assert row["mse_vs_oracle"] == 0.0
            assert row["excess_risk"] == 0.0


def test_data_free_variants_record_n_zero(micro_run):
    cfg, _, dist_csv, _ = micro_run
    for row in read_records(dist_csv):
        if row["variant"] in ("oracle", "plugin", "pretrained"):
            assert row["n"] == 0
        elif row["variant"] in ("finetuned", "scratch"):
            assert row["n"] == cfg.n_grid[-1]


def test_prior_rows_carry_distances(micro_run):
    _, _, dist_csv, _ = micro_run
    rows = read_records(dist_csv)
    tagged = [r for r in rows if r["variant"] in ("pretrained", "finetuned")]
    assert tagged
    for row in tagged:
        assert row["l2_distance"] is not None and row["l2_distance"] >= 0.0
        assert row["hellinger"] is not None and 0.0 <= row["hellinger"] <= 1.0
        assert row["pretrain"]
    baseline = [r for r in rows if r["variant"] in ("oracle", "plugin", "scratch")]
    for row in baseline:
        assert row["l2_distance"] is None and row["pretrain"] == ""


def test_size_sweep_row_count(micro_run):
    cfg, _, _, size_csv = micro_run
    rows = read_records(size_csv)
    n_priors, n_seeds, n_sizes = 2, len(cfg.seeds), len(cfg.n_grid)
    expected = (n_seeds * 2                      # oracle + plugin
                + n_seeds * n_sizes              # scratch per size
                + n_priors * n_seeds             # pretrained
                + n_priors * n_seeds * n_sizes)  # finetuned per size
    assert len(rows) == expected
    fin_sizes = {r["n"] for r in rows if r["variant"] == "finetuned"}
    assert fin_sizes == set(cfg.n_grid)


def test_identical_seeds_give_byte_identical_records(micro_run, tmp_path):
    cfg, out, dist_csv, _ = micro_run
    cfg2 = micro_config(tmp_path)
    run_pretrain(cfg2, tmp_path / "ckpt")
    again = run_sweep_distance(cfg2, tmp_path / "ckpt", tmp_path / "dist")
    assert Path(again).read_bytes() == Path(dist_csv).read_bytes()


def test_wall_seconds_column_is_zero_without_timings(micro_run):
    _, _, dist_csv, _ = micro_run
    for line in Path(dist_csv).read_text().splitlines()[1:]:
        assert line.endswith(",0.0")


def test_manifest_carries_real_timings(micro_run):
    _, out, _, _ = micro_run
    manifest = json.loads((out / "dist" / "manifest.json").read_text())
    assert manifest["sweep"] == "distance"
    walls = manifest["wall_seconds"]
    assert len(walls) == manifest["rows"]
    assert all(w >= 0.0 for w in walls.values())
    assert len(manifest["pretrain_priors"]) == 2


def test_missing_checkpoint_is_an_error(tmp_path):
    cfg = micro_config(tmp_path)
    with pytest.raises(FileNotFoundError, match="run the pretrain step"):
        run_sweep_distance(cfg, tmp_path / "empty", tmp_path / "dist")


def test_read_records_rejects_bad_header(tmp_path):
    path = tmp_path / "records.csv"
    path.write_text("nope\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unexpected records header"):
        read_records(path)


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def test_render_distance_chart_and_summary(micro_run):
    cfg, out, dist_csv, _ = micro_run
    paths = render(dist_csv, out / "dist")
    svg, summary = paths
    assert svg.name == "excess_distance.svg" and svg.exists()
    text = svg.read_text(encoding="utf-8")
    for variant in ("pretrained", "finetuned", "scratch", "oracle"):
        assert variant in text
    assert "Date" not in text.split("metadata")[0]
    lines = summary.read_text(encoding="utf-8").splitlines()
    assert lines[0] == SUMMARY_HEADER
    assert len(lines) > 1


def test_render_size_chart_panels(micro_run):
    cfg, out, _, size_csv = micro_run
    rows = read_records(size_csv)
    assert infer_sweep_kind(rows) == "n"
    svg, _ = render(size_csv, out / "size")
    assert svg.name == "excess_n.svg"
    assert "finetuning observations" in svg.read_text(encoding="utf-8")


def test_render_is_byte_deterministic(micro_run, tmp_path):
    _, out, dist_csv, _ = micro_run
    first, _ = render(dist_csv, out / "dist")
    second, _ = render(dist_csv, tmp_path)
    assert first.read_bytes() == second.read_bytes()


def test_render_rejects_empty_records(tmp_path):
    path = tmp_path / "records.csv"
    path.write_text(CSV_HEADER + "\n", encoding="utf-8")
    with pytest.raises(ReportError, match="no data rows"):
        render(path, tmp_path)


# ---------------------------------------------------------------------------
# command-line interface
# ---------------------------------------------------------------------------

def write_micro_config(tmp_path, **overrides) -> Path:
    data = dict(MICRO, out_dir=str(tmp_path / "out"))
    data.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_cli_presets_all_parse():
    for name in cli.PRESETS:
        cfg = ExperimentConfig.from_dict(json.loads(cli.preset_text(name)))
        assert cfg.name == name


def test_cli_exit_codes(tmp_path):
    assert cli.main(["pretrain", "--config", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(dict(MICRO, sigma=-1.0)), encoding="utf-8")
    assert cli.main(["pretrain", "--config", str(bad)]) == 2
    good = write_micro_config(tmp_path)
    assert cli.main(["sweep-n", "--config", str(good)]) == 3  # no checkpoints
    assert cli.main(["report", "--records", str(tmp_path / "missing.csv"),
                     "--out", str(tmp_path)]) == 3
    assert cli.main(["report"]) == 2  # nothing to locate the records with
    assert cli.main(["pretrain", "--preset", "ci", "--config", str(good)]) == 2


def test_cli_pipeline_end_to_end(tmp_path):
    config = write_micro_config(tmp_path, n_grid=[8], seeds=[0], test_n=30)
    out = tmp_path / "out"
    assert cli.main(["gen-corpus", "--config", str(config)]) == 0
    assert (out / "corpus_00.json").exists()
    assert (out / "target_labeled.csv").exists()
    assert (out / "finetune_n8.csv").exists()
    corpus = json.loads((out / "corpus_00.json").read_text())
    assert corpus["seq_len"] == 16 and corpus["sequences"] == 12

    assert cli.main(["pretrain", "--config", str(config)]) == 0
    assert (out / "checkpoints" / "pre_01.ckpt").exists()

    assert cli.main(["sweep-distance", "--config", str(config)]) == 0
    assert cli.main(["report", "--out", str(out)]) == 0
    assert (out / "excess_distance.svg").exists()
    # the config alone must resolve the same records file
    (out / "summary.csv").unlink()
    assert cli.main(["report", "--config", str(config)]) == 0
    assert (out / "summary.csv").exists()

    ft_dir = tmp_path / "ft"
    assert cli.main(["finetune", "--config", str(config),
                     "--checkpoint", str(out / "checkpoints" / "pre_00.ckpt"),
                     "--data", str(out / "finetune_n8.csv"),
                     "--out", str(ft_dir)]) == 0
    assert (ft_dir / "finetuned.ckpt").exists()
    trace = (ft_dir / "finetune_trace.csv").read_text().splitlines()
    assert trace[0] == "step,loss,wall_ms"

    ev_dir = tmp_path / "ev"
    assert cli.main(["eval", "--config", str(config),
                     "--checkpoint", str(ft_dir / "finetuned.ckpt"),
                     "--data", str(out / "target_labeled.csv"),
                     "--out", str(ev_dir)]) == 0
    metrics = json.loads((ev_dir / "eval.json").read_text())
    assert {"mse_vs_oracle", "mse_vs_labels", "excess_risk",
            "stein_loss"} <= set(metrics)
    assert metrics["observations"] == 30


def test_cli_seed_override_changes_output(tmp_path):
    config = write_micro_config(tmp_path, n_grid=[8], seeds=[0], test_n=30,
                                n_pretrain_priors=1)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out, seed in ((out_a, "1"), (out_b, "2")):
        assert cli.main(["pretrain", "--config", str(config),
                         "--seed", seed, "--out", str(out)]) == 0
        assert cli.main(["sweep-distance", "--config", str(config),
                         "--seed", seed, "--out", str(out)]) == 0
    ra = (out_a / "records.csv").read_text()
    rb = (out_b / "records.csv").read_text()
    assert ra != rb
