import json

import numpy as np
import pytest

from sliceflow import cli
from sliceflow import transport as tr
from sliceflow.config import load_config
from sliceflow.errors import ValidationError


def write_config(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


CONJUGATE_SAMPLE = """
[experiment]
kind = sample
seed = 7
output_dir = {out}

[transport]
field = zero
dimension = 2
scheme = rk4
steps = 1

[potential]
kind = gaussian-observation
y = 1.0,1.0
sigma_y = 1.0
operator = identity

[chain]
steps = 1200
burn_in = 200
thinning = 10
chains = {chains}
"""

TRAIN_SMOKE = """
[experiment]
kind = train-prior
seed = 3
output_dir = {out}

[dataset]
name = two-moons
size = 2000
noise = 0.15
seed = 42

[train]
hidden_sizes = 8,8
batch_size = 64
iterations = {iterations}
learning_rate = {lr}
"""


# --- config validation -----------------------------------------------------------


def test_unknown_key_rejected(tmp_path):
    cfg = write_config(
        tmp_path,
        CONJUGATE_SAMPLE.format(out=tmp_path / "o", chains=1) + "typo_key = 3\n",
    )
    with pytest.raises(ValidationError, match="typo_key"):
        load_config(cfg)


def test_unknown_section_rejected(tmp_path):
    cfg = write_config(
        tmp_path,
        CONJUGATE_SAMPLE.format(out=tmp_path / "o", chains=1) + "\n[mystery]\nx = 1\n",
    )
    with pytest.raises(ValidationError, match="mystery"):
        load_config(cfg)


def test_missing_section_rejected(tmp_path):
    cfg = write_config(tmp_path, "[experiment]\nkind = sample\nseed = 1\n")
    with pytest.raises(ValidationError, match="needs section"):
        load_config(cfg)


def test_inapplicable_section_rejected(tmp_path):
    text = CONJUGATE_SAMPLE.format(out=tmp_path / "o", chains=1)
    text += "\n[moons]\ntrials = 5\n"
    cfg = write_config(tmp_path, text)
    with pytest.raises(ValidationError, match="moons"):
        load_config(cfg)


def test_missing_model_path_rejected(tmp_path):
    text = CONJUGATE_SAMPLE.format(out=tmp_path / "o", chains=1).replace(
        "field = zero", f"field = {tmp_path}/does_not_exist.efvf"
    )
    cfg = write_config(tmp_path, text)
    with pytest.raises(ValidationError, match="not found"):
        load_config(cfg)


def test_invalid_hidden_width_rejected_before_compute(tmp_path):
    cfg = write_config(
        tmp_path,
        TRAIN_SMOKE.format(out=tmp_path / "o", iterations=10, lr="1e-3").replace(
            "hidden_sizes = 8,8", "hidden_sizes = 0"
        ),
    )
    rc = cli.main(["train-prior", "--config", str(cfg), "--quiet"])
    assert rc == 2
    assert not (tmp_path / "o").exists()


def test_seed_and_out_overrides(tmp_path):
    cfg = write_config(tmp_path, CONJUGATE_SAMPLE.format(out=tmp_path / "ignored", chains=1))
    loaded = load_config(cfg, seed_override=99, out_override=tmp_path / "other")
    assert loaded.seed == 99
    assert loaded.output_dir == tmp_path / "other"
    assert loaded.chain.seed == 99


# --- train-prior --------------------------------------------------------------------


def test_train_prior_writes_loadable_model(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(tmp_path, TRAIN_SMOKE.format(out=out, iterations=200, lr="1e-3"))
    rc = cli.main(["train-prior", "--config", str(cfg), "--quiet"])
    assert rc == 0
    field = tr.load_field(out / "model.efvf")
    val = field(0.5, np.zeros(2))
    assert np.all(np.isfinite(val))
    trace_lines = (out / "loss_trace.csv").read_text().strip().split("\n")
    assert trace_lines[0] == "iteration,loss"
    assert len(trace_lines) == 201
    manifest = json.loads((out / "manifest.json").read_text())
    assert {o["path"] for o in manifest["outputs"]} == {"model.efvf", "loss_trace.csv"}


def test_train_prior_rerun_identical_checksum(tmp_path):
    cfg_text = TRAIN_SMOKE.format(out=tmp_path / "a", iterations=150, lr="1e-3")
    cfg = write_config(tmp_path, cfg_text)
    assert cli.main(["train-prior", "--config", str(cfg), "--quiet"]) == 0
    assert cli.main(["train-prior", "--config", str(cfg), "--out", str(tmp_path / "b"), "--quiet"]) == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    sha = {o["path"]: o["sha256"] for o in a["outputs"]}
    shb = {o["path"]: o["sha256"] for o in b["outputs"]}
    assert sha == shb


def test_train_prior_divergence_exit_code(tmp_path):
    cfg = write_config(tmp_path, TRAIN_SMOKE.format(out=tmp_path / "o", iterations=50, lr="1e160"))
    rc = cli.main(["train-prior", "--config", str(cfg), "--quiet"])
    assert rc == 3


# --- sample ---------------------------------------------------------------------------


def test_sample_retention_and_files(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(tmp_path, CONJUGATE_SAMPLE.format(out=out, chains=10))
    rc = cli.main(["sample", "--config", str(cfg), "--quiet"])
    assert rc == 0
    csvs = sorted(out.glob("chain_*.csv"))
    assert len(csvs) == 10
    for path in csvs:
        rows = path.read_text().strip().split("\n")
        assert len(rows) == 101  # header + 100 retained
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["split_rhat"] is not None
    assert len(diag["split_rhat"]) == 2


def test_sample_rerun_byte_identical(tmp_path):
    cfg = write_config(tmp_path, CONJUGATE_SAMPLE.format(out=tmp_path / "a", chains=2))
    assert cli.main(["sample", "--config", str(cfg), "--quiet"]) == 0
    assert cli.main(["sample", "--config", str(cfg), "--out", str(tmp_path / "b"), "--quiet"]) == 0
    for name in ("chain_00.csv", "chain_01.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sample_corrupt_model_io_exit_code(tmp_path):
    model = tmp_path / "model.efvf"
    model.write_bytes(b"EFVF" + b"\x00" * 32)
    text = CONJUGATE_SAMPLE.format(out=tmp_path / "o", chains=1).replace(
        "field = zero", f"field = {model}"
    )
    cfg = write_config(tmp_path, text)
    rc = cli.main(["sample", "--config", str(cfg), "--quiet"])
    assert rc == 4


# --- oracle-compare ---------------------------------------------------------------------


def test_oracle_compare_report(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(
        tmp_path,
        f"""
[experiment]
kind = oracle-compare
seed = 3
output_dir = {out}

[transport]
field = zero
dimension = 2
steps = 1

[potential]
kind = gaussian-observation
y = 1.0,1.0
sigma_y = 1.0

[chain]
steps = 2200
burn_in = 200
thinning = 1
chains = 2

[oracle]
resolution = 64
lengths = 250,500,1000,2000
""",
    )
    assert cli.main(["oracle-compare", "--config", str(cfg), "--quiet"]) == 0
    rep = json.loads((out / "report.json").read_text())
    lengths = [d["length"] for d in rep["tv_by_length"]]
    assert lengths == [250, 500, 1000, 2000]
    assert np.abs(np.array(rep["moments"]["mean_delta"])).max() < 0.1
    grid_rows = (out / "grid.csv").read_text().strip().split("\n")
    assert grid_rows[0] == "z1,z2,density"
    assert len(grid_rows) == 64 * 64 + 1


def test_oracle_compare_insufficient_chain_rejected(tmp_path):
    cfg = write_config(
        tmp_path,
        f"""
[experiment]
kind = oracle-compare
seed = 3
output_dir = {tmp_path / "o"}

[transport]
field = zero
dimension = 2
steps = 1

[potential]
kind = constant

[chain]
steps = 300
burn_in = 100
thinning = 1

[oracle]
lengths = 1000
""",
    )
    assert cli.main(["oracle-compare", "--config", str(cfg), "--quiet"]) == 2


# --- multifidelity ------------------------------------------------------------------------


def test_multifidelity_equal_steps_full_ess(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(
        tmp_path,
        f"""
[experiment]
kind = multifidelity
seed = 5
output_dir = {out}

[transport]
field = affine
dimension = 2
affine_mu = 0.4,-0.2
affine_sigma = 1.5
scheme = rk4
steps = 8

[potential]
kind = gaussian-observation
y = 1.0,0.0
sigma_y = 0.8

[chain]
steps = 600
burn_in = 100
thinning = 5

[multifidelity]
coarse_steps = 8
fine_steps = 8
""",
    )
    assert cli.main(["multifidelity", "--config", str(cfg), "--quiet"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["kish_ess_fraction"] == 1.0
    header = (out / "weighted.csv").read_text().split("\n")[0]
    assert header == "step,z1,z2,x1,x2,fine_x1,fine_x2,raw_log_weight,weight"


def test_multifidelity_paper_scale_config_expressible(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(
        tmp_path,
        f"""
[experiment]
kind = multifidelity
seed = 5
output_dir = {out}

[transport]
field = affine
dimension = 2
affine_mu = 0.0,0.0
affine_sigma = 1.2
scheme = rk4
steps = 50

[potential]
kind = gaussian-observation
y = 0.5,0.5
sigma_y = 1.0

[chain]
steps = 260
burn_in = 60
thinning = 2

[multifidelity]
coarse_steps = 50
fine_steps = 1000
""",
    )
    assert cli.main(["multifidelity", "--config", str(cfg), "--quiet"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["coarse_steps"] == 50
    assert rep["fine_steps"] == 1000
    assert 0 < rep["kish_ess_fraction"] <= 1.0


# --- moons-demo ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fast_model_file(tmp_path_factory):
    # tiny but real two-moons prior for CLI smoke runs
    from sliceflow import flow_training as ft

    ds = ft.sample_two_moons(4000, 0.15, 42)
    res = ft.train(ds, ft.TrainConfig(hidden_sizes=(16, 16), batch_size=128,
                                      iterations=1500, learning_rate=2e-3, seed=11))
    path = tmp_path_factory.mktemp("model") / "moons.efvf"
    tr.save_field(res.field, path)
    return path


MOONS_DEMO = """
[experiment]
kind = moons-demo
seed = 11
output_dir = {out}

[dataset]
name = two-moons
size = 2000
noise = 0.15
seed = 42

[transport]
field = {model}
scheme = rk4
steps = 6

[potential]
kind = gaussian-observation
y = 0.25
sigma_y = 0.25
operator = coords
coords = 1

[chain]
steps = 60
burn_in = 10
thinning = 1

[moons]
trials = 6
trial_steps = 60
trial_burn_in = 10
baseline_step_size = 5e-4
baseline_iterations = 20
"""


def test_moons_demo_report_and_scatter(tmp_path, fast_model_file):
    out = tmp_path / "run"
    cfg = write_config(tmp_path, MOONS_DEMO.format(out=out, model=fast_model_file))
    assert cli.main(["moons-demo", "--config", str(cfg), "--quiet"]) == 0
    rep = json.loads((out / "report.json").read_text())
    for key in (
        "baseline_switch_fraction",
        "ess_switch_fraction",
        "oracle_branch_fractions",
        "ess_branch_fractions",
        "tv_pooled_vs_oracle",
    ):
        assert key in rep
    assert rep["pooled_samples"] == 6 * 50
    lines = (out / "scatter.csv").read_text().strip().split("\n")
    assert lines[0] == "method,trial,x1,x2,branch"
    methods = {line.split(",")[0] for line in lines[1:]}
    assert methods == {"baseline", "ess", "prior"}


def test_manifest_lists_all_outputs_with_checksums(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(tmp_path, CONJUGATE_SAMPLE.format(out=out, chains=2))
    assert cli.main(["sample", "--config", str(cfg), "--quiet"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    listed = {o["path"] for o in manifest["outputs"]}
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert listed == on_disk
    import hashlib

    for entry in manifest["outputs"]:
        digest = hashlib.sha256((out / entry["path"]).read_bytes()).hexdigest()
        assert digest == entry["sha256"]
    assert manifest["version"].startswith("sliceflow-")
    assert "chains" in manifest["timings"]
