import csv
import json

import numpy as np
import pytest

from phlab.cli import main, model_for_system
from phlab.datagen import load_dataset
from phlab.models import load_checkpoint, planted_model, save_checkpoint
from phlab.systems import LeakForce, MassSpringSpec, TankNetworkSpec, save_system


@pytest.fixture
def msd_files(tmp_path):
    system = tmp_path / "msd.json"
    save_system(MassSpringSpec(), system)
    return tmp_path, system


def test_gen_and_train_round_trip(msd_files, capsys):
    tmp, system = msd_files
    data = tmp / "train.csv"
    val = tmp / "val.csv"
    assert main(["gen", "--system", str(system), "--samples", "202", "--dt", "0.01", "--length", "1",
                 "--noise", "0.01", "--seed", "3", "--out", str(data)]) == 0
    main(["gen", "--system", str(system), "--samples", "101", "--dt", "0.01", "--length", "1",
          "--seed", "4", "--out", str(val)])
    loaded = load_dataset(data)
    assert len(loaded) == 2 and loaded.metadata["sigma"] == 0.01
    ckpt = str(tmp / "model.ckpt")
    assert main(["train", "--data", str(data), "--val-data", str(val), "--model", "phnn", "--epochs", "2",
                 "--integrator", "srk4", "--lambda-schedule", "0:0.1,1:0", "--out", ckpt]) == 0
    out = capsys.readouterr().out
    assert "mse=" in out and "checkpoint written" in out
    model = load_checkpoint(ckpt)
    assert model.force.mask == [1]
    report = json.loads(open(ckpt + ".report.json").read())
    assert len(report["train_loss"]) == 2 and len(report["val_loss"]) == 2
    rows = list(csv.reader(open(ckpt + ".metrics.csv")))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "r_1"] and len(rows) == 3


@pytest.mark.parametrize("kind", ["phnn", "phnn-ft", "baseline1", "baseline2"])
def test_model_choices(kind):
    msd = model_for_system(kind, MassSpringSpec())
    tank = model_for_system(kind, TankNetworkSpec(leaks=[LeakForce(3, -10.0)]))
    if kind.startswith("phnn"):
        assert msd["force_mode"] == ("time" if kind == "phnn-ft" else "state_time")
        assert tank["force_mask"] == [8]
        assert tank["force_mode"] == ("time" if kind == "phnn-ft" else "state")
    else:
        assert tank["autonomous"] == (kind == "baseline1") and not msd["autonomous"]
    assert model_for_system("phnn", TankNetworkSpec())["force_mask"] is None


def test_exp_smoke(tmp_path, capsys):
    out = tmp_path / "exp"
    assert main(["exp", "msd-freq", "--replicates", "1", "--epochs", "2", "--out-dir", str(out),
                 "--set", "sizes=[1001]", "--set", "frequency_size=1001", "--set", "test_trajectories=1",
                 "--set", 'models=["phnn-t"]']) == 0
    rows = list(csv.DictReader(open(out / "results.csv")))
    metrics = {r["metric"] for r in rows}
    assert {"mse", "damping", "mse_omega_3"} <= metrics
    assert all(r["config_hash"] == rows[0]["config_hash"] for r in rows)
    summary = json.loads((out / "report.json").read_text())
    assert all(s["n"] == 1 for s in summary)
    assert "mse_omega_3" in capsys.readouterr().out


def test_exp_rejects_bad_override():
    with pytest.raises(SystemExit):
        main(["exp", "msd-datasize", "--set", "novalue"])


def test_mpc_command(tmp_path, capsys):
    plant = TankNetworkSpec()
    save_system(plant, tmp_path / "plant.json")
    save_checkpoint(planted_model(plant), str(tmp_path / "m.ckpt"))
    trace = tmp_path / "trace.csv"
    code = main(["mpc", "--model", str(tmp_path / "m.ckpt"), "--plant", str(tmp_path / "plant.json"),
                 "--ref", "0.2,0.2,0.2,0.2", "--tank", "2", "--horizon", "5", "--dt", "0.02",
                 "--iterations", "10", "--T", "0.1", "--out", str(trace)])
    assert code == 0
    rows = list(csv.DictReader(open(trace)))
    assert len(rows) == 6
    assert all(-2 <= float(r["u"]) <= 2 for r in rows)
    assert np.isclose(float(rows[0]["x_7"]), 0.0)
    assert "completed" in capsys.readouterr().out
