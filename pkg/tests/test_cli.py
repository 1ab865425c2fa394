import json

import numpy as np
import pytest

from lmsfd.cli import ComparisonError, compare, main
from lmsfd.data import load_tsv
from lmsfd.model import Model

DATA = {
    "kind": "cipher",
    "n_languages": 3,
    "latent_vocab": 10,
    "min_len": 2,
    "max_len": 4,
    "pair_sizes": [20, 20, 10, 10],
    "valid_per_pair": 4,
}


def write_config(tmp_path, name="cfg.json", **model):
    cfg = {
        "model": {"embed_dim": 8, "ffn_dim": 16, "n_layers": 1, "lms_rank": 2, **model},
        "train": {"steps": 3, "batch_size": 4, "warmup": 1, "eval_every": 2, "fd_enabled": model.get("ffn_strategy") == "lms_fd"},
        "data": DATA,
        "out_dir": f"out-{name[:-5]}",
    }
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_run_writes_outputs_and_is_byte_identical(tmp_path, capsys):
    cfg = write_config(tmp_path, ffn_strategy="lms_fd")
    assert main(["run", "--config", str(cfg)]) == 0
    out = tmp_path / "out-cfg"
    first = (out / "summary.json").read_bytes()
    summary = json.loads(first)
    assert set(summary["accuracy"]) == {"ls", "shared"}
    assert set(summary["accuracy"]["ls"]) == {"l0-l1", "l1-l0", "l0-l2", "l2-l0"}
    assert summary["census"] == summary["census_closed_form"]
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records if r["kind"] == "step"] == [1, 2, 3]
    assert {r["route"] for r in records if r["kind"] == "eval"} == {"ls", "shared"}
    assert Model.load(out / "model.npz").cfg.ffn_strategy == "lms_fd"

    assert main(["run", "--config", str(cfg)]) == 0
    assert (out / "summary.json").read_bytes() == first
    assert "shared: mean accuracy" in capsys.readouterr().out


def test_run_from_tsv(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "c.tsv"), "--valid-out", str(tmp_path / "v.tsv"), "--languages", "2", "--pair-sizes", "8", "8", "--valid-per-pair", "2"]) == 0
    assert len(load_tsv(tmp_path / "c.tsv")) == 16
    cfg = {
        "model": {"embed_dim": 8, "ffn_dim": 16, "n_layers": 2, "ffn_strategy": "switch_top1", "n_experts": 2},
        "train": {"steps": 2, "batch_size": 4},
        "data": {"kind": "tsv", "train": "c.tsv", "valid": "v.tsv"},
        "out_dir": "out",
    }
    (tmp_path / "tsv.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "tsv.json")]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert set(summary["accuracy"]) == {"ls"}
    assert summary["census"]["experts"] > 0


@pytest.mark.parametrize(
    "mutate, needle",
    [
        (lambda c: c["model"].update(ffn_strategy="bogus"), "model"),
        (lambda c: c["model"].update(wings=2), "wings"),
        (lambda c: c["train"].update(temperature=0.5), "train"),
        (lambda c: c["train"].update(lr=-1.0), "lr"),
        (lambda c: c["data"].update(kind="parquet"), "data.kind"),
        (lambda c: c.update(data={"kind": "tsv", "train": "missing.tsv"}), "data.train"),
        (lambda c: c["train"].update(fd_enabled=True), "fd_enabled"),
        (lambda c: c.pop("out_dir"), "out_dir"),
    ],
)
def test_bad_configs_exit_2_naming_field(tmp_path, capsys, mutate, needle):
    path = write_config(tmp_path)
    cfg = json.loads(path.read_text())
    mutate(cfg)
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path)]) == 2
    assert needle in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_divergence_exits_3(tmp_path):
    path = write_config(tmp_path)
    cfg = json.loads(path.read_text())
    cfg["train"]["lr"] = 1e250
    path.write_text(json.dumps(cfg))
    with np.errstate(all="ignore"):
        assert main(["run", "--config", str(path)]) == 3


def test_compare_fixtures():
    x = {"a": 50.0, "b": 60.0}
    self_cmp = compare(x, x)
    assert self_cmp.win_ratio == 0 and self_cmp.mean_delta == 0
    assert compare(x, {"a": 51.0, "b": 60.5}).win_ratio == 100
    rep = compare({"p": 10.0, "q": 10.0, "r": 10.0}, {"p": 11.0, "q": 9.0, "r": 12.0})
    assert rep.win_ratio == pytest.approx(200 / 3)
    assert rep.mean_delta == pytest.approx(2 / 3)
    with pytest.raises(ComparisonError):
        compare({"a": 1.0}, {"b": 1.0})


def test_compare_is_antisymmetric():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = {k: float(v) for k, v in zip("abcde", rng.uniform(0, 100, 5))}
        b = {k: float(v) for k, v in zip("abcde", rng.uniform(0, 100, 5))}
        assert compare(a, b).mean_delta == pytest.approx(-compare(b, a).mean_delta, abs=1e-12)
        assert 0 <= compare(a, b).win_ratio <= 100


def test_compare_command_across_routes(tmp_path, capsys):
    assert main(["run", "--config", str(write_config(tmp_path, "fd.json", ffn_strategy="lms_fd"))]) == 0
    assert main(["run", "--config", str(write_config(tmp_path, "dense.json"))]) == 0
    capsys.readouterr()
    fd, dense = tmp_path / "out-fd" / "summary.json", tmp_path / "out-dense" / "summary.json"
    assert main(["compare", str(dense), str(fd), "--candidate-route", "shared", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep) == {"deltas", "mean_delta", "win_ratio"}
    assert main(["compare", str(dense), str(dense), "--candidate-route", "shared"]) == 2


def test_budget_command_fig4(capsys):
    assert main(["budget", "--L", "15", "--r", "4096", "--c", "1024", "--E", "8", "--d", "32"]) == 0
    out = capsys.readouterr().out
    for n in ("62,914,560", "33,554,432", "2,457,600", "163,840"):
        assert n in out


def test_budget_json_round_trip(capsys):
    assert main(["budget", "--L", "15", "--r", "4096", "--c", "1024", "--E", "8", "--d", "32", "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    m = data["methods"]
    assert m["ls"]["train_extra_params"] == 62_914_560
    assert m["moe"]["train_extra_params"] == 33_554_432
    assert m["lms"]["train_extra_params"] == 2_457_600
    assert m["lms_fd"]["inference_extra_params"] == 163_840
    assert data["shape"] == {"L": 15, "r": 4096, "c": 1024, "d": 32, "E": 8, "N": 1, "projections_per_ffn": 2}


def test_budget_without_args_is_usage_error(capsys):
    assert main(["budget"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2
