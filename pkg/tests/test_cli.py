"""End-to-end tests for the command-line harness, run in process."""

import json

import numpy as np
import pytest

from routedattn.cli import CSV_HEADER, main
from routedattn.clustering import kmeans, quality
from routedattn.tensorio import read_tensor_file, write_tensor_file


def write_config(path, **overrides):
    data = {
        "nQ": 48,
        "nK": 64,
        "d": 6,
        "cQ": 3,
        "cK": 4,
        "rho": 0.4,
        "seeds": [0],
    }
    data.update(overrides)
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture
def workdir(tmp_path):
    cfg = write_config(tmp_path / "config.json")
    tensor = str(tmp_path / "inst.qkv")
    assert main(["gen", tensor, "--config", cfg]) == 0
    return tmp_path, cfg, tensor


class TestGen:
    def test_writes_deterministic_tensor(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        a, b = str(tmp_path / "a.qkv"), str(tmp_path / "b.qkv")
        assert main(["gen", a, "--config", cfg]) == 0
        assert main(["gen", b, "--config", cfg]) == 0
        assert (tmp_path / "a.qkv").read_bytes() == (tmp_path / "b.qkv").read_bytes()
        q, k, v = read_tensor_file(a)
        assert q.shape == (48, 6)
        assert k.shape == (64, 6)
        assert v.shape == (64, 6)

    def test_seed_changes_instance(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        a, b = str(tmp_path / "a.qkv"), str(tmp_path / "b.qkv")
        main(["gen", a, "--config", cfg])
        main(["gen", b, "--config", cfg, "--seed", "1"])
        assert (tmp_path / "a.qkv").read_bytes() != (tmp_path / "b.qkv").read_bytes()

    def test_blob_structure_is_recoverable(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.json", nQ=64, nK=64, d=8, cQ=2, cK=2,
            qBlobs=2, kBlobs=2, sigma=0.05,
        )
        path = str(tmp_path / "blob.qkv")
        assert main(["gen", path, "--config", cfg]) == 0
        q, _, _ = read_tensor_file(path)
        model = kmeans(q, 2, seed=0, restarts=3)
        assert quality(model, q).delta_sq <= 0.01 * 8


class TestRun:
    def test_record_fields_and_determinism(self, workdir, capsys):
        _, cfg, tensor = workdir
        assert main(["run", tensor, "--config", cfg, "--no-timing"]) == 0
        first = capsys.readouterr().out
        assert main(["run", tensor, "--config", cfg, "--no-timing"]) == 0
        second = capsys.readouterr().out
        assert first == second
        record = json.loads(first.strip())
        assert record["policy"] == "errorAwareCompensated"
        assert 0.0 <= record["density"] <= 0.4 + 1e-12
        assert record["mapMse"] >= 0.0
        assert record["outputMse"] >= 0.0
        assert record["relaxedObjective"] >= 0.0
        assert record["flopsTotal"] > 0
        assert record["seed"] == 0
        assert record["clusterCounts"] == [3, 4]
        assert record["config"]["nQ"] == 48
        assert "timing" not in record

    def test_timing_present_by_default(self, workdir, capsys):
        _, cfg, tensor = workdir
        assert main(["run", tensor, "--config", cfg]) == 0
        record = json.loads(capsys.readouterr().out.strip())
        assert record["timing"]["seconds"] >= 0.0

    def test_one_line_per_seed(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", seeds=[0, 1, 2])
        tensor = str(tmp_path / "inst.qkv")
        main(["gen", tensor, "--config", cfg])
        assert main(["run", tensor, "--config", cfg, "--no-timing"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert [json.loads(l)["seed"] for l in lines] == [0, 1, 2]

    def test_full_density_is_numerically_exact(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", rho=1.0)
        tensor = str(tmp_path / "inst.qkv")
        main(["gen", tensor, "--config", cfg])
        assert main(["run", tensor, "--config", cfg, "--no-timing"]) == 0
        record = json.loads(capsys.readouterr().out.strip())
        assert record["density"] == 1.0
        assert record["mapMse"] <= 1e-18
        assert record["outputMse"] <= 1e-18

    def test_policy_and_seed_overrides(self, workdir, capsys):
        _, cfg, tensor = workdir
        code = main([
            "run", tensor, "--config", cfg, "--no-timing",
            "--policy", "topPDrop", "--seed", "5",
        ])
        assert code == 0
        record = json.loads(capsys.readouterr().out.strip())
        assert record["policy"] == "topPDrop"
        assert record["seed"] == 5

    def test_preset_reshapes_config(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", nQ=96, nK=144, d=8)
        tensor = str(tmp_path / "inst.qkv")
        main(["gen", tensor, "--config", cfg])
        assert main(["run", tensor, "--config", cfg, "--preset", "paper", "--no-timing"]) == 0
        record = json.loads(capsys.readouterr().out.strip())
        echoed = record["config"]
        assert echoed["budgetMode"] == "perClusterTopP"
        assert echoed["p"] == 0.85
        assert echoed["cQ"] == max(4, 96 // 12)
        assert echoed["cK"] == max(8, round(144 / 3.6))

    def test_out_file_instead_of_stdout(self, workdir, capsys):
        base, cfg, tensor = workdir
        out = base / "run.jsonl"
        assert main(["run", tensor, "--config", cfg, "--no-timing", "--out", str(out)]) == 0
        assert capsys.readouterr().out == ""
        record = json.loads(out.read_text().strip())
        assert record["seed"] == 0

    def test_random_policy_is_seeded(self, workdir, capsys):
        _, cfg, tensor = workdir
        main(["run", tensor, "--config", cfg, "--no-timing", "--policy", "random"])
        first = capsys.readouterr().out
        main(["run", tensor, "--config", cfg, "--no-timing", "--policy", "random"])
        assert capsys.readouterr().out == first


class TestSweep:
    def test_header_and_grid_cardinality(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", seeds=[0, 1])
        tensor = str(tmp_path / "inst.qkv")
        main(["gen", tensor, "--config", cfg])
        code = main([
            "sweep", tensor, "--config", cfg,
            "--density-grid", "0.25,0.5", "--workers", "1",
        ])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 1 + 3 * 2 * 2  # header + policies x densities x seeds
        policies = [line.split(",")[0] for line in lines[1:]]
        assert policies == (
            ["topPDrop"] * 4 + ["topPCompensated"] * 4 + ["errorAwareCompensated"] * 4
        )
        seeds = [int(line.split(",")[6]) for line in lines[1:]]
        assert seeds == [0, 1] * 6

    def test_policy_list_override(self, workdir, capsys):
        _, cfg, tensor = workdir
        code = main([
            "sweep", tensor, "--config", cfg,
            "--density-grid", "0.5", "--policy", "random,oracleKnapsack",
            "--workers", "1",
        ])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert [l.split(",")[0] for l in lines[1:]] == ["random", "oracleKnapsack"]

    def test_parallel_matches_serial(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", seeds=[0, 1])
        tensor = str(tmp_path / "inst.qkv")
        main(["gen", tensor, "--config", cfg])
        serial = tmp_path / "serial.csv"
        parallel = tmp_path / "parallel.csv"
        args = ["sweep", tensor, "--config", cfg, "--density-grid", "0.25,0.5"]
        assert main(args + ["--workers", "1", "--out", str(serial)]) == 0
        assert main(args + ["--workers", "2", "--out", str(parallel)]) == 0
        assert serial.read_bytes() == parallel.read_bytes()

    @pytest.mark.parametrize("grid", ["", ",,", "0.25,abc", "1.5"])
    def test_bad_density_grids_are_config_errors(self, workdir, grid):
        _, cfg, tensor = workdir
        assert main(["sweep", tensor, "--config", cfg, "--density-grid", grid]) == 2

    def test_unknown_policy_is_config_error(self, workdir):
        _, cfg, tensor = workdir
        code = main([
            "sweep", tensor, "--config", cfg,
            "--density-grid", "0.5", "--policy", "bestPolicy",
        ])
        assert code == 2


class TestVerify:
    def test_passes_on_healthy_instance(self, workdir, capsys):
        _, cfg, tensor = workdir
        assert main(["verify", tensor, "--config", cfg, "--no-timing"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["pass"] is True
        exec_check = report["checks"]["executorReference"]
        assert exec_check["pass"] is True
        assert exec_check["metric"] <= exec_check["gate"] == 1e-9
        stream_check = report["checks"]["streamingNaive"]
        assert stream_check["pass"] is True
        assert stream_check["gate"] == 1e-10
        bound = report["bound"]
        assert set(bound) == {
            "lhsMse", "estimatedTerm", "residualTerm", "rhs",
            "holds", "slack", "normalizerShift",
        }
        assert bound["rhs"] == pytest.approx(bound["estimatedTerm"] + bound["residualTerm"])

    def test_single_executor_uses_relative_gate(self, workdir, capsys):
        _, cfg, tensor = workdir
        code = main([
            "verify", tensor, "--config", cfg, "--precision", "single-executor",
        ])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        exec_check = report["checks"]["executorReference"]
        assert exec_check["relative"] is True
        assert exec_check["gate"] == 1e-4


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        tensor = str(tmp_path / "missing.qkv")
        assert main(["run", tensor, "--config", str(tmp_path / "nope.json")]) == 3

    def test_invalid_json_config(self, tmp_path, workdir):
        _, _, tensor = workdir
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", tensor, "--config", str(bad)]) == 2

    def test_unknown_config_key(self, tmp_path, workdir):
        _, _, tensor = workdir
        bad = write_config(tmp_path / "bad.json", mystery=7)
        assert main(["run", tensor, "--config", bad]) == 2

    def test_missing_tensor_file(self, workdir):
        base, cfg, _ = workdir
        assert main(["run", str(base / "ghost.qkv"), "--config", cfg]) == 3

    def test_corrupted_tensor_magic(self, workdir):
        base, cfg, tensor = workdir
        blob = bytearray((base / "inst.qkv").read_bytes())
        blob[:4] = b"NOPE"
        bad = base / "bad.qkv"
        bad.write_bytes(bytes(blob))
        assert main(["run", str(bad), "--config", cfg]) == 3

    def test_truncated_tensor(self, workdir):
        base, cfg, _ = workdir
        blob = (base / "inst.qkv").read_bytes()
        bad = base / "trunc.qkv"
        bad.write_bytes(blob[:-16])
        assert main(["run", str(bad), "--config", cfg]) == 3

    def test_unwritable_out_path(self, workdir):
        base, cfg, tensor = workdir
        out = base / "no" / "such" / "dir" / "x.jsonl"
        assert main(["run", tensor, "--config", cfg, "--out", str(out)]) == 3

    def test_oracle_beyond_capacity_limit(self, tmp_path):
        # 1536 x 1536 entries at rho 0.5 implies a knapsack capacity past the
        # dynamic-programming limit, which must map to the capability code.
        cfg = write_config(
            tmp_path / "c.json", nQ=1536, nK=1536, d=4, cQ=8, cK=8,
            rho=0.5, policy="oracleKnapsack",
        )
        rng = np.random.default_rng(0)
        tensor = str(tmp_path / "big.qkv")
        write_tensor_file(
            tensor,
            rng.normal(size=(1536, 4)),
            rng.normal(size=(1536, 4)),
            rng.normal(size=(1536, 4)),
        )
        assert main(["run", tensor, "--config", cfg, "--no-timing"]) == 4
