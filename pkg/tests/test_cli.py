import csv
import io

import pytest

from jamba_kit.cli import main
from jamba_kit.weights import read_archive


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_memory_large(capsys):
    code, out, _ = run(capsys, "memory", "--preset", "jamba-1.5-large", "--context", "262144", "--bytes", "2")
    assert code == 0
    assert "9.0 GiB" in out.splitlines()[1]


def test_memory_zero_context(capsys):
    code, out, _ = run(capsys, "memory", "--preset", "jamba-1.5-large", "--context", "0", "--format", "csv")
    row = next(csv.DictReader(io.StringIO(out)))
    assert code == 0 and row["kv"] == "0 B"


def test_memory_all_matches_single_invocations(capsys):
    _, everything, _ = run(capsys, "memory", "--format", "csv")
    all_rows = everything.splitlines()
    names = [line.split(",")[0] for line in all_rows[1:]]
    assert len(names) == 9
    for i, name in enumerate(names):
        _, single, _ = run(capsys, "memory", "--preset", name, "--format", "csv")
        assert single.splitlines() == [all_rows[0], all_rows[i + 1]]


def test_memory_multiple_contexts(capsys):
    code, out, _ = run(capsys, "memory", "--preset", "mistral-7b", "--context", "0,1024", "--format", "csv")
    assert code == 0 and len(out.splitlines()) == 3


def test_audit_params(capsys):
    code, out, _ = run(capsys, "audit-params", "--preset", "jamba-1.5-large", "--format", "csv")
    rows = {r["family"]: int(r["params"]) for r in csv.DictReader(io.StringIO(out))}
    assert code == 0
    assert abs(rows["TOTAL"] - 398e9) < 0.05 * 398e9
    assert abs(rows["ACTIVE"] - 94e9) < 0.05 * 94e9


def test_audit_params_from_config_file(capsys, tmp_path, tiny):
    from jamba_kit.config import save_config

    save_config(tiny, tmp_path / "c.yaml")
    code, out, _ = run(capsys, "audit-params", "--config", str(tmp_path / "c.yaml"))
    assert code == 0 and "TOTAL" in out


def test_quant_writes_archive(capsys, tmp_path):
    out_path = tmp_path / "q.jmb"
    code, out, _ = run(capsys, "quant", "--preset", "toy-tiny", "--steps", "20", "--out", str(out_path))
    assert code == 0
    assert "top1_agreement=" in out
    assert any(k.endswith(".scales") for k in read_archive(out_path))


def test_quant_large_counts_only(capsys):
    code, out, _ = run(capsys, "quant", "--preset", "jamba-1.5-large")
    assert code == 0 and "top1_agreement" not in out and "moe_mlp_fraction=0.92" in out


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--preset", "toy-tiny", "--n-params", "5", "--format", "csv")
    assert code == 0 and out.strip().endswith("checked=5 failed=0")
    code, out, _ = run(capsys, "gradcheck", "--n-params", "0")
    assert code == 0 and "checked=0" in out


def test_gradcheck_failure_exits_one(capsys, monkeypatch):
    from jamba_kit.mamba import SelectiveScan

    original = SelectiveScan.backward
    monkeypatch.setattr(SelectiveScan, "backward", lambda self, g: tuple(x * 2 for x in original(self, g)))
    code, out, _ = run(capsys, "gradcheck", "--n-params", "20")
    assert code == 1


def test_train_toy_csv(capsys, tmp_path):
    path = tmp_path / "t.csv"
    code, out, _ = run(capsys, "train-toy", "--steps", "3", "--out", str(path))
    assert code == 0
    assert path.read_text().splitlines()[0] == "step,task_loss,activation_loss,global_max_activation"
    code, out, _ = run(capsys, "train-toy", "--steps", "2", "--format", "csv")
    assert out.splitlines()[0] == "step,task_loss,activation_loss,global_max_activation"


def test_bench(capsys, tmp_path):
    path = tmp_path / "b.csv"
    code, out, _ = run(capsys, "bench", "--preset", "toy-tiny", "--context", "8", "--decode-tokens", "20",
                       "--repeats", "1", "--out", str(path), "--format", "csv")
    assert code == 0
    assert len(path.read_text().splitlines()) == 3
    assert out == path.read_text()


def test_seed_reproducible(capsys):
    _, a, _ = run(capsys, "gradcheck", "--preset", "toy-tiny", "--n-params", "3", "--seed", "4")
    _, b, _ = run(capsys, "gradcheck", "--preset", "toy-tiny", "--n-params", "3", "--seed", "4")
    assert a == b


@pytest.mark.parametrize("argv", [
    [], ["bogus"], ["memory", "--context", "abc"], ["memory", "--context", "-5"], ["memory", "--format", "xml"],
    ["audit-params", "--config", "/nonexistent.yaml"], ["bench", "--context", "0"],
])
def test_bad_invocation_exits_two(capsys, argv):
    assert main(argv) == 2


def test_contract_violation_exits_one(capsys):
    code, _, err = run(capsys, "memory", "--preset", "nope")
    assert code == 1 and "unknown memory preset 'nope'" in err
    code, _, _ = run(capsys, "audit-params", "--preset", "nope")
    assert code == 1


def test_bad_config_contents_exit_one(capsys, tmp_path):
    (tmp_path / "c.yaml").write_text("d_model: 8\nwat: 1\n")
    code, _, err = run(capsys, "audit-params", "--config", str(tmp_path / "c.yaml"))
    assert code == 1 and "wat" in err
