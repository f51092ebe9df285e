"""CLI surface: subcommands, exit codes, persistent store between calls."""

import pytest

from minihail.cli import main
from minihail.index import root_entry_count


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write_cluster_config(path, **kw):
    defaults = dict(datanodes=3, map_slots=2, replication=3, sort_keys="3,1,4",
                    block_size=32768, expiry_interval="0.1")
    defaults.update(kw)
    path.write_text("".join(f"{k} {v}\n" for k, v in defaults.items()))
    return path


class TestGen:
    def test_gen_writes_rows(self, workdir, capsys):
        assert main(["gen", "synthetic", "--rows", "50", "-o", "s.csv"]) == 0
        assert len((workdir / "s.csv").read_bytes().splitlines()) == 50

    def test_usage_error_exit_2(self, workdir):
        with pytest.raises(SystemExit) as e:
            main(["gen", "synthetic"])  # missing --rows/-o
        assert e.value.code == 2

    def test_unknown_subcommand_exit_2(self, workdir):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 2


class TestUploadQueryInspect:
    def test_full_flow(self, workdir, capsys):
        cc = write_cluster_config(workdir / "cc.conf")
        assert main(["gen", "uservisits", "--rows", "1500", "-o", "uv.csv"]) == 0
        assert main(["upload", "uv.csv", "--schema", "uservisits",
                     "--cluster-config", str(cc), "--root", "store"]) == 0
        # append-only: second upload with the same id errors
        assert main(["upload", "uv.csv", "--schema", "uservisits",
                     "--cluster-config", str(cc), "--root", "store"]) == 1
        assert main([
            "query", "uv", "--schema", "uservisits", "--cluster-config", str(cc),
            "--root", "store", "--filter", "@3 between(1995-01-01,2005-01-01)",
            "--projection", "@1,@3", "-o", "out.csv",
        ]) == 0
        out_lines = (workdir / "out.csv").read_text().strip().splitlines()
        assert out_lines
        assert all(l.count(",") == 1 for l in out_lines)

        # inspect an indexed replica: root entries == ceil(rows / n)
        block = next((workdir / "store" / "dn0").glob("*.hail"))
        assert main(["inspect", str(block)]) == 0
        text = capsys.readouterr().out
        import re

        rows = int(re.search(r"rows: (\d+)", text).group(1))
        n = int(re.search(r"n=(\d+)", text).group(1))
        entries = int(re.search(r"rootDirectory entries: (\d+)", text).group(1))
        assert entries == root_entry_count(rows, n)

    def test_query_exit_0_with_eq_filter(self, workdir):
        cc = write_cluster_config(workdir / "cc.conf", sort_keys="1,2,3",
                                  block_size=16384)
        assert main(["gen", "synthetic", "--rows", "400", "-o", "s.csv"]) == 0
        assert main(["upload", "s.csv", "--schema", "synthetic",
                     "--cluster-config", str(cc), "--root", "store"]) == 0
        assert main([
            "query", "s", "--schema", "synthetic", "--cluster-config", str(cc),
            "--root", "store", "--filter", "@1 >=(0)", "--projection", "@1",
            "-o", "r.csv",
        ]) == 0
        assert len((workdir / "r.csv").read_text().splitlines()) == 400


class TestKill:
    def test_kill_and_revive_persist(self, workdir):
        cc = write_cluster_config(workdir / "cc.conf")
        assert main(["gen", "synthetic", "--rows", "200", "-o", "s.csv"]) == 0
        assert main(["upload", "s.csv", "--schema", "synthetic",
                     "--cluster-config", str(cc), "--root", "store",
                     "--sort-keys", "1,2,3"]) == 0
        assert main(["kill", "1", "--root", "store", "--cluster-config", str(cc)]) == 0
        assert (workdir / "store" / "dn1" / ".dead").exists()
        # queries still work against the two survivors
        assert main(["query", "s", "--schema", "synthetic", "--cluster-config", str(cc),
                     "--root", "store", "--filter", "@1 >=(0)", "--projection", "@1"]) == 0
        assert main(["kill", "1", "--revive", "--root", "store",
                     "--cluster-config", str(cc)]) == 0
        assert not (workdir / "store" / "dn1" / ".dead").exists()


class TestBench:
    def test_tiny_bob_scenario(self, workdir):
        assert main(["bench", "bob", "--rows", "3000", "--workdir", "bench"]) == 0
        out = workdir / "bench"
        assert (out / "bob-report.csv").exists()
        assert (out / "bob-upload.dat").exists()
        assert (out / "bob-upload.png").exists()
        assert (out / "bob-queries.png").exists()
        csv_text = (out / "bob-report.csv").read_text()
        assert "equivalence_ok" in csv_text
        assert "False" not in csv_text
