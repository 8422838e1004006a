import json
import subprocess
import sys

import pytest

from relstab import bundled
from relstab.cli import main


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("systems")
    bundled.write("all", d)
    bad = bundled.SO3_OSCILLATOR.replace("    - [1, 3, 2, -1.0]\n",
                                         "    - [1, 3, 2, -1.0]\n    - [1, 2, 1, 0.5]\n")
    (d / "so3-corrupt.yaml").write_text(bad)
    (d / "empty.yaml").write_text("")
    return d


def _diagnostics(err: str) -> list:
    return [json.loads(line) for line in err.splitlines() if line.startswith("{")]


class TestValidate:
    @pytest.mark.parametrize("name", ["EX16", "SO3-oscillator", "trivial-oscillator"])
    def test_bundled_ok(self, files, name, capsys):
        assert main(["validate", str(files / f"{name}.yaml")]) == 0
        diags = _diagnostics(capsys.readouterr().err)
        assert diags and all(d["status"] == "ok" for d in diags)

    def test_corrupted_structure_constant(self, files, capsys):
        assert main(["validate", str(files / "so3-corrupt.yaml")]) == 1
        (diag,) = _diagnostics(capsys.readouterr().err)
        assert diag["check"] == "jacobi" and diag["residual"] == 0.5 and diag["line"] > 0

    def test_empty_file(self, files, capsys):
        assert main(["validate", str(files / "empty.yaml")]) == 2
        (diag,) = _diagnostics(capsys.readouterr().err)
        assert diag["check"] == "parse" and diag["line"] == 1

    def test_missing_file(self, tmp_path):
        assert main(["validate", str(tmp_path / "nope.yaml")]) == 2

    def test_non_symplectic_generator(self, files, tmp_path, capsys):
        text = bundled.EX16.replace("A: zero", "A: [[1,0,0,0,0,0],[0,0,0,0,0,0],[0,0,0,0,0,0],"
                                    "[0,0,0,0,0,0],[0,0,0,0,0,0],[0,0,0,0,0,0]]")
        p = tmp_path / "bad.yaml"
        p.write_text(text)
        assert main(["validate", str(p)]) == 1
        assert _diagnostics(capsys.readouterr().err)[0]["check"] == "sp_condition"


class TestAnalyze:
    def test_ex16_origin(self, files, capsys):
        code = main(["analyze", str(files / "EX16.yaml"), "--point", "0,0,0,0,0,0", "--json", "-"])
        assert code == 3
        report = json.loads(capsys.readouterr().out)
        assert report["stability"]["verdict"] == "INCONCLUSIVE_INDEFINITE"

    def test_so3_certified(self, files, tmp_path):
        out = tmp_path / "r.json"
        code = main(["analyze", str(files / "SO3-oscillator.yaml"), "--point", "1,0,0,0,1,0",
                     "--json", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        assert rep["schema"] == 1 and rep["stability"]["verdict"] == "STABLE_CERTIFIED"
        assert rep["slice"]["dim"] == 2 and rep["stability"]["signature"] == [2, 0, 0]
        assert rep["thresholds"]["definiteness_relative"] == 1e-8
        assert len(rep["system"]["digest"]) == 64

    def test_ex16_not_relative_equilibrium(self, files, capsys):
        assert main(["analyze", str(files / "EX16.yaml"), "--point", "1,0,0,0,0,0"]) == 1
        assert "not a relative equilibrium" in capsys.readouterr().out

    def test_refine_flag(self, files):
        code = main(["analyze", str(files / "EX16.yaml"), "--point", "1e-4,0,0,0,0,0",
                     "--refine", "--freeze", "ptheta"])
        assert code == 3

    def test_explicit_xi(self, files):
        path = str(files / "SO3-oscillator.yaml")
        assert main(["analyze", path, "--point", "1,0,0,0,1,0", "--xi", "0,0,1"]) == 0
        assert main(["analyze", path, "--point", "1,0,0,0,1,0", "--xi", "0,0,2"]) == 1

    @pytest.mark.parametrize("args", [
        ["--point", "1,2"],
        ["--point", "a,b,c,d,e,f"],
        ["--point", "0,0,0,0,0,0", "--xi", "1,2"],
    ])
    def test_bad_input(self, files, args):
        assert main(["analyze", str(files / "EX16.yaml"), *args]) == 2

    def test_byte_identical_reports(self, files, tmp_path):
        outs = []
        for k in range(2):
            out = tmp_path / f"r{k}.json"
            main(["analyze", str(files / "SO3-oscillator.yaml"), "--point", "1,0,0,0,1,0",
                  "--json", str(out)])
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestProbe:
    def test_zero_radii(self, files):
        assert main(["probe", str(files / "EX16.yaml"), "--point", "0,0,0,0,0,0",
                     "--radii", ""]) == 0

    def test_so3_no_escape_and_csv(self, files, tmp_path):
        out = tmp_path / "p.json"
        code = main(["probe", str(files / "SO3-oscillator.yaml"), "--point", "1,0,0,0,1,0",
                     "--radii", "1e-3", "--horizon", "2", "--dt", "1e-2", "--samples", "3",
                     "--csv", str(tmp_path / "csv"), "--json", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        assert rep["probe"]["verdict"] == "NO_ESCAPE_OBSERVED" and rep["probe"]["seed"] == 0
        assert sorted(p.name for p in (tmp_path / "csv").iterdir()) == \
            ["sample_0.csv", "sample_1.csv", "sample_2.csv"]

    def test_seed_determinism_and_threads(self, files, tmp_path, monkeypatch):
        args = ["probe", str(files / "SO3-oscillator.yaml"), "--point", "1,0,0,0,1,0",
                "--radii", "1e-2", "--horizon", "1", "--dt", "1e-2", "--samples", "4",
                "--seed", "42"]
        blobs = []
        for k, threads in enumerate(["1", "1", "2"]):
            monkeypatch.setenv("RELSTAB_THREADS", threads)
            out = tmp_path / f"p{k}.json"
            assert main([*args, "--json", str(out)]) == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]
        a, c = json.loads(blobs[0]), json.loads(blobs[2])
        assert a["probe"]["per_radius"][0]["initial_distance"] == \
            c["probe"]["per_radius"][0]["initial_distance"]

    def test_ex16_escape(self, files, tmp_path):
        out = tmp_path / "p.json"
        code = main(["probe", str(files / "EX16.yaml"), "--point", "0,0,0,0,0,0", "--radii",
                     "1e-3", "--horizon", "1500", "--dt", "0.1", "--samples", "3",
                     "--offset", "0,0,0,0,0,1e-2", "--perturb", "q1,q2,p1,p2,theta",
                     "--json", str(out)])
        assert code == 0
        assert json.loads(out.read_text())["probe"]["verdict"] == "ESCAPE_OBSERVED"

    def test_not_relative_equilibrium(self, files):
        assert main(["probe", str(files / "EX16.yaml"), "--point", "1,0,0,0,0,0"]) == 1


class TestExamples:
    def test_all(self, tmp_path, capsys):
        assert main(["examples", "all", str(tmp_path)]) == 0
        assert len(list(tmp_path.iterdir())) == 3

    def test_single_validates(self, tmp_path):
        assert main(["examples", "EX16", str(tmp_path)]) == 0
        assert main(["validate", str(tmp_path / "EX16.yaml")]) == 0

    def test_unknown(self, tmp_path, capsys):
        assert main(["examples", "rigid-body", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        assert "EX16" in err and "SO3-oscillator" in err and "trivial-oscillator" in err


def test_console_script(files):
    proc = subprocess.run([sys.executable, "-m", "relstab.cli", "validate",
                           str(files / "EX16.yaml")], capture_output=True, text=True)
    assert proc.returncode == 0 and "ok" in proc.stdout
