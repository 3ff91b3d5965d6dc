"""End-to-end command tests: every subcommand through main()."""

import json
import signal
import socket
import subprocess
import sys
import threading

import numpy as np
import pytest

from pab.cli import main
from pab.prober import ProbeReceiver, ProbeSpec, probe_once

SPEC_TEXT = """\
fixture = shared_trunk
trials = 2
seed = 3
policies = SEQ,WCI
eta = 0.9
beta = 20
max_measurements = 60
"""


def write_spec(tmp_path, text=SPEC_TEXT, name="exp.txt"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


class TestSimulate:
    def test_writes_artifacts(self, tmp_path, capsys):
        out = tmp_path / "results"
        rc = main(["simulate", "--spec", write_spec(tmp_path), "--output-dir", str(out)])
        assert rc == 0
        for name in ("report.json", "trials.csv", "scatter.csv"):
            assert (out / name).is_file()
        doc = json.loads((out / "report.json").read_text())
        assert doc["spec"]["trials"] == 2
        assert len(doc["trials"]) == 4
        stdout = capsys.readouterr().out
        assert "SEQ:" in stdout and "WCI:" in stdout
        assert "wrote report.json" in stdout

    def test_seed_flag_gives_identical_bytes(self, tmp_path):
        spec = write_spec(tmp_path)
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["simulate", "--spec", spec, "--seed", "9", "--output-dir", str(out)]) == 0
            outs.append(out)
        for name in ("report.json", "trials.csv", "scatter.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_seed_flag_overrides_spec(self, tmp_path):
        out = tmp_path / "o"
        rc = main(["simulate", "--spec", write_spec(tmp_path), "--seed", "42", "--output-dir", str(out)])
        assert rc == 0
        doc = json.loads((out / "report.json").read_text())
        assert doc["spec"]["seed"] == 42

    def test_scatter_rows_cover_grid(self, tmp_path):
        out = tmp_path / "o"
        assert main(["simulate", "--spec", write_spec(tmp_path), "--output-dir", str(out)]) == 0
        lines = (out / "scatter.csv").read_text().strip().split("\n")
        assert len(lines) == 1 + 2 * 2  # header + trials x policies

    def test_set_override(self, tmp_path):
        out = tmp_path / "o"
        rc = main([
            "simulate", "--spec", write_spec(tmp_path),
            "--set", "trials=3", "--output-dir", str(out),
        ])
        assert rc == 0
        lines = (out / "trials.csv").read_text().strip().split("\n")
        assert len(lines) == 1 + 3 * 2

    def test_unknown_spec_key(self, tmp_path, capsys):
        spec = write_spec(tmp_path, text="bogus = 1\n")
        rc = main(["simulate", "--spec", spec, "--output-dir", str(tmp_path / "o")])
        assert rc == 2
        assert "'bogus'" in capsys.readouterr().err

    def test_missing_spec_file(self, tmp_path, capsys):
        rc = main(["simulate", "--spec", str(tmp_path / "absent.txt")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_output_dir_from_spec_key(self, tmp_path):
        dest = tmp_path / "from_spec"
        spec = write_spec(tmp_path, text=SPEC_TEXT + f"output_dir = {dest}\n")
        assert main(["simulate", "--spec", spec]) == 0
        assert (dest / "report.json").is_file()

    def test_output_dir_env_fallback(self, tmp_path, monkeypatch):
        dest = tmp_path / "from_env"
        monkeypatch.setenv("PAB_OUTPUT_DIR", str(dest))
        assert main(["simulate", "--spec", write_spec(tmp_path)]) == 0
        assert (dest / "report.json").is_file()

    def test_flag_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PAB_OUTPUT_DIR", str(tmp_path / "losing"))
        dest = tmp_path / "winning"
        assert main(["simulate", "--spec", write_spec(tmp_path), "--output-dir", str(dest)]) == 0
        assert (dest / "report.json").is_file()
        assert not (tmp_path / "losing").exists()


def synth_fit_csv(tmp_path, paths, n_per_rate=40, seed=8):
    rng = np.random.default_rng(seed)
    lines = ["path,rate,z"]
    for pid, (alpha, y) in paths.items():
        for rate in range(5, 100, 5):
            p1 = 1.0 / (1.0 + np.exp(alpha * (rate - y)))
            for _ in range(n_per_rate):
                lines.append(f"{pid},{rate},{int(rng.random() < p1)}")
    f = tmp_path / "train.csv"
    f.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(f)


class TestFit:
    def test_recovers_model(self, tmp_path, capsys):
        csv = synth_fit_csv(tmp_path, {"p1": (0.8, 40), "p2": (0.8, 70)})
        out = tmp_path / "o"
        rc = main(["fit", csv, "--output-dir", str(out)])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "alpha" in stdout
        text = (out / "model.txt").read_text()
        lines = dict(l.split("=", 1) for l in text.strip().split("\n"))
        assert abs(float(lines["alpha"]) - 0.8) < 0.15
        assert float(lines["kappa"]) == 0.05
        assert abs(int(lines["y.p1"]) - 40) <= 2
        assert abs(int(lines["y.p2"]) - 70) <= 2

    def test_kappa_flag_recorded(self, tmp_path):
        csv = synth_fit_csv(tmp_path, {"p1": (0.8, 40)})
        out = tmp_path / "o"
        assert main(["fit", csv, "--kappa", "0.02", "--output-dir", str(out)]) == 0
        assert "kappa=0.02" in (out / "model.txt").read_text()

    def test_unidentifiable_path_warns_and_fails(self, tmp_path, capsys):
        csv = synth_fit_csv(tmp_path, {"p1": (0.8, 40)})
        with open(csv, "a", encoding="utf-8") as fh:
            for rate in (10, 20, 30):
                fh.write(f"pflat,{rate},1\n" * 10)
        out = tmp_path / "o"
        rc = main(["fit", csv, "--output-dir", str(out)])
        assert rc == 1
        err = capsys.readouterr().err
        assert "pflat" in err and "unidentifiable" in err
        # the identifiable path is still fitted and written
        text = (out / "model.txt").read_text()
        assert "y.p1=" in text
        assert "y.pflat" not in text

    def test_all_unidentifiable(self, tmp_path, capsys):
        f = tmp_path / "flat.csv"
        f.write_text("path,rate,z\n" + "p1,10,1\n" * 30, encoding="utf-8")
        out = tmp_path / "o"
        rc = main(["fit", str(f), "--output-dir", str(out)])
        assert rc == 1
        assert "error:" in capsys.readouterr().err
        assert not (out / "model.txt").exists()

    def test_header_only_csv(self, tmp_path, capsys):
        f = tmp_path / "empty.csv"
        f.write_text("path,rate,z\n", encoding="utf-8")
        rc = main(["fit", str(f)])
        assert rc == 2
        assert "no probe rows" in capsys.readouterr().err

    def test_missing_csv(self, tmp_path):
        assert main(["fit", str(tmp_path / "nope.csv")]) == 2


class TestTopo:
    def test_generate_then_inspect(self, tmp_path, capsys):
        f = tmp_path / "topo.txt"
        rc = main(["topo", "--generate", str(f), "--nodes", "8", "--paths", "6", "--seed", "4"])
        assert rc == 0
        assert "wrote" in capsys.readouterr().out
        rc = main(["topo", str(f)])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "declared:" in stdout and "logical:" in stdout

    def test_generate_deterministic(self, tmp_path):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        for f in (a, b):
            assert main(["topo", "--generate", str(f), "--nodes", "8", "--paths", "6", "--seed", "4"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_generate_fixture(self, tmp_path):
        f = tmp_path / "trunk.txt"
        assert main(["topo", "--generate", str(f), "--fixture", "shared_trunk"]) == 0
        text = f.read_text()
        assert "link trunk" in text
        assert "path p4 in_b trunk out_b" in text

    def test_inspect_requires_file(self, capsys):
        assert main(["topo"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_infeasible_params(self, tmp_path, capsys):
        rc = main(["topo", "--generate", str(tmp_path / "t.txt"), "--nodes", "1"])
        assert rc == 2

    def test_garbage_topology_file(self, tmp_path, capsys):
        f = tmp_path / "bad.txt"
        f.write_text("line 1\n", encoding="utf-8")
        assert main(["topo", str(f)]) == 2


def _serve_forever(receiver):
    def loop():
        while True:
            try:
                receiver.run_once()
            except (OSError, ValueError):
                # receiver closed under us
                return

    t = threading.Thread(target=loop, daemon=True)
    t.start()
    return t


class TestProbeCommand:
    def test_requires_dest_and_rate(self, capsys):
        assert main(["probe"]) == 2
        assert "--dest and --rate" in capsys.readouterr().err

    def test_sender_json_output(self, capsys):
        with ProbeReceiver() as receiver:
            _serve_forever(receiver)
            rc = main([
                "probe", "--dest", f"127.0.0.1:{receiver.port}", "--rate", "10",
                "--trains", "2", "--packets", "10", "--size", "500",
                "--path", "p3", "--json",
            ])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["path"] == "p3"
        assert doc["rate"] == 10
        assert doc["outcome"] == 1
        assert len(doc["train_rates"]) == 2

    def test_sender_human_output(self, capsys):
        with ProbeReceiver(shape_mbps=4.0) as receiver:
            _serve_forever(receiver)
            rc = main([
                "probe", "--dest", f"127.0.0.1:{receiver.port}", "--rate", "10",
                "--trains", "2", "--packets", "10", "--size", "500",
            ])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "egress" in stdout and "outcome 0" in stdout

    def test_unreachable_dest(self, capsys):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
        s.close()
        rc = main(["probe", "--dest", f"127.0.0.1:{port}", "--rate", "10",
                   "--trains", "2", "--packets", "10", "--size", "500"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_listen_announces_port_and_serves(self):
        proc = subprocess.Popen(
            [sys.executable, "-c",
             "import sys; from pab.cli import main; sys.exit(main(sys.argv[1:]))",
             "probe", "--listen", "0"],
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
        )
        try:
            line = proc.stdout.readline().strip()
            assert line.startswith("ready ")
            port = int(line.split()[1])
            spec = ProbeSpec(rate=10.0, trains=2, packets_per_train=10,
                             packet_size=500, inter_train_gap=0.01)
            result = probe_once("127.0.0.1", port, spec)
            assert result.measurement.outcome == 1
            proc.send_signal(signal.SIGINT)
            assert proc.wait(timeout=10) == 0
        finally:
            proc.kill()


TOPO_TWO_PATHS = """\
link a
link b
path pa a
path pb b
"""


class TestEstimate:
    def _files(self, tmp_path, endpoints_lines):
        topo = tmp_path / "topo.txt"
        topo.write_text(TOPO_TWO_PATHS, encoding="utf-8")
        eps = tmp_path / "endpoints.txt"
        eps.write_text("\n".join(endpoints_lines) + "\n", encoding="utf-8")
        return str(topo), str(eps)

    def test_loopback_session(self, tmp_path, capsys):
        # two receivers emulating 30 and 60 Mbps bottlenecks; outcomes step
        # at shape + epsilon, so the intervals should land near 35 and 65
        with ProbeReceiver(shape_mbps=30.0) as ra, ProbeReceiver(shape_mbps=60.0) as rb:
            _serve_forever(ra)
            _serve_forever(rb)
            topo, eps = self._files(tmp_path, [
                f"pa 127.0.0.1:{ra.port}",
                f"pb 127.0.0.1:{rb.port}",
            ])
            out = tmp_path / "o"
            # 5000-byte packets keep the send pacing on its sleep path, so
            # the in-process receiver thread is never starved of cycles
            rc = main([
                "estimate", "--topology", topo, "--endpoints", eps,
                "--policy", "SEQ", "--seed", "1", "--alpha", "10",
                "--beta", "8", "--max-measurements", "60",
                "--trains", "2", "--packets", "10", "--size", "5000",
                "--output-dir", str(out),
            ])
        stdout = capsys.readouterr().out
        assert rc == 0, stdout
        assert "done: criteria_met" in stdout
        doc = json.loads((out / "session.json").read_text())
        assert doc["policy"] == "SEQ"
        for pid, step in (("pa", 35), ("pb", 65)):
            est = doc["final_estimates"][pid]
            mid = (est["lb"] + est["ub"]) / 2
            assert abs(mid - step) <= 6, (pid, est)

    def test_missing_endpoint(self, tmp_path, capsys):
        topo, eps = self._files(tmp_path, ["pa 127.0.0.1:9"])
        rc = main(["estimate", "--topology", topo, "--endpoints", eps])
        assert rc == 2
        assert "no endpoint for path 'pb'" in capsys.readouterr().err

    def test_unknown_endpoint_path(self, tmp_path, capsys):
        topo, eps = self._files(tmp_path, [
            "pa 127.0.0.1:9", "pb 127.0.0.1:9", "ghost 127.0.0.1:9",
        ])
        rc = main(["estimate", "--topology", topo, "--endpoints", eps])
        assert rc == 2
        assert "unknown path 'ghost'" in capsys.readouterr().err

    def test_duplicate_endpoint(self, tmp_path, capsys):
        topo, eps = self._files(tmp_path, ["pa 127.0.0.1:9", "pa 127.0.0.1:10"])
        rc = main(["estimate", "--topology", topo, "--endpoints", eps])
        assert rc == 2
        assert "duplicate path" in capsys.readouterr().err

    def test_receivers_down_marks_paths_failed(self, tmp_path, capsys):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
        s.close()
        topo, eps = self._files(tmp_path, [
            f"pa 127.0.0.1:{port}", f"pb 127.0.0.1:{port}",
        ])
        out = tmp_path / "o"
        rc = main([
            "estimate", "--topology", topo, "--endpoints", eps,
            "--max-measurements", "10", "--output-dir", str(out),
        ])
        assert rc == 1
        assert "warning:" in capsys.readouterr().err
        doc = json.loads((out / "session.json").read_text())
        assert doc["termination"] == "paths_failed"
