import re

import numpy as np
import pytest

from depthnet.cli import main
from depthnet.graph import build_depthnet, zero_weights
from depthnet.lidar_io import read_calib, read_kitti_bin, write_calib, write_kitti_bin
from depthnet.pgm import pixels_to_depth, read_pgm
from depthnet.preprocess import Calibration, PointCloud, crop, dt_fill, kitti_like_calibration, project, top_fill
from depthnet.weights_io import save_weights

VELO_TO_CAM = np.array([[0, -1, 0, 0], [0, 0, -1, 0], [1, 0, 0, 0], [0, 0, 0, 1]], dtype=float)


@pytest.fixture
def scene(tmp_path):
    rng = np.random.default_rng(11)
    n = 20000
    pts = np.column_stack([rng.uniform(3, 60, n), rng.uniform(-20, 20, n), rng.uniform(-1.7, 1.0, n),
                           rng.uniform(0, 1, n)])
    bin_path = tmp_path / "scan.bin"
    write_kitti_bin(PointCloud(pts), bin_path)
    base = kitti_like_calibration()
    calib_path = tmp_path / "calib.txt"
    write_calib(Calibration(base.P, np.eye(4), VELO_TO_CAM), calib_path)
    return bin_path, calib_path


def test_complete_zero_weights_equals_dt_fill(scene, tmp_path, capsys):
    bin_path, calib_path = scene
    net = build_depthnet(False, 64, 256)
    save_weights(zero_weights(net), tmp_path / "zero.bin")
    out = tmp_path / "dense.pgm"
    rc = main(["complete", "--bin", str(bin_path), "--calib", str(calib_path), "--weights",
               str(tmp_path / "zero.bin"), "--size", "64x256", "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert re.search(r"timing: project=\S+ms dt=\S+ms cnn=\S+ms combine=\S+ms", text)
    cloud, calib = read_kitti_bin(bin_path), read_calib(calib_path)
    expected = dt_fill(top_fill(crop(project(cloud, calib), 64, 256))).values
    assert np.array_equal(pixels_to_depth(read_pgm(out)).values,
                          pixels_to_depth(np.round(expected * 256 / 1000)).values)


def test_missing_calib_exit_2(scene, tmp_path, capsys):
    bin_path, _ = scene
    missing = tmp_path / "nowhere" / "calib.txt"
    rc = main(["complete", "--bin", str(bin_path), "--calib", str(missing)])
    assert rc == 2
    assert str(missing) in capsys.readouterr().err


def test_stage_tagged_errors(scene, tmp_path, capsys):
    bin_path, calib_path = scene
    (tmp_path / "bad.bin").write_bytes(b"\0" * 10)
    assert main(["complete", "--bin", str(tmp_path / "bad.bin"), "--calib", str(calib_path)]) == 2
    assert "[input]" in capsys.readouterr().err
    (tmp_path / "w.bin").write_bytes(b"nope")
    assert main(["complete", "--bin", str(bin_path), "--calib", str(calib_path),
                 "--weights", str(tmp_path / "w.bin")]) == 2
    assert "[weights]" in capsys.readouterr().err


def test_exactly_one_source(scene):
    _, calib_path = scene
    with pytest.raises(SystemExit):
        main(["complete", "--calib", str(calib_path)])
    with pytest.raises(SystemExit):
        main(["complete", "--bin", "a", "--udp", "2368", "--calib", str(calib_path)])


@pytest.mark.parametrize("flags", [[], ["--ds", "--fixed", "--tile", "32"]])
def test_complete_full_size_output(scene, tmp_path, flags):
    bin_path, calib_path = scene
    out = tmp_path / "full.pgm"
    assert main(["complete", "--bin", str(bin_path), "--calib", str(calib_path), "--out", str(out)] + flags) == 0
    assert read_pgm(out).shape == (256, 1216)


def test_complete_udp_replay(scene, tmp_path):
    import socket
    import threading
    import time

    from packets import sweep_packets

    _, calib_path = scene
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    out = tmp_path / "live.pgm"

    def send():
        time.sleep(0.3)
        tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        for data in sweep_packets(start=0, step=40):
            tx.sendto(data, ("127.0.0.1", port))
            time.sleep(0.0005)
        tx.close()

    threading.Thread(target=send, daemon=True).start()
    rc = main(["complete", "--udp", str(port), "--host", "127.0.0.1", "--idle-timeout", "1",
               "--calib", str(calib_path), "--size", "64x256", "--ds", "--out", str(out)])
    assert rc == 0
    assert read_pgm(out).shape == (64, 256)


def test_verify_default_passes(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert sum(line.startswith("PASS") for line in lines) == 4


def test_verify_reproducible(capsys):
    main(["verify", "--cases", "100", "--seed", "7"])
    first = capsys.readouterr().out
    main(["verify", "--cases", "100", "--seed", "7"])
    assert capsys.readouterr().out == first


def test_verify_detects_fault(capsys):
    assert main(["verify", "--cases", "20", "--inject-fault"]) != 0
    assert "FAIL deconv" in capsys.readouterr().out


def test_count_output(capsys):
    assert main(["count", "--ds"]) == 0
    out = capsys.readouterr().out
    factor = float(re.search(r"ds reduction factor: (\d+\.\d\d)$", out, re.M).group(1))
    assert 6.0 <= factor <= 8.5
    assert re.search(r"^ds: params=[\d,]+ ops=\d+\.\d\d GOP$", out, re.M)
    assert re.search(r"^standard: params=[\d,]+ ops=\d+\.\d\d GOP$", out, re.M)
    rows = [l.split()[0] for l in out.splitlines()[1:] if l and not l.startswith(" ") and ":" not in l]
    assert rows == ["in_conv", "e1", "e2", "e3", "e4", "d1", "d2", "d3", "out_conv1", "out_conv2"]
    assert any(l.startswith("  ") and "/ds]" in l for l in out.splitlines())


def bench(capsys, *flags):
    assert main(["bench", "--frames", "2", "--warmup", "0", "--size", "32x128", "--ds"] + list(flags)) == 0
    return capsys.readouterr().out


def test_bench_report(capsys):
    out = bench(capsys)
    latency = float(re.search(r"latency=(\S+) ms", out).group(1))
    fps = float(re.search(r"fps=(\S+)", out).group(1))
    assert fps == pytest.approx(1000 / latency, rel=1e-3)
    for stage in ("project", "dt", "cnn", "combine"):
        assert re.search(rf"^{stage}\s+mean=.*median=", out, re.M)
    assert "GOPS" in out


def test_bench_fixed_same_ops_and_checksum_stable(capsys):
    real = bench(capsys)
    fixed = bench(capsys, "--fixed")
    again = bench(capsys, "--fixed")
    ops = re.compile(r"ops=(\S+) GOP")
    checksum = re.compile(r"checksum=(\w+)")
    assert ops.search(real).group(1) == ops.search(fixed).group(1)
    assert checksum.search(fixed).group(1) == checksum.search(again).group(1)
