import json
import subprocess
import sys

import numpy as np
import pytest

from cdgs import io
from cdgs.cli import main
from cdgs.losses import psnr
from cdgs.scene import MotionModel, Scene
from cdgs.synthetic import benchmark_dataset, random_scene


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    io.write_manifest(root, benchmark_dataset(n_cameras=3, n_times=4, size=24, n_gaussians=8))
    return root


@pytest.fixture(scope="module")
def trained(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "s.cdgs"
    rc = main(["train", "--data", str(dataset_dir), "--out", str(out), "--l", "2", "--sh", "0",
               "--iters", "60", "--static-iters", "20", "--init-points", "200", "--log-every", "20",
               "--quiet"])
    assert rc == 0
    return out


def inline_camera(size=32, fx=40.0):
    K = [fx, 0, size / 2, 0, fx, size / 2, 0, 0, 1]
    pose = [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 4]
    return ",".join(str(v) for v in K + pose)


def test_train_outputs(trained):
    assert trained.exists()
    rec = json.loads(trained.with_name(trained.name + ".run.json").read_text())
    assert rec["seed"] == 0 and rec["version"] and rec["config"]["static_iters"] == 20
    assert rec["heldout"]["n_frames"] == 3
    log = [json.loads(line) for line in trained.with_name(trained.name + ".log.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in log] == [20, 40, 60]


def test_train_defaults():
    from cdgs.cli import build_parser
    a = build_parser().parse_args(["train", "--data", "d", "--out", "o"])
    assert (a.iters, a.static_iters, a.lambda_dssim, a.lambda_flow, a.l) == (30000, None, 0.2, 1000.0, 5)


def test_render_matches_probe_psnr(trained, dataset_dir, tmp_path):
    log = [json.loads(x) for x in trained.with_name(trained.name + ".log.jsonl").read_text().splitlines()]
    man = io.load_manifest(dataset_dir)
    probe = next(i for i, f in enumerate(man.frames) if f.split == "test")
    rec = man.frames[probe]
    out = tmp_path / "r.png"
    t = rec.time_index / man.n_times
    assert main(["render", "--scene", str(trained), "--camera", str(probe), "--data", str(dataset_dir),
                 "--t", str(t), "--out", str(out)]) == 0
    got = psnr(io.read_image(out), io.read_image(rec.image_path))
    assert got == pytest.approx(log[-1]["psnr_probe"], abs=0.3)


def test_render_static_flow_is_zero(tmp_path):
    s = random_scene(np.random.default_rng(0), 5, MotionModel.fourier(2), 0)
    s.center[:, :, 1:] = 0
    io.save_scene(tmp_path / "s.cdgs", s)
    assert main(["render", "--scene", str(tmp_path / "s.cdgs"), "--camera", inline_camera(), "--t", "0.3",
                 "--out", str(tmp_path / "a.png"), "--flow-out", str(tmp_path / "f.flo"), "--dt", "0.05"]) == 0
    for name in ("f.flo", "f_bwd.flo"):
        flow, valid = io.read_flo(tmp_path / name)
        assert valid.all() and not flow.any()


def test_render_bad_t(tmp_path, capsys):
    io.save_scene(tmp_path / "s.cdgs", random_scene(np.random.default_rng(0), 2, MotionModel.fourier(1), 0))
    rc = main(["render", "--scene", str(tmp_path / "s.cdgs"), "--camera", inline_camera(), "--t", "1.5",
               "--out", str(tmp_path / "a.png")])
    assert rc == 2 and "outside" in capsys.readouterr().err


def test_info_payload_line(tmp_path, capsys):
    s = random_scene(np.random.default_rng(0), 1000, MotionModel.fourier(5), 3)
    io.save_scene(tmp_path / "s.cdgs", s)
    assert main(["info", "--scene", str(tmp_path / "s.cdgs")]) == 0
    out = capsys.readouterr().out
    assert "372,000 payload bytes" in out and "51.2x" in out
    assert main(["info", "--scene", str(tmp_path / "s.cdgs"), "--json"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["payload_bytes"] == 372_000 and info["file_bytes"] == 372_000 + io.HEADER_SIZE


def test_eval_identical_is_inf(tmp_path, capsys):
    data = benchmark_dataset(n_cameras=2, n_times=2, size=16, n_gaussians=3, with_flow=False)
    for f in data.frames + data.test_frames:
        f.image = np.zeros_like(f.image)
    io.write_manifest(tmp_path / "d", data)
    io.save_scene(tmp_path / "e.cdgs", Scene.empty(MotionModel.fourier(2), 0))
    assert main(["eval", "--scene", str(tmp_path / "e.cdgs"), "--data", str(tmp_path / "d"), "--json"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["psnr"] == "inf"
    assert main(["eval", "--scene", str(tmp_path / "e.cdgs"), "--data", str(tmp_path / "d")]) == 0
    assert "PSNR inf dB" in capsys.readouterr().out


def test_compose_cli(tmp_path, capsys):
    m = MotionModel.fourier(1)
    io.save_scene(tmp_path / "a.cdgs", random_scene(np.random.default_rng(0), 3, m, 1))
    io.save_scene(tmp_path / "b.cdgs", random_scene(np.random.default_rng(1), 2, m, 1))
    assert main(["compose", "--a", str(tmp_path / "a.cdgs"), "--b", str(tmp_path / "b.cdgs"),
                 "--translate", "1,0,0", "--rotate", "0,0,90", "--tshift", "0.1",
                 "--out", str(tmp_path / "c.cdgs")]) == 0
    assert len(io.load_scene(tmp_path / "c.cdgs")) == 5
    io.save_scene(tmp_path / "z.cdgs", random_scene(np.random.default_rng(1), 2, MotionModel.fourier(2), 1))
    assert main(["compose", "--a", str(tmp_path / "a.cdgs"), "--b", str(tmp_path / "z.cdgs"),
                 "--out", str(tmp_path / "d.cdgs")]) == 2


def test_gradcheck_cli(capsys):
    assert main(["gradcheck", "--n", "3", "--res", "16", "--loss", "total", "--json"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["passed"] and res["results"][0]["h"] == 1e-5
    # an impossible tolerance must fail with the numeric exit code
    assert main(["gradcheck", "--n", "3", "--res", "16", "--loss", "recon", "--tol", "1e-30"]) == 4


def test_bench_monotone_in_resolution(capsys):
    fps = []
    for size in (64, 128, 256):
        assert main(["bench", "--size", str(size), "--frames", "3", "--json"]) == 0
        fps.append(json.loads(capsys.readouterr().out)["fps"])
    # allow 10% scheduler noise between neighbouring sizes
    assert fps[0] * 1.1 >= fps[1] and fps[1] * 1.1 >= fps[2]


def test_exit_codes(tmp_path):
    assert main(["info", "--scene", str(tmp_path / "missing.cdgs")]) == 3
    (tmp_path / "bad.cdgs").write_bytes(b"nope")
    assert main(["info", "--scene", str(tmp_path / "bad.cdgs")]) == 3
    with pytest.raises(SystemExit) as e:
        main(["info", "--bogus"])
    assert e.value.code == 2
    assert main(["render", "--scene", str(tmp_path / "bad.cdgs"), "--camera", "1,2,3", "--t", "0",
                 "--out", str(tmp_path / "x.png")]) in (2, 3)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cdgs", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("cdgs ")
