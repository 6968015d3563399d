from pathlib import Path

import numpy as np
import pytest

from tactilekit.calibration import CalibrationSettings
from tactilekit.config import (ConfigError, RunConfig, calibration_settings, config_from_dict,
                               load_config)
from tactilekit.io import (CorruptFrameError, list_frames, read_csv, read_frame, read_height_png, read_ply,
                           write_csv, write_frame, write_height_png, write_ply)

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.toml"


# ---------------------------------------------------------------- config

def test_defaults_match_library_defaults():
    s = calibration_settings(RunConfig())
    assert s == CalibrationSettings()


def test_example_config_loads():
    cfg = load_config(EXAMPLE)
    assert cfg.version == 1
    assert cfg.base_dir == EXAMPLE.parent
    assert cfg.resolve(cfg.paths.bundle) == EXAMPLE.parent / "../out/bundle.tkb"
    d = cfg.to_dict()
    ref = RunConfig().to_dict()
    d.pop("paths"), ref.pop("paths")
    assert d == ref


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[stream]\nport = 1\nbogus = 2\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_config(p)
    p.write_text("[nonsense]\na = 1\n")
    with pytest.raises(ConfigError, match="nonsense"):
        load_config(p)


@pytest.mark.parametrize("data", [
    {"stream": {"port": "80"}},
    {"stream": {"port": 8.5}},
    {"calibration": {"seed": True}},
    {"controller": {"k_f": "fast"}},
    {"rolling": {"objects": "sphere"}},
    {"stream": 3},
    {"version": 2},
    {"surface": {"n_u": 0}},
    {"rolling": {"region": [0.1, 0.2]}},
    {"stream": {"target_fps": 0.0}},
    {"reconstruct": {"downsample": 0}},
])
def test_bad_values_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_int_accepted_for_float():
    cfg = config_from_dict({"controller": {"setpoint": 1}})
    assert cfg.controller.setpoint == 1.0 and isinstance(cfg.controller.setpoint, float)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    p = tmp_path / "bad.toml"
    p.write_text("[stream\nport=")
    with pytest.raises(ConfigError):
        load_config(p)
    assert load_config(None).to_dict() == RunConfig().to_dict()


# ---------------------------------------------------------------- files

def test_ply_round_trip(tmp_path, rng):
    pts = rng.normal(size=(500, 3)) * 10
    disp = rng.uniform(0, 2, 500)
    write_ply(tmp_path / "c.ply", pts, disp)
    raw = (tmp_path / "c.ply").read_bytes()
    assert raw.startswith(b"ply\nformat binary_little_endian 1.0\nelement vertex 500\n")
    p2, extra = read_ply(tmp_path / "c.ply")
    assert np.allclose(p2, pts, rtol=1e-6, atol=1e-5)
    assert np.allclose(extra["displacement"], disp, atol=1e-6)
    write_ply(tmp_path / "d.ply", pts)
    assert read_ply(tmp_path / "d.ply")[1] == {}


def test_height_png_round_trip(tmp_path, rng):
    h = rng.uniform(0, 3, (48, 64))
    h[0, 0] = -0.5
    write_height_png(tmp_path / "h.png", h)
    back = read_height_png(tmp_path / "h.png")
    assert back.shape == h.shape
    assert back[0, 0] == 0
    assert np.abs(back - np.clip(h, 0, None)).max() <= 0.0005 + 1e-12
    write_frame(tmp_path / "rgb.png", np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(ValueError):
        read_height_png(tmp_path / "rgb.png")


def test_frames_folder(tmp_path, rng):
    pix = rng.integers(0, 256, (30, 40, 3), dtype=np.uint8)
    write_frame(tmp_path / "b.png", pix)
    write_frame(tmp_path / "a.png", pix)
    (tmp_path / "notes.txt").write_text("x")
    (tmp_path / "c.jpg").write_bytes(b"garbage")
    names = [p.name for p in list_frames(tmp_path)]
    assert names == ["a.png", "b.png", "c.jpg"]
    f = read_frame(tmp_path / "a.png", 3)
    assert np.array_equal(f.pixels, pix) and f.sequence == 3
    with pytest.raises(CorruptFrameError):
        read_frame(tmp_path / "c.jpg")


def test_csv_round_trip(tmp_path):
    rows = [{"object": "sphere", "trial": 0, "outcome": "success", "duration_s": "1.250", "extra": 1}]
    write_csv(tmp_path / "r.csv", rows, ["object", "trial", "outcome", "duration_s"])
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "object,trial,outcome,duration_s"
    assert read_csv(tmp_path / "r.csv") == [{"object": "sphere", "trial": "0", "outcome": "success",
                                              "duration_s": "1.250"}]
