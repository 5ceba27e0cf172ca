import json

import numpy as np
import pytest

from dilo import io as dio
from dilo.checkpoint import load_bundle, load_surrogate, save_bundle, save_surrogate
from dilo.cli import main
from dilo.inversion import TrajectoryDiagnostics
from dilo.networks import SpectralArch, build_bundle, init_params
from dilo.surrogate import NeuralSurrogate

# --- tensor files -------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(), (0,), (5,), (3, 4), (2, 3, 4, 5)])
def test_tensor_roundtrip_bitwise(tmp_path, shape):
    a = np.random.default_rng(0).standard_normal(shape)
    dio.write_tensor(tmp_path / "a.tnsr", a)
    b = dio.read_tensor(tmp_path / "a.tnsr")
    assert b.dtype == np.float64 and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_tensor_float32_and_special_values():
    a = np.array([np.nan, np.inf, -0.0, 1e-45], dtype=np.float32)
    b = dio.decode_tensor(dio.encode_tensor(a))
    assert b.dtype == np.float32 and a.tobytes() == b.tobytes()


def test_tensor_header_layout():
    buf = dio.encode_tensor(np.zeros((2, 3)))
    assert buf[:8] == b"DILOTNSR" and buf[8:11] == bytes([1, 2, 2])
    assert len(buf) == 11 + 16 + 48


def test_tensor_errors():
    good = dio.encode_tensor(np.arange(6.0).reshape(2, 3))
    with pytest.raises(dio.TruncatedFileError):
        dio.decode_tensor(good[:-1])
    with pytest.raises(dio.TruncatedFileError):
        dio.decode_tensor(good[:14])
    with pytest.raises(dio.BadMagicError):
        dio.decode_tensor(b"NOTATNSR" + good[8:])
    with pytest.raises(dio.UnsupportedVersionError):
        dio.decode_tensor(good[:8] + b"\x02" + good[9:])
    with pytest.raises(dio.UnsupportedDtypeError):
        dio.decode_tensor(good[:9] + b"\x07" + good[10:])
    with pytest.raises(dio.TensorFileError):
        dio.decode_tensor(good + b"\x00")
    with pytest.raises(dio.UnsupportedDtypeError):
        dio.encode_tensor(np.arange(3))


# --- config -----------------------------------------------------------------------------


def test_config_roundtrip():
    cfg = dio.parse_config("[ae]\nepochs = 7\nlr = 0.1\n[invert]\noptimizer = adamw\n")
    assert cfg.ae.epochs == 7 and cfg.ae.lr == 0.1 and cfg.invert.optimizer == "adamw"
    assert cfg.ldm.epochs == 1500  # untouched default
    again = dio.parse_config(dio.serialize_config(cfg))
    assert again == cfg
    assert dio.serialize_config(again) == dio.serialize_config(cfg)


@pytest.mark.parametrize(
    "text, match",
    [
        ("[ae]\nepoch = 3\n", "unknown key"),
        ("[training]\nx = 1\n", "unknown section"),
        ("[ae]\nepochs = many\n", "cannot parse"),
        ("epochs = 3\n", "malformed"),
    ],
)
def test_config_errors(text, match):
    with pytest.raises(dio.ConfigError, match=match):
        dio.parse_config(text)


# --- manifests and checkpoints -------------------------------------------------------------


def test_manifest_detects_tampering(tmp_path):
    dio.write_manifest(tmp_path, {"w.0": np.ones(3)}, {"w": {"kind": "x"}})
    tensors, arch = dio.read_manifest(tmp_path)
    assert np.array_equal(tensors["w.0"], np.ones(3)) and arch["w"] == {"kind": "x"}
    dio.write_tensor(tmp_path / "w.0.tnsr", np.zeros(3))
    with pytest.raises(dio.ManifestError, match="hash mismatch"):
        dio.read_manifest(tmp_path)
    with pytest.raises(dio.ManifestError):
        dio.read_manifest(tmp_path / "missing")


def test_bundle_checkpoint_roundtrip(tmp_path):
    b = build_bundle(grid=8, latent_dim=4, hidden=8, ae_hidden=(8, 8), temb_dim=4, seed=3)
    b.latent_shift = np.arange(4.0)
    save_bundle(tmp_path, b)
    c = load_bundle(tmp_path)
    z = np.random.default_rng(0).standard_normal(4)
    assert np.array_equal(b.decode(z), c.decode(z))
    assert np.array_equal(b.schedule.substeps, c.schedule.substeps)
    assert c.score_arch == b.score_arch


def test_surrogate_checkpoint_roundtrip(tmp_path):
    arch = SpectralArch(grid=8, modes=2, width=4, n_blocks=1, proj_width=4, out_scale=0.3)
    h = NeuralSurrogate(arch, tuple(init_params(0, arch)))
    save_surrogate(tmp_path, h)
    g = load_surrogate(tmp_path)
    a = np.full((8, 8), 0.4)
    assert g.arch == arch and np.array_equal(h(a), g(a))


# --- metrics and seeds ---------------------------------------------------------------------


def _diag():
    d = TrajectoryDiagnostics("adam", 0.1)
    d.loss, d.grad_norm = [1.0, 0.1 + 0.2], [2.0, 1e-17]
    d.grad_norm_exact, d.mae, d.wallclock_ms = [None, 3.0], [0.5, None], [1.5, 2.5]
    return d


def test_metrics_csv(tmp_path):
    text = dio.metrics_csv(_diag())
    lines = text.splitlines()
    assert lines[0] == "iter,loss,grad_norm,grad_norm_exact,mae,wallclock_ms"
    assert lines[1] == "0,1,2,,0.5,"
    dio.emit_metrics(tmp_path / "m.csv", _diag(), timing=True)
    cols = dio.read_metrics(tmp_path / "m.csv")
    assert cols["loss"][1] == 0.1 + 0.2  # 17 significant digits round-trip exactly
    assert cols["grad_norm_exact"] == [None, 3.0] and cols["wallclock_ms"] == [1.5, 2.5]


def test_derive_seed():
    assert dio.derive_seed(0, "a") != dio.derive_seed(0, "b")
    assert dio.derive_seed(5, "a") == dio.derive_seed(5, "a")
    assert dio.derive_seed(1, "x") ^ dio.derive_seed(2, "x") == 3


# --- command line ---------------------------------------------------------------------------

TINY = """
[schedule]
n_substeps = 5
[ae]
latent_dim = 4
hidden1 = 16
hidden2 = 8
epochs = 3
[ldm]
hidden = 16
temb_dim = 4
epochs = 3
[surrogate]
modes = 2
width = 4
n_blocks = 1
proj_width = 8
epochs = 2
n_heldout = 4
[physics]
grid = 8
patterns = 4
n_samples = 20
[invert]
iterations = 4
lr = 0.05
"""


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    capsys.readouterr()
    assert main(["invert", "--out", "/nonexistent/x"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "--ckpt is required" in err[0]


def test_cli_verify(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 10
    assert json.loads((tmp_path / "summary.json").read_text())["result"]["failed"] == []


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.ini"
    cfg.write_text(TINY)
    c = ["--config", str(cfg), "--seed", "3"]
    assert main(["gen-data", *c, "--out", str(root / "data")]) == 0
    assert main(["train-ae", *c, "--data", str(root / "data"), "--out", str(root / "ckpt")]) == 0
    assert main(["train-ldm", *c, "--data", str(root / "data"), "--ckpt", str(root / "ckpt")]) == 0
    assert main(["train-surrogate", *c, "--data", str(root / "data"), "--out", str(root / "sur")]) == 0
    return root, c


def test_cli_pipeline_outputs(pipeline):
    root, c = pipeline
    params = dio.read_tensor(root / "data" / "params.tnsr")
    assert params.shape == (20, 8, 8)
    assert dio.read_tensor(root / "data" / "observations.tnsr").shape == (20, 4, 28)
    assert len(json.loads((root / "ckpt" / "summary.json").read_text())["result"]["losses"]) == 3
    load_surrogate(root / "sur")


def test_cli_invert_is_byte_reproducible(pipeline):
    root, c = pipeline
    outs = []
    for k in range(2):
        out = root / f"inv{k}"
        assert main(["invert", *c, "--ckpt", str(root / "ckpt"), "--out", str(out)]) == 0
        outs.append(out)
    a, b = ((o / "metrics.csv").read_bytes() for o in outs)
    assert a == b and a.startswith(b"iter,loss,") and a.count(b"\n") >= 2
    assert (outs[0] / "a_hat.tnsr").read_bytes() == (outs[1] / "a_hat.tnsr").read_bytes()


def test_cli_other_commands(pipeline, capsys):
    root, c = pipeline
    ck = ["--ckpt", str(root / "ckpt")]
    neural = root / "neural.ini"
    neural.write_text(TINY + "surrogate = neural\ntarget = dataset\ninstance = 2\n")
    assert main(["invert", "--config", str(neural), "--data", str(root / "data"), *ck,
                 "--surrogate-ckpt", str(root / "sur"), "--out", str(root / "invn")]) == 0
    assert main(["dps-baseline", *c, *ck, "--out", str(root / "dps")]) == 0
    assert (root / "dps" / "residuals.csv").read_text().count("\n") == 6
    assert main(["ood-diag", *c, *ck, "--out", str(root / "ood")]) == 0
    assert main(["invert", *c, *ck, "--seeds", "1,2", "--out", str(root / "multi")]) == 0
    assert (root / "multi" / "seed_2" / "metrics.csv").exists()
    capsys.readouterr()
    assert main(["report", "--runs", str(root / "multi")]) == 0
    assert capsys.readouterr().out.count("command=invert") == 2
