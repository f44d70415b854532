import base64
import io
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient
from PIL import Image

from faceslider.cli import main as cli_main
from faceslider.engine import InferenceEngine
from faceslider.service import create_app
from faceslider.synth import load_png_image


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Dataset, basis, config and a briefly-trained micro checkpoint."""
    root = tmp_path_factory.mktemp("cliws")
    runner = CliRunner()
    r = runner.invoke(cli_main, [
        "gen-data", "--out", str(root / "data"), "--identities", "4",
        "--per-identity", "4", "--paired-fraction", "1.0", "--seed", "13",
        "--size", "32",
    ])
    assert r.exit_code == 0, r.output
    manifest = root / "data" / "manifest.jsonl"
    r = runner.invoke(cli_main, [
        "build-basis", "--dataset", str(manifest), "--out", str(root / "basis.bin"),
        "--components", "8", "--sparsity", "0.001",
    ])
    assert r.exit_code == 0, r.output
    config = root / "train.toml"
    config.write_text(
        f'dataset = "{manifest}"\n'
        f'basis = "{root / "basis.bin"}"\n'
        "batch_size = 4\n"
        "epochs_paired = 1\n"
        "epochs_unpaired = 1\n"
        "seed = 3\n"
        'preset = "micro"\n'
    )
    r = runner.invoke(cli_main, [
        "train", "--config", str(config), "--out", str(root / "run"),
    ])
    assert r.exit_code == 0, r.output
    ckpt = root / "run" / "ckpt_final.npz"
    _, records = __import__("faceslider.synth", fromlist=["load_manifest"]).load_manifest(manifest)
    return {
        "root": root,
        "manifest": manifest,
        "basis": root / "basis.bin",
        "ckpt": ckpt,
        "image": records[0].image_path,
        "image2": records[5].image_path,
    }


def common_args(ws):
    return ["--checkpoint", str(ws["ckpt"]), "--basis", str(ws["basis"])]


class TestCli:
    def test_edit_zero_params_writes_image(self, ws, tmp_path):
        out = tmp_path / "neutral.png"
        r = CliRunner().invoke(cli_main, [
            "edit", *common_args(ws), "--image", str(ws["image"]),
            "--out", str(out), "--zero",
        ])
        assert r.exit_code == 0, r.output
        img = load_png_image(out)
        assert img.shape == (32, 32, 3)

    def test_edit_single_param_flag(self, ws, tmp_path):
        out = tmp_path / "smile.png"
        r = CliRunner().invoke(cli_main, [
            "edit", *common_args(ws), "--image", str(ws["image"]),
            "--out", str(out), "--param", "0=0.8", "--param", "3=-0.5",
        ])
        assert r.exit_code == 0, r.output
        assert out.exists()

    def test_sweep_emits_eleven_step_strip(self, ws, tmp_path):
        out = tmp_path / "sweep.png"
        r = CliRunner().invoke(cli_main, [
            "edit", *common_args(ws), "--image", str(ws["image"]),
            "--out", str(out), "--sweep", "0", "--steps", "11",
        ])
        assert r.exit_code == 0, r.output
        files = sorted(tmp_path.glob("sweep_*.png"))
        assert len(files) == 11
        # endpoint conditioning differs on the raw engine floats (PNG
        # quantization can hide sub-1/255 changes of a barely-trained net)
        engine = InferenceEngine.from_files(ws["ckpt"], ws["basis"])
        img = load_png_image(ws["image"])
        lo = engine.edit(img, np.array([-1.0] + [0.0] * 7)).image
        hi = engine.edit(img, np.array([1.0] + [0.0] * 7)).image
        assert np.abs(lo.astype(np.float64) - hi).sum() > 0

    def test_transfer_and_interpolation(self, ws, tmp_path):
        out = tmp_path / "tr.png"
        r = CliRunner().invoke(cli_main, [
            "transfer", *common_args(ws), "--source", str(ws["image"]),
            "--target", str(ws["image2"]), "--out", str(out),
        ])
        assert r.exit_code == 0, r.output
        assert out.exists()
        r = CliRunner().invoke(cli_main, [
            "transfer", *common_args(ws), "--source", str(ws["image"]),
            "--target", str(ws["image2"]), "--out", str(tmp_path / "strip.png"),
            "--interpolate", "5",
        ])
        assert r.exit_code == 0, r.output
        assert len(sorted(tmp_path.glob("strip_*.png"))) == 5

    def test_param_track_frames(self, ws, tmp_path):
        track = tmp_path / "track.jsonl"
        track.write_text("\n".join(json.dumps([0.1 * k] * 8) for k in range(3)) + "\n")
        r = CliRunner().invoke(cli_main, [
            "transfer", *common_args(ws), "--source", str(ws["image"]),
            "--out", str(tmp_path / "frame.png"), "--param-track", str(track),
        ])
        assert r.exit_code == 0, r.output
        assert len(sorted(tmp_path.glob("frame_*.png"))) == 3

    def test_eval_consistency_json(self, ws, tmp_path):
        out = tmp_path / "report.json"
        r = CliRunner().invoke(cli_main, [
            "eval", *common_args(ws), "--dataset", str(ws["manifest"]),
            "--mode", "consistency", "--out", str(out), "--limit", "4",
        ])
        assert r.exit_code == 0, r.output
        report = json.loads(out.read_text())
        assert report["metrics"]["mode"] == "consistency"
        assert np.isfinite(report["metrics"]["relative_error"])

    def test_eval_matches_library_output(self, ws, tmp_path):
        from faceslider.evaluation import regression_error_report
        from faceslider.synth import load_manifest

        r = CliRunner().invoke(cli_main, [
            "eval", *common_args(ws), "--dataset", str(ws["manifest"]),
            "--mode", "consistency", "--seed", "5", "--limit", "4",
        ])
        assert r.exit_code == 0, r.output
        cli_report = json.loads(r.output.strip().splitlines()[-1])
        engine = InferenceEngine.from_files(ws["ckpt"], ws["basis"])
        _, records = load_manifest(ws["manifest"])
        lib_report = regression_error_report(engine, records[:4], mode="consistency", seed=5)
        assert cli_report["metrics"] == json.loads(lib_report.to_json())["metrics"]

    def test_unknown_flag_usage_exit_2(self, ws):
        r = CliRunner().invoke(cli_main, ["edit", "--bogus-flag", "x"])
        assert r.exit_code == 2

    def test_runtime_failure_nonzero_exit(self, ws, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not a png")
        r = CliRunner().invoke(cli_main, [
            "edit", *common_args(ws), "--image", str(bad),
            "--out", str(tmp_path / "out.png"), "--zero",
        ])
        assert r.exit_code != 0


@pytest.fixture(scope="module")
def client(ws):
    engine = InferenceEngine.from_files(ws["ckpt"], ws["basis"])
    app = create_app(engine, dataset_manifest=ws["manifest"])
    return TestClient(app)


def b64_of(path):
    return base64.b64encode(Path(path).read_bytes()).decode("ascii")


class TestService:
    def test_model_info_matches_basis(self, ws, client):
        info = client.get("/model/info").json()
        assert info["n_params"] == 8
        assert info["image_size"] == 32
        assert len(info["labels"]) == 8
        assert len(info["scales"]) == 8

    def test_edit_neutralize_parity_with_cli(self, ws, client, tmp_path):
        out = tmp_path / "cli.png"
        r = CliRunner().invoke(cli_main, [
            "edit", *common_args(ws), "--image", str(ws["image"]),
            "--out", str(out), "--zero",
        ])
        assert r.exit_code == 0
        resp = client.post("/edit", json={"image_b64": b64_of(ws["image"]), "mode": "neutralize"})
        assert resp.status_code == 200
        service_png = base64.b64decode(resp.json()["image_b64"])
        assert service_png == out.read_bytes()

    def test_repeated_requests_byte_identical(self, ws, client):
        req = {"image_b64": b64_of(ws["image"]), "mode": "edit", "params": [0.3] * 8}
        a = client.post("/edit", json=req)
        b = client.post("/edit", json=req)
        assert a.content == b.content

    def test_regress_edit_roundtrip(self, ws, client):
        reg = client.post("/regress", json={"image_b64": b64_of(ws["image"])})
        assert reg.status_code == 200
        params = reg.json()["params"]
        assert len(params) == 8
        edit = client.post("/edit", json={
            "image_b64": b64_of(ws["image"]), "mode": "edit", "params": params,
        })
        assert edit.status_code == 200
        clamped = np.clip(np.asarray(params), -1, 1)
        np.testing.assert_allclose(edit.json()["applied_params"], clamped, atol=1e-12)

    def test_interpolation_endpoint_vectors_exact(self, ws, client):
        source_params = [0.5, -0.25, 0.0, 0.75, -1.0, 0.1, 0.2, -0.3]
        trg_b64 = b64_of(ws["image2"])
        reg = client.post("/regress", json={"image_b64": trg_b64}).json()["params"]
        trg_clamped = np.clip(np.asarray(reg), -1, 1)
        at_zero = client.post("/edit", json={
            "image_b64": b64_of(ws["image"]), "mode": "interpolate",
            "params": source_params, "target_image_b64": trg_b64, "a": 0.0,
        }).json()["applied_params"]
        np.testing.assert_allclose(at_zero, trg_clamped, atol=1e-12)
        at_one = client.post("/edit", json={
            "image_b64": b64_of(ws["image"]), "mode": "interpolate",
            "params": source_params, "target_image_b64": trg_b64, "a": 1.0,
        }).json()["applied_params"]
        np.testing.assert_allclose(at_one, source_params, atol=1e-12)

    def test_dataset_index_source(self, ws, client):
        resp = client.post("/edit", json={"dataset_index": 0, "mode": "neutralize"})
        assert resp.status_code == 200
        resp = client.post("/edit", json={"dataset_index": 10**6, "mode": "neutralize"})
        assert resp.status_code == 400

    def test_malformed_requests_400(self, ws, client):
        assert client.post("/edit", json={"mode": "edit"}).status_code == 400
        assert client.post("/edit", json={
            "image_b64": "!!notbase64!!", "mode": "neutralize"
        }).status_code == 400
        resp = client.post("/edit", json={"image_b64": b64_of(ws["image"]), "mode": "warp"})
        assert resp.status_code == 400
        # field-level message shape for body validation failures
        resp = client.post("/edit", json={"a": "NaN?", "mode": "interpolate"})
        assert resp.status_code == 400
        assert "errors" in resp.json()

    def test_param_length_mismatch_422(self, ws, client):
        resp = client.post("/edit", json={
            "image_b64": b64_of(ws["image"]), "mode": "edit", "params": [0.0] * 5,
        })
        assert resp.status_code == 422

    def test_resize_flagged(self, ws, client):
        big = Image.fromarray(np.zeros((64, 64, 3), dtype=np.uint8))
        buf = io.BytesIO()
        big.save(buf, format="PNG")
        resp = client.post("/edit", json={
            "image_b64": base64.b64encode(buf.getvalue()).decode(),
            "mode": "neutralize",
        })
        assert resp.status_code == 200
        assert resp.json()["resized"] is True
