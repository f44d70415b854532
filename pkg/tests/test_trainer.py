import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from faceslider.blendshape import write_basis, build_sparse_basis
from faceslider.networks import load_checkpoint
from faceslider.synth import build_landmark_difference_matrix, generate_dataset
from faceslider.trainer import (
    TrainConfig,
    ablation_run,
    train,
)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny dataset + matching basis shared by the trainer tests."""
    root = tmp_path_factory.mktemp("trainws")
    manifest = generate_dataset(root / "data", 6, 6, 1.0, seed=41, size=(32, 32))
    eval_manifest = generate_dataset(root / "eval", 3, 4, 0.0, seed=42, size=(32, 32))
    D = build_landmark_difference_matrix(manifest)
    basis, _, _ = build_sparse_basis(D, h=8, sparsity_weight=1e-3)
    basis_path = root / "basis.bin"
    write_basis(basis, basis_path)
    return {
        "root": root,
        "manifest": manifest,
        "eval_manifest": eval_manifest,
        "basis": basis_path,
    }


def micro_config(ws, **overrides) -> TrainConfig:
    defaults = dict(
        dataset=str(ws["manifest"]),
        basis=str(ws["basis"]),
        eval_dataset=str(ws["eval_manifest"]),
        batch_size=6,
        epochs_paired=1,
        epochs_unpaired=1,
        seed=7,
        preset="micro",
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def read_metrics(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


class TestConfig:
    def test_toml_round_trip(self, workspace):
        cfg = micro_config(workspace, ablation=("id",), lambda_att=0.5)
        back = TrainConfig.from_toml(cfg.to_toml())
        assert back == cfg
        assert back.config_hash() == cfg.config_hash()

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            TrainConfig(optimizer_beta1=1.5)
        with pytest.raises(ValueError):
            TrainConfig(adversarial_mode="other")
        with pytest.raises(ValueError):
            TrainConfig(ablation=("bogus",))
        with pytest.raises(ValueError):
            TrainConfig(n_critic=0)
        with pytest.raises(ValueError):
            TrainConfig.from_toml("nonsense_key = 3\n")

    def test_missing_files_rejected(self, workspace, tmp_path):
        cfg = micro_config(workspace, dataset=str(tmp_path / "nope.jsonl"))
        with pytest.raises(FileNotFoundError):
            train(cfg, tmp_path / "out")

    def test_hash_mismatch_refused(self, workspace, tmp_path):
        cfg = micro_config(workspace, basis_hash="deadbeef")
        with pytest.raises(ValueError, match="hash mismatch"):
            train(cfg, tmp_path / "out")


class TestTrainLoop:
    def test_zero_epochs_initial_bundle(self, workspace, tmp_path):
        cfg = micro_config(workspace, epochs_paired=0, epochs_unpaired=0)
        result = train(cfg, tmp_path / "zero")
        assert not result.aborted
        events = [m.get("event") for m in read_metrics(result.metrics_path)]
        assert events == ["header", "end"]
        g, d, emb, meta, _ = load_checkpoint(result.checkpoint_path, basis_path=workspace["basis"])
        assert meta["g_steps"] == 0 and meta["d_steps"] == 0

    def test_deterministic_metrics_bitwise(self, workspace, tmp_path):
        cfg = micro_config(workspace)
        r1 = train(cfg, tmp_path / "a")
        r2 = train(cfg, tmp_path / "b")
        assert Path(r1.metrics_path).read_bytes() == Path(r2.metrics_path).read_bytes()

    def test_phase_guard_and_events(self, workspace, tmp_path):
        cfg = micro_config(workspace)
        result = train(cfg, tmp_path / "phases")
        rows = read_metrics(result.metrics_path)
        paired_g = [r for r in rows if r.get("role") == "generator" and r["phase"] == "paired"]
        unpaired_g = [r for r in rows if r.get("role") == "generator" and r["phase"] == "unpaired"]
        assert paired_g and unpaired_g
        assert all("term_gen" in r for r in paired_g)
        assert all("term_gen" not in r for r in unpaired_g)
        assert len(result.eval_history) == cfg.epochs_paired + cfg.epochs_unpaired

    def test_n_critic_pattern(self, workspace, tmp_path):
        cfg = micro_config(workspace, epochs_paired=0, epochs_unpaired=1, n_critic=2)
        result = train(cfg, tmp_path / "ncritic")
        roles = [r["role"] for r in read_metrics(result.metrics_path) if "role" in r]
        # every generator step is preceded by exactly n_critic discriminator steps
        count = 0
        for role in roles:
            if role == "discriminator":
                count += 1
            else:
                assert count == 2
                count = 0
        assert "generator" in roles

    def test_checkpoint_resume_bitwise(self, workspace, tmp_path):
        straight = train(micro_config(workspace, epochs_paired=0, epochs_unpaired=2),
                         tmp_path / "straight")
        first = train(micro_config(workspace, epochs_paired=0, epochs_unpaired=1),
                      tmp_path / "first")
        resumed = train(
            micro_config(workspace, epochs_paired=0, epochs_unpaired=2),
            tmp_path / "resumed",
            resume=first.checkpoint_path,
        )
        g1, d1, _, _, _ = load_checkpoint(straight.checkpoint_path)
        g2, d2, _, _, _ = load_checkpoint(resumed.checkpoint_path)
        for a, b in zip(g1.state_dict().values(), g2.state_dict().values()):
            np.testing.assert_array_equal(a.numpy(), b.numpy())
        for a, b in zip(d1.state_dict().values(), d2.state_dict().values()):
            np.testing.assert_array_equal(a.numpy(), b.numpy())

    def test_resume_config_mismatch_rejected(self, workspace, tmp_path):
        first = train(micro_config(workspace, epochs_paired=0, epochs_unpaired=1),
                      tmp_path / "base")
        other = micro_config(workspace, epochs_paired=0, epochs_unpaired=2, seed=99)
        with pytest.raises(ValueError, match="incompatible"):
            train(other, tmp_path / "bad", resume=first.checkpoint_path)

    def test_nan_abort_keeps_checkpoint(self, workspace, tmp_path):
        cfg = micro_config(
            workspace, epochs_paired=0, epochs_unpaired=3, optimizer_step_size=1e8
        )
        result = train(cfg, tmp_path / "nan")
        assert result.aborted
        assert "non-finite" in result.abort_reason
        load_checkpoint(result.checkpoint_path)  # still a readable bundle
        rows = read_metrics(result.metrics_path)
        assert rows[-1]["aborted"] is True

    def test_wgp_mode_runs(self, workspace, tmp_path):
        cfg = micro_config(workspace, epochs_paired=0, epochs_unpaired=1,
                           adversarial_mode="wgp")
        result = train(cfg, tmp_path / "wgp")
        assert not result.aborted

    def test_mask_saturation_direction(self, workspace, tmp_path):
        common = dict(
            epochs_paired=0,
            epochs_unpaired=3,
            ablation=("id", "gen"),
            eval_dataset="",
        )
        free = train(
            micro_config(workspace, lambda_att=0.0, **common), tmp_path / "att0"
        )
        constrained = train(
            micro_config(workspace, lambda_att=0.3, **common), tmp_path / "att03"
        )

        def final_mask_mean(res):
            rows = [r for r in read_metrics(res.metrics_path) if "mask_mean" in r]
            return np.mean([r["mask_mean"] for r in rows[-6:]])

        assert final_mask_mean(free) > final_mask_mean(constrained)


class TestAblationRun:
    def test_single_full_variant_matches_plain_train(self, workspace, tmp_path):
        cfg = micro_config(workspace, epochs_paired=1, epochs_unpaired=0)
        report = ablation_run(cfg, tmp_path / "abl", variants=("full",))
        assert "identity_cosine" in report["full"]
        plain = train(cfg, tmp_path / "plain")
        g1, d1, _, _, _ = load_checkpoint(tmp_path / "abl" / "full" / "ckpt_final.npz")
        g2, d2, _, _, _ = load_checkpoint(plain.checkpoint_path)
        for a, b in zip(g1.state_dict().values(), g2.state_dict().values()):
            np.testing.assert_array_equal(a.numpy(), b.numpy())

    def test_no_gen_variant_keeps_phase_order(self, workspace, tmp_path):
        cfg = micro_config(workspace, epochs_paired=1, epochs_unpaired=1, ablation=("gen",))
        result = train(cfg, tmp_path / "nogen")
        rows = read_metrics(result.metrics_path)
        phases = [r["phase"] for r in rows if "role" in r]
        # paired phase still runs first, just without the generation term
        assert phases[0] == "paired" and phases[-1] == "unpaired"
        paired_g = [r for r in rows if r.get("role") == "generator" and r["phase"] == "paired"]
        assert paired_g and all("term_gen" not in r for r in paired_g)
