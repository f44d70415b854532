"""Two-phase semi-supervised adversarial training.

Phase 1 iterates the paired records (synthetic ground-truth targets, the
generation L1 active); phase 2 iterates all records with random target
vectors and no generation term.  Every batch performs a critic update;
a generator update follows every ``n_critic``-th batch.  All stochastic
choices (shuffles, target sampling, penalty interpolation points) come
from one numpy generator whose state is checkpointed, so a resumed run
reproduces the uninterrupted one bit-identically on the same platform.

NaN policy: a non-finite loss aborts before the optimizer step is
applied and the last good weights are checkpointed; the result carries
``aborted=True`` instead of raising, so sweeps can continue.
"""
from __future__ import annotations

import json
import hashlib
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses as L
from .blendshape import read_basis
from .networks import (
    Discriminator,
    Generator,
    build_embedder,
    embed,
    file_sha256,
    get_preset,
    load_checkpoint,
    pretrain_conv_embedder,
    save_checkpoint,
    to_nchw,
)
from .synth import load_manifest, load_png_image, manifest_hash

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ABLATABLE_TERMS = ("id", "gen")


@dataclass
class TrainConfig:
    dataset: str = ""
    basis: str = ""
    eval_dataset: str = ""
    batch_size: int = 16
    epochs_paired: int = 20
    epochs_unpaired: int = 40
    optimizer_name: str = "adam"
    optimizer_step_size: float = 1e-4
    optimizer_beta1: float = 0.5
    optimizer_beta2: float = 0.999
    seed: int = 0
    adversarial_mode: str = L.RAD
    ablation: tuple = ()
    n_critic: int = 1
    preset: str = "miniature"
    embedder: str = "projection"
    embedder_seed: int = 0
    checkpoint_every_epochs: int = 1
    dataset_hash: str = ""
    basis_hash: str = ""
    lambda_adv: float = 30.0
    lambda_exp: float = 1000.0
    lambda_rec: float = 10.0
    lambda_gen: float = 10.0
    lambda_id: float = 4.0
    lambda_att: float = 0.3
    lambda_gp: float = 10.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch means feed the critic)")
        if self.epochs_paired < 0 or self.epochs_unpaired < 0:
            raise ValueError("epoch counts must be >= 0")
        if not (0 < self.optimizer_beta1 < 1 and 0 < self.optimizer_beta2 < 1):
            raise ValueError("optimizer betas must lie in (0, 1)")
        if self.optimizer_name != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer_name!r}")
        if self.adversarial_mode not in L.ADVERSARIAL_MODES:
            raise ValueError(f"unknown adversarial mode {self.adversarial_mode!r}")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        bad = set(self.ablation) - set(ABLATABLE_TERMS)
        if bad:
            raise ValueError(f"unknown ablation terms {sorted(bad)}")
        self.ablation = tuple(sorted(set(self.ablation)))
        get_preset(self.preset)

    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(
            lambda_adv=self.lambda_adv,
            lambda_exp=self.lambda_exp,
            lambda_rec=self.lambda_rec,
            lambda_gen=self.lambda_gen,
            lambda_id=self.lambda_id,
            lambda_att=self.lambda_att,
            lambda_gp=self.lambda_gp,
        )

    def to_toml(self) -> str:
        lines = []
        for key, value in self.__dict__.items():
            if isinstance(value, str):
                lines.append(f'{key} = "{value}"')
            elif isinstance(value, bool):
                lines.append(f"{key} = {str(value).lower()}")
            elif isinstance(value, tuple):
                items = ", ".join(f'"{v}"' for v in value)
                lines.append(f"{key} = [{items}]")
            elif isinstance(value, float):
                lines.append(f"{key} = {value!r}")
            else:
                lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_toml(cls, text: str) -> "TrainConfig":
        data = tomllib.loads(text)
        if "ablation" in data:
            data["ablation"] = tuple(data["ablation"])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_toml(Path(path).read_text())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()

    def resume_hash(self) -> str:
        """Config identity ignoring the epoch budget (for resume checks)."""
        trimmed = replace(self, epochs_paired=0, epochs_unpaired=0)
        return hashlib.sha256(trimmed.to_toml().encode()).hexdigest()


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    aborted: bool = False
    abort_reason: str = ""
    g_steps: int = 0
    d_steps: int = 0
    eval_history: list = field(default_factory=list)


class _Data:
    """Preloaded dataset arrays (images float32 HWC in [-1,1])."""

    def __init__(self, manifest_path):
        header, records = load_manifest(manifest_path)
        self.header = header
        self.size = int(header["size"][0])
        self.n_params = int(header["n_params"])
        self.images = np.stack([load_png_image(r.image_path) for r in records])
        self.params = np.stack([r.params for r in records]).astype(np.float32)
        self.paired_idx = np.array([i for i, r in enumerate(records) if r.paired], dtype=int)
        self.target_images = {}
        self.target_params = {}
        for i, rec in enumerate(records):
            if rec.paired:
                self.target_images[i] = load_png_image(rec.target_path)
                self.target_params[i] = rec.target_params.astype(np.float32)

    def __len__(self):
        return len(self.images)


def _rng_state_array(rng: np.random.Generator) -> np.ndarray:
    blob = json.dumps(rng.bit_generator.state).encode("utf-8")
    return np.frombuffer(blob, dtype=np.uint8).copy()


def _restore_rng(state_array: np.ndarray) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(bytes(state_array).decode("utf-8"))
    return rng


class Trainer:
    def __init__(self, config: TrainConfig, out_dir, resume: Optional[Path] = None):
        if os.environ.get("SLGAN_THREADS"):
            torch.set_num_threads(int(os.environ["SLGAN_THREADS"]))
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.weights = config.loss_weights()

        if not Path(config.dataset).exists():
            raise FileNotFoundError(f"dataset manifest {config.dataset} not found")
        if not Path(config.basis).exists():
            raise FileNotFoundError(f"basis file {config.basis} not found")
        if config.dataset_hash and manifest_hash(config.dataset) != config.dataset_hash:
            raise ValueError("dataset hash mismatch; refusing to start")
        self.basis_hash = file_sha256(config.basis)
        if config.basis_hash and self.basis_hash != config.basis_hash:
            raise ValueError("basis hash mismatch; refusing to start")

        self.data = _Data(config.dataset)
        basis = read_basis(config.basis)
        if basis.n_components != self.data.n_params:
            raise ValueError(
                f"basis h={basis.n_components} != dataset n_params={self.data.n_params}"
            )
        self.basis_kind = basis.basis_kind
        self.n_params = self.data.n_params
        self.image_size = self.data.size
        self.eval_data = _Data(config.eval_dataset) if config.eval_dataset else None

        preset = get_preset(config.preset)
        if resume is None:
            self.g = Generator(self.n_params, preset, seed=config.seed)
            self.d = Discriminator(self.n_params, preset, seed=config.seed + 1)
            self.embedder = self._build_embedder()
            self.optg = self._make_optimizer(self.g)
            self.optd = self._make_optimizer(self.d)
            self.rng = np.random.default_rng(config.seed)
            self.epochs_done = [0, 0]  # per phase: paired, unpaired
            self.g_steps = 0
            self.d_steps = 0
            self.global_batches = 0
        else:
            self._load_resume_state(resume)
            if self.epochs_done[1] > 0 and self.epochs_done[0] < config.epochs_paired:
                raise ValueError(
                    "cannot grow the paired budget after the unpaired phase started"
                )
        self.g.train()
        self.d.train()

    def _build_embedder(self):
        if self.config.embedder == "trained":
            return pretrain_conv_embedder(seed=self.config.embedder_seed)
        return build_embedder(self.config.embedder, seed=self.config.embedder_seed)

    def _make_optimizer(self, module):
        cfg = self.config
        return torch.optim.Adam(
            module.parameters(),
            lr=cfg.optimizer_step_size,
            betas=(cfg.optimizer_beta1, cfg.optimizer_beta2),
        )

    # --- checkpoint plumbing -------------------------------------------------

    def _opt_arrays(self, prefix, opt):
        arrays = {}
        for pid, state in opt.state_dict()["state"].items():
            for key, val in state.items():
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.array(val)
                arrays[f"{prefix}/{pid}/{key}"] = arr
        return arrays

    def _load_opt_arrays(self, prefix, opt, extra):
        state = {}
        for key, arr in extra.items():
            parts = key.split("/")
            if parts[0] != prefix:
                continue
            pid, name = int(parts[1]), parts[2]
            state.setdefault(pid, {})[name] = torch.from_numpy(np.array(arr))
        sd = opt.state_dict()
        sd["state"] = state
        opt.load_state_dict(sd)

    def save_checkpoint(self, path) -> None:
        meta = {
            "image_size": self.image_size,
            "basis_hash": self.basis_hash,
            "basis_kind": self.basis_kind,
            "config_hash": self.config.config_hash(),
            "resume_hash": self.config.resume_hash(),
            "seed": self.config.seed,
            "adversarial_mode": self.config.adversarial_mode,
            "epochs_done_paired": self.epochs_done[0],
            "epochs_done_unpaired": self.epochs_done[1],
            "g_steps": self.g_steps,
            "d_steps": self.d_steps,
            "global_batches": self.global_batches,
        }
        extra = {"rng/numpy": _rng_state_array(self.rng)}
        extra.update(self._opt_arrays("optg", self.optg))
        extra.update(self._opt_arrays("optd", self.optd))
        save_checkpoint(path, self.g, self.d, meta, embedder=self.embedder, extra_arrays=extra)

    def _load_resume_state(self, path):
        g, d, embedder, meta, extra = load_checkpoint(path, basis_path=self.config.basis)
        if meta.get("resume_hash") != self.config.resume_hash():
            raise ValueError("resume config is incompatible with the checkpoint")
        self.g, self.d = g, d
        self.embedder = embedder if embedder is not None else self._build_embedder()
        self.optg = self._make_optimizer(self.g)
        self.optd = self._make_optimizer(self.d)
        self._load_opt_arrays("optg", self.optg, extra)
        self._load_opt_arrays("optd", self.optd, extra)
        self.rng = _restore_rng(extra["rng/numpy"])
        self.epochs_done = [int(meta["epochs_done_paired"]), int(meta["epochs_done_unpaired"])]
        self.g_steps = int(meta["g_steps"])
        self.d_steps = int(meta["d_steps"])
        self.global_batches = int(meta["global_batches"])

    # --- steps ---------------------------------------------------------------

    def _batch_tensors(self, indices, phase):
        imgs = to_nchw(self.data.images[indices])
        p_org = torch.from_numpy(self.data.params[indices])
        if phase == L.PHASE_PAIRED:
            trg_imgs = to_nchw(np.stack([self.data.target_images[i] for i in indices]))
            p_trg = torch.from_numpy(np.stack([self.data.target_params[i] for i in indices]))
        else:
            trg_imgs = None
            p_trg = torch.from_numpy(
                self.rng.uniform(-1.0, 1.0, size=(len(indices), self.n_params)).astype(
                    np.float32
                )
            )
        return imgs, p_org, trg_imgs, p_trg

    def _critic_scores(self, images):
        return self.d(images).critic_map.flatten(1).mean(dim=1)

    def _d_step(self, imgs, p_org, p_trg, phase):
        with torch.no_grad():
            fake = self.g(imgs, p_trg).composited
        d_real = self.d(imgs)
        real_c = d_real.critic_map.flatten(1).mean(dim=1)
        fake_c = self._critic_scores(fake)
        eps = torch.from_numpy(
            self.rng.uniform(size=(imgs.shape[0], 1, 1, 1)).astype(np.float32)
        )
        interp = eps * imgs + (1.0 - eps) * fake
        gp = L.gradient_penalty(interp, self._critic_scores)
        adv = L.adversarial_loss(real_c, fake_c, gp, self.weights, mode=self.config.adversarial_mode)
        exp_d = L.expression_loss_d(d_real.p_est, p_org)
        total, report = L.total_discriminator_loss(adv, exp_d, self.weights, phase=phase)
        if not torch.isfinite(total):
            return None, float("nan")
        self.optd.zero_grad()
        total.backward()
        self.optd.step()
        self.d_steps += 1
        return report, float(gp.detach())

    def _g_step(self, imgs, p_org, trg_imgs, p_trg, phase):
        out = self.g(imgs, p_trg)
        fake = out.composited
        d_fake = self.d(fake)
        fake_c = d_fake.critic_map.flatten(1).mean(dim=1)
        if self.config.adversarial_mode == L.RAD:
            with torch.no_grad():
                real_mean = self.d(imgs).critic_map.mean()
        else:
            real_mean = 0.0
        adv = L.generator_adversarial_term(fake_c, real_mean, mode=self.config.adversarial_mode)
        rec_out = self.g(fake, p_org)
        rec = L.reconstruction_loss(imgs, rec_out.composited)
        att = L.attention_loss(out.mask, rec_out.mask)
        exp_g = L.expression_loss_g(d_fake.p_est, p_trg)
        id_term = None
        if "id" not in self.config.ablation:
            id_term = L.identity_loss(embed(fake, self.embedder), embed(imgs, self.embedder))
        gen = None
        if phase == L.PHASE_PAIRED and "gen" not in self.config.ablation:
            gen = L.generation_loss(trg_imgs, fake, phase=phase)
        total, report = L.total_generator_loss(
            adv, exp_g, rec, att, self.weights, phase, gen=gen, id_term=id_term
        )
        if not torch.isfinite(total):
            return None, float("nan")
        self.optg.zero_grad()
        total.backward()
        self.optg.step()
        self.g_steps += 1
        return report, float(out.mask.detach().mean())

    def _epoch_eval(self) -> Optional[float]:
        if self.eval_data is None:
            return None
        errs = []
        with torch.no_grad():
            for start in range(0, len(self.eval_data), 64):
                imgs = to_nchw(self.eval_data.images[start : start + 64])
                est = self.d(imgs).p_est.numpy()
                truth = self.eval_data.params[start : start + 64]
                norms = np.linalg.norm(truth, axis=1)
                keep = norms >= 1e-6
                errs.extend(
                    np.linalg.norm(truth[keep] - est[keep], axis=1) / norms[keep]
                )
        return float(np.mean(errs))

    # --- main loop -------------------------------------------------------------

    def run(self) -> TrainResult:
        cfg = self.config
        metrics_path = self.out_dir / "metrics.jsonl"
        ckpt_latest = self.out_dir / "ckpt_latest.npz"
        ckpt_final = self.out_dir / "ckpt_final.npz"
        phases = [
            (L.PHASE_PAIRED, cfg.epochs_paired),
            (L.PHASE_UNPAIRED, cfg.epochs_unpaired),
        ]
        result = TrainResult(checkpoint_path=ckpt_final, metrics_path=metrics_path)
        mode = "a" if self.global_batches else "w"
        with open(metrics_path, mode) as log:
            if mode == "w":
                header = {
                    "event": "header",
                    "config_hash": cfg.config_hash(),
                    "seed": cfg.seed,
                    "n_records": len(self.data),
                    "n_paired": int(len(self.data.paired_idx)),
                    "image_size": self.image_size,
                    "n_params": self.n_params,
                }
                log.write(json.dumps(header, sort_keys=True) + "\n")
            for phase_i, (phase, phase_epochs) in enumerate(phases):
                if result.aborted:
                    break
                while self.epochs_done[phase_i] < phase_epochs:
                    pool = (
                        self.data.paired_idx
                        if phase == L.PHASE_PAIRED
                        else np.arange(len(self.data))
                    )
                    if phase == L.PHASE_PAIRED and len(pool) < cfg.batch_size:
                        raise ValueError(
                            "paired phase requested but the dataset has too few paired records"
                        )
                    epoch = self.epochs_done[phase_i]
                    perm = pool[self.rng.permutation(len(pool))]
                    for start in range(0, len(perm) - cfg.batch_size + 1, cfg.batch_size):
                        indices = perm[start : start + cfg.batch_size]
                        imgs, p_org, trg_imgs, p_trg = self._batch_tensors(indices, phase)
                        d_report, gp_val = self._d_step(imgs, p_org, p_trg, phase)
                        if d_report is None:
                            result.aborted = True
                            result.abort_reason = "non-finite discriminator loss"
                            break
                        log.write(
                            d_report.to_json_line(
                                step=self.global_batches, gp=gp_val, epoch=epoch
                            )
                            + "\n"
                        )
                        if (self.global_batches + 1) % cfg.n_critic == 0:
                            g_report, mask_mean = self._g_step(
                                imgs, p_org, trg_imgs, p_trg, phase
                            )
                            if g_report is None:
                                result.aborted = True
                                result.abort_reason = "non-finite generator loss"
                                break
                            log.write(
                                g_report.to_json_line(
                                    step=self.global_batches,
                                    mask_mean=mask_mean,
                                    epoch=epoch,
                                )
                                + "\n"
                            )
                        self.global_batches += 1
                    if result.aborted:
                        break
                    self.epochs_done[phase_i] += 1
                    eval_err = self._epoch_eval()
                    if eval_err is not None:
                        result.eval_history.append(eval_err)
                        log.write(
                            json.dumps(
                                {
                                    "event": "epoch_eval",
                                    "phase": phase,
                                    "epoch": self.epochs_done[phase_i],
                                    "reg_rel_error": eval_err,
                                },
                                sort_keys=True,
                            )
                            + "\n"
                        )
                    log.flush()
                    if cfg.checkpoint_every_epochs and (
                        self.epochs_done[phase_i] % cfg.checkpoint_every_epochs == 0
                    ):
                        self.save_checkpoint(ckpt_latest)
            self.save_checkpoint(ckpt_final)
            log.write(
                json.dumps(
                    {
                        "event": "end",
                        "aborted": result.aborted,
                        "abort_reason": result.abort_reason,
                        "g_steps": self.g_steps,
                        "d_steps": self.d_steps,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        result.g_steps = self.g_steps
        result.d_steps = self.d_steps
        return result


def train(config: TrainConfig, out_dir, resume: Optional[Path] = None) -> TrainResult:
    return Trainer(config, out_dir, resume=resume).run()


ABLATION_VARIANTS = {
    "full": (),
    "no_id": ("id",),
    "no_gen": ("gen",),
    "no_both": ("id", "gen"),
}


def ablation_run(
    base_config: TrainConfig,
    out_dir,
    variants=("full", "no_id", "no_gen", "no_both"),
    eval_seed: int = 0,
) -> dict:
    """Train loss-ablation variants and compare held-out identity cosine
    (same embedder as training) and consistency regression error."""
    out_dir = Path(out_dir)
    report = {}
    for name in variants:
        if name not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {name!r}")
        cfg = replace(base_config, ablation=ABLATION_VARIANTS[name])
        result = train(cfg, out_dir / name)
        entry = {"aborted": result.aborted}
        if not result.aborted:
            entry.update(
                _score_variant(cfg, result.checkpoint_path, eval_seed=eval_seed)
            )
        report[name] = entry
    (out_dir / "ablation_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    return report


def _score_variant(cfg: TrainConfig, checkpoint_path, eval_seed: int = 0) -> dict:
    if not cfg.eval_dataset:
        raise ValueError("ablation scoring needs an eval_dataset in the config")
    g, d, embedder, meta, _ = load_checkpoint(checkpoint_path, basis_path=cfg.basis)
    data = _Data(cfg.eval_dataset)
    rng = np.random.default_rng(eval_seed)
    p_trg = rng.uniform(-1, 1, size=(len(data), data.n_params)).astype(np.float32)
    cosines, rel_errors = [], []
    with torch.no_grad():
        for start in range(0, len(data), 32):
            imgs = to_nchw(data.images[start : start + 32])
            targets = torch.from_numpy(p_trg[start : start + 32])
            fake = g(imgs, targets).composited
            e_gen = embed(fake, embedder)
            e_org = embed(imgs, embedder)
            cos = torch.nn.functional.cosine_similarity(e_gen, e_org, dim=1)
            cosines.extend(cos.numpy().tolist())
            est = d(torch.clamp(fake, -1, 1)).p_est.numpy()
            truth = p_trg[start : start + 32]
            norms = np.linalg.norm(truth, axis=1)
            rel_errors.extend(np.linalg.norm(truth - est, axis=1)[norms >= 1e-6] / norms[norms >= 1e-6])
    return {
        "identity_cosine": float(np.mean(cosines)),
        "consistency_error": float(np.mean(rel_errors)),
    }
