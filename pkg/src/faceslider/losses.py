"""Training objectives for the slider-conditioned editing GAN.

All functions are pure over torch tensors (floats/arrays are accepted and
converted) and differentiable where gradients are needed.  Conventions
worth noting:

* Image L1 terms sum over channels but divide by W*H only.
* The relativistic activation is sigma(C(I) - mean C(opposite class)).
* The adversarial value includes the gradient-penalty term; the critic
  minimizes its negation plus the expression term, while the generator
  minimizes the negated fake-side objective (the documented sign
  resolution of the total-loss composition).
* ``lambda_adv`` is carried in LossWeights for config parity but the
  total-loss composition applies the adversarial term unweighted.
* The identity term is the standard 1 - cosine over embedding vectors.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import torch

RAD = "rad"
WGP = "wgp"
ADVERSARIAL_MODES = (RAD, WGP)

PHASE_PAIRED = "paired"
PHASE_UNPAIRED = "unpaired"


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 30.0
    lambda_exp: float = 1000.0
    lambda_rec: float = 10.0
    lambda_gen: float = 10.0
    lambda_id: float = 4.0
    lambda_att: float = 0.3
    lambda_gp: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (value >= 0.0 and value == value and abs(value) != float("inf")):
                raise ValueError(f"{name} must be a finite nonnegative scalar")


@dataclass
class LossReport:
    """Named raw terms plus the composed total for one optimizer step."""

    phase: str
    role: str  # "generator" | "discriminator"
    terms: dict
    total: float

    def to_json_line(self, **extra) -> str:
        payload = {"role": self.role, "phase": self.phase, "total": self.total}
        payload.update({f"term_{k}": v for k, v in self.terms.items()})
        payload.update(extra)
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def rad_activation(critic_values, opposite_mean, is_real: bool = True) -> torch.Tensor:
    """sigma(C(I) - mean of the opposite class), elementwise over the batch."""
    c = _tensor(critic_values)
    if c.numel() == 0:
        raise ValueError("empty critic batch")
    opp = _tensor(opposite_mean)
    if not torch.isfinite(c).all() or not torch.isfinite(opp).all():
        raise ValueError("non-finite critic values")
    return torch.sigmoid(c - opp)


def adversarial_loss(
    real_critic, fake_critic, gp_term, w: LossWeights, mode: str = RAD
) -> torch.Tensor:
    """E[act(real)] - E[act(fake)] - lambda_gp * gp (act = RaD sigma or raw)."""
    real = _tensor(real_critic)
    fake = _tensor(fake_critic)
    if real.numel() == 0 or fake.numel() == 0:
        raise ValueError("empty critic batch")
    if not torch.isfinite(real).all() or not torch.isfinite(fake).all():
        raise ValueError("non-finite critic values")
    gp = _tensor(gp_term)
    if mode == RAD:
        real_side = rad_activation(real, fake.mean(), is_real=True).mean()
        fake_side = rad_activation(fake, real.mean(), is_real=False).mean()
    elif mode == WGP:
        real_side = real.mean()
        fake_side = fake.mean()
    else:
        raise ValueError(f"unknown adversarial mode {mode!r}")
    return real_side - fake_side - w.lambda_gp * gp


def generator_adversarial_term(fake_critic, real_critic_mean, mode: str = RAD) -> torch.Tensor:
    """Fake-side objective the generator maximizes (callers negate)."""
    fake = _tensor(fake_critic)
    if fake.numel() == 0:
        raise ValueError("empty critic batch")
    if mode == RAD:
        return rad_activation(fake, _tensor(real_critic_mean), is_real=False).mean()
    if mode == WGP:
        return fake.mean()
    raise ValueError(f"unknown adversarial mode {mode!r}")


def gradient_penalty(interp_images: torch.Tensor, critic_fn) -> torch.Tensor:
    """E[(||grad_x mean-critic||_2 - 1)^2] at the given sample points.

    ``critic_fn`` maps a (B, ...) image batch to per-sample scores; score
    maps are reduced by mean.  A critic with no input dependence has zero
    gradient, giving the (0 - 1)^2 = 1 penalty.
    """
    x = interp_images.detach().requires_grad_(True)
    scores = critic_fn(x)
    if scores.dim() > 1:
        scores = scores.flatten(1).mean(dim=1)
    if scores.requires_grad:
        grads = torch.autograd.grad(
            scores.sum(), x, create_graph=True, allow_unused=True
        )[0]
    else:  # critic has no input dependence
        grads = None
    if grads is None:
        grads = torch.zeros_like(x)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def _param_mse(a, b) -> torch.Tensor:
    pa, pb = _tensor(a), _tensor(b)
    if pa.shape != pb.shape:
        raise ValueError(f"parameter shapes differ: {tuple(pa.shape)} vs {tuple(pb.shape)}")
    n = pa.shape[-1]
    sq = ((pa - pb) ** 2).sum(dim=-1) / n
    return sq.mean()


def expression_loss_d(p_est, p_org) -> torch.Tensor:
    """(1/N) ||p_est - p_org||^2 on real images (batch mean)."""
    return _param_mse(p_est, p_org)


def expression_loss_g(p_est_of_generated, p_trg) -> torch.Tensor:
    """(1/N) ||D_p(G(I, p_trg)) - p_trg||^2 (batch mean)."""
    return _param_mse(p_est_of_generated, p_trg)


def _image_l1(a, b) -> torch.Tensor:
    x, y = _tensor(a), _tensor(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    h, w = x.shape[-2], x.shape[-1]
    return (x - y).abs().flatten(1).sum(dim=1).div(w * h).mean()


def reconstruction_loss(I_org, I_rec) -> torch.Tensor:
    """Cycle L1: sum|I_org - I_rec| over pixels and channels, / (W*H)."""
    return _image_l1(I_org, I_rec)


def generation_loss(I_trg, I_gen, phase: str = PHASE_PAIRED) -> torch.Tensor:
    """Paired supervision L1; guarded against use outside the paired phase."""
    if phase != PHASE_PAIRED:
        raise ValueError("generation loss is only defined for the paired phase")
    return _image_l1(I_trg, I_gen)


def identity_loss(e_gen, e_org) -> torch.Tensor:
    """1 - cos(e_gen, e_org), batch mean."""
    a, b = _tensor(e_gen), _tensor(e_org)
    if a.shape != b.shape:
        raise ValueError("embedding shapes differ")
    if a.dim() == 1:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    na = a.norm(2, dim=-1)
    nb = b.norm(2, dim=-1)
    if (na <= 1e-8).any() or (nb <= 1e-8).any():
        raise ValueError("near-zero embedding norm")
    cos = (a * b).sum(dim=-1) / (na * nb)
    return (1.0 - cos).mean()


def attention_loss(mask_gen, mask_rec) -> torch.Tensor:
    """(||m_gen||_1 + ||m_rec||_1) / (W*H), batch mean."""
    out = 0.0
    for m in (mask_gen, mask_rec):
        t = _tensor(m)
        if t.min() < 0.0 or t.max() > 1.0:
            raise ValueError("mask values outside [0, 1]")
        if t.dim() == 2:
            t = t.unsqueeze(0)
        h, w = t.shape[-2], t.shape[-1]
        out = out + t.flatten(1).sum(dim=1).div(w * h).mean()
    return out


def total_generator_loss(
    adv,
    exp_g,
    rec,
    att,
    w: LossWeights,
    phase: str,
    gen=None,
    id_term=None,
) -> tuple[torch.Tensor, LossReport]:
    """Compose the generator objective for one phase.

    ``adv`` is the fake-side objective (entered negated), ``gen`` must be
    supplied exactly in the paired phase (pass None when ablated), and
    ``id_term`` may be None when the identity loss is ablated.
    """
    if phase not in (PHASE_PAIRED, PHASE_UNPAIRED):
        raise ValueError(f"unknown phase {phase!r}")
    if phase == PHASE_UNPAIRED and gen is not None:
        raise ValueError("generation term is not allowed in the unpaired phase")
    adv_t = _tensor(adv)
    total = (
        -adv_t
        + w.lambda_exp * _tensor(exp_g)
        + w.lambda_rec * _tensor(rec)
        + w.lambda_att * _tensor(att)
    )
    terms = {
        "adv": float(adv_t.detach()),
        "exp_g": float(_tensor(exp_g).detach()),
        "rec": float(_tensor(rec).detach()),
        "att": float(_tensor(att).detach()),
    }
    if gen is not None:
        total = total + w.lambda_gen * _tensor(gen)
        terms["gen"] = float(_tensor(gen).detach())
    if id_term is not None:
        total = total + w.lambda_id * _tensor(id_term)
        terms["id"] = float(_tensor(id_term).detach())
    report = LossReport(phase=phase, role="generator", terms=terms, total=float(total.detach()))
    return total, report


def total_discriminator_loss(
    adv, exp_d, w: LossWeights, phase: str = PHASE_UNPAIRED
) -> tuple[torch.Tensor, LossReport]:
    """-L_adv + lambda_exp * L_exp,D."""
    adv_t, exp_t = _tensor(adv), _tensor(exp_d)
    total = -adv_t + w.lambda_exp * exp_t
    report = LossReport(
        phase=phase,
        role="discriminator",
        terms={"adv": float(adv_t.detach()), "exp_d": float(exp_t.detach())},
        total=float(total.detach()),
    )
    return total, report
