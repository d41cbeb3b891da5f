"""Offline training objectives.

All losses take normalized window batches and return a scalar tensor
averaged over the batch. Randomness (skill/domain samples, denoising steps,
noise) is drawn from the supplied ``torch.Generator`` so that evaluations are
repeatable, which the finite-difference tests rely on.
"""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F

from .data import PairBatch, TripletBatch, WindowBatch
from .diffusion import forward_diffuse
from .distributions import GaussianDist
from .models import X0_CLAMP, ModelSet, frozen


def _tensors(batch: WindowBatch, models: ModelSet):
    return models.tensor(batch.states), models.tensor(batch.actions)


def _noised(a: torch.Tensor, models: ModelSet, generator):
    K = models.schedule.K
    k = torch.randint(1, K + 1, (a.shape[0],), generator=generator)
    eta = torch.randn(a.shape, generator=generator, dtype=a.dtype)
    return k, eta, forward_diffuse(a, k, eta, models.schedule)


def loss_skill(batch: WindowBatch, models: ModelSet, generator: Optional[torch.Generator] = None,
               beta: Optional[float] = None) -> torch.Tensor:
    """Noise-prediction error plus beta * KL(skill posterior || N(0, I)).

    With ``skill_weighting="v"`` the squared noise error of a sample at step k
    is scaled by 1 / abar_k, which equals the squared error of the v target and
    gives the high-noise steps enough weight to learn the conditional mean.
    The domain embedding is sampled with its gradient blocked, so the domain
    encoder is shaped only by the contrastive loss.
    """
    beta = models.cfg.beta if beta is None else beta
    s, a = _tensors(batch, models)
    q_z = models.skill_encoder(s, a)
    z = q_z.sample(generator)
    with torch.no_grad():
        d = models.domain_encoder(s, a).sample(generator)
    if models.is_diffusion:
        k, eta, x_k = _noised(a, models, generator)
        recon = ((eta - models.adapter(x_k, k, s[:, 0], d, z)) ** 2).sum(dim=(1, 2))
        if models.cfg.skill_weighting == "v":
            recon = recon / models.schedule.alpha_bar_at(k, recon)
        elif models.cfg.skill_weighting != "eps":
            raise ValueError(f"unknown skill weighting {models.cfg.skill_weighting!r}")
    else:
        recon = ((a - models.adapter(s[:, 0], d, z)) ** 2).sum(dim=(1, 2))
    kl = q_z.kl_to(GaussianDist.standard(q_z.mean))
    return (recon + beta * kl).mean()


def loss_cross_E(batch: WindowBatch, models: ModelSet, mu: Optional[float] = None) -> torch.Tensor:
    """KL(posterior || sg(prior)) + mu * KL(sg(posterior) || prior)."""
    mu = models.cfg.mu if mu is None else mu
    s, a = _tensors(batch, models)
    q_e = models.skill_encoder(s, a)
    q_r = models.skill_prior(s[:, 0])
    return (q_e.kl_to(q_r.detach()) + mu * q_e.detach().kl_to(q_r)).mean()


def generate_for_domain(models: ModelSet, s, a, d, z, generator=None) -> torch.Tensor:
    """Differentiable one-step translation of ``a`` toward domain embedding ``d``."""
    if not models.is_diffusion:
        return models.adapter(s[:, 0], d, z)
    k, _, x_k = _noised(a, models, generator)
    return models.denoised_estimate(x_k, k, s[:, 0], d, z)


def loss_cross_A(pair: PairBatch, models: ModelSet, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Domain and skill consistency of actions generated for the other window's domain.

    Gradients reach only the adapter; both encoders act as fixed critics.
    """
    if (pair.anchor.domain == pair.other.domain).any():
        raise ValueError("cross-domain action consistency needs pairs from distinct domains")
    s, a = _tensors(pair.anchor, models)
    s2, a2 = _tensors(pair.other, models)
    with torch.no_grad():
        q_z = models.skill_encoder(s, a)
        q_d2 = models.domain_encoder(s2, a2)
        z = q_z.sample(generator)
        d2 = q_d2.sample(generator)
    a_gen = generate_for_domain(models, s, a, d2, z, generator)
    with frozen(models.skill_encoder, models.domain_encoder):
        p_d = models.domain_encoder(s, a_gen)
        p_z = models.skill_encoder(s, a_gen)
    return (p_d.kl_to(q_d2) + p_z.kl_to(q_z)).mean()


@torch.no_grad()
def synthesize_negatives(batch: WindowBatch, models: ModelSet, generator=None):
    """Anchor states paired with actions generated from a random domain embedding and the anchor's skill."""
    s, a = _tensors(batch, models)
    z = models.skill_encoder(s, a).sample(generator)
    d_rand = torch.randn((len(batch), models.cfg.d_dim), generator=generator, dtype=s.dtype)
    a_syn = models.sample_actions(s[:, 0], d_rand, z, generator).clamp(-X0_CLAMP, X0_CLAMP)
    return s, a_syn


def triplet_margin(d, d_pos, d_neg, delta: float) -> torch.Tensor:
    """Per-triple max(0, |d - d+| - |d - d-| + delta)."""
    return F.relu((d - d_pos).norm(dim=-1) - (d - d_neg).norm(dim=-1) + delta)


def loss_contrastive(triplet: TripletBatch, models: ModelSet, generator: Optional[torch.Generator] = None,
                     synthetic_fraction: float = 0.0, delta: Optional[float] = None) -> torch.Tensor:
    """Triplet margin loss on sampled domain embeddings."""
    delta = models.cfg.delta if delta is None else delta
    s, a = _tensors(triplet.anchor, models)
    sp, ap = _tensors(triplet.positive, models)
    sn, an = _tensors(triplet.negative, models)
    n_syn = int(round(synthetic_fraction * len(triplet.anchor)))
    if n_syn > 0:
        s_syn, a_syn = synthesize_negatives(triplet.anchor.subset(slice(0, n_syn)), models, generator)
        sn = torch.cat([s_syn, sn[n_syn:]])
        an = torch.cat([a_syn, an[n_syn:]])
    enc = models.domain_encoder
    d = enc(s, a).sample(generator)
    dp = enc(sp, ap).sample(generator)
    dn = enc(sn, an).sample(generator)
    return triplet_margin(d, dp, dn, delta).mean()
