"""Loss terms of the translation objective.

The generator-side objective is the weighted sum of six terms::

    w_cc * L_cc + w_c * L_c + w_d * L_d + w_recon * L_recon + w_latent * L_latent + w_kl * L_KL

``L_c`` is the content-encoder side of a domain classifier on content codes
(pushed toward the uniform distribution), ``L_d`` the least-squares generator
term of a domain-conditioned real/fake discriminator.
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import torch
import torch.nn.functional as F

TERM_NAMES = ("L_cc", "L_c", "L_d", "L_recon", "L_latent", "L_KL")


@dataclass
class LossWeights:
    w_cc: float = 10.0
    w_c: float = 1.0
    w_d: float = 1.0
    w_recon: float = 10.0
    w_latent: float = 10.0
    w_kl: float = 0.01

    def __post_init__(self):
        for name, value in zip(("w_cc", "w_c", "w_d", "w_recon", "w_latent", "w_kl"), astuple(self)):
            if not value >= 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")

    def as_tuple(self):
        return astuple(self)


def total_loss(terms, weights: LossWeights):
    """Weighted sum of the six terms, given as a mapping or a sequence in ``TERM_NAMES`` order."""
    if isinstance(terms, dict):
        terms = [terms[name] for name in TERM_NAMES]
    if len(terms) != 6:
        raise ValueError(f"expected 6 loss terms, got {len(terms)}")
    return sum(w * t for w, t in zip(weights.as_tuple(), terms))


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def kl_loss(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, averaged over the batch."""
    kl = 0.5 * (logvar.exp() + mu.pow(2) - 1 - logvar)
    if kl.dim() == 1:
        return kl.sum()
    return kl.sum(dim=-1).mean()


def recon_loss(a, b):
    """Mean absolute difference between two images."""
    _check_same_shape(a, b)
    return (a - b).abs().mean()


def latent_recon_loss(z_random, z_reencoded):
    _check_same_shape(z_random, z_reencoded)
    return (z_random - z_reencoded).abs().mean()


def lsgan_discriminator(real_scores, fake_scores):
    return ((real_scores - 1) ** 2).mean() + (fake_scores ** 2).mean()


def lsgan_generator(fake_scores):
    return ((fake_scores - 1) ** 2).mean()


def content_classifier_losses(logits, labels):
    """(discriminator cross-entropy on the true domain, encoder cross-entropy to uniform)."""
    d_loss = F.cross_entropy(logits, labels)
    e_loss = -F.log_softmax(logits, dim=1).mean(dim=1).mean()
    return d_loss, e_loss


def content_adv_losses(nets, z_c, true_domain):
    """Both sides of the content adversary. ``true_domain`` holds integer labels.

    The encoder side attains its minimum ``log K`` when the classifier is uniform.
    """
    return content_classifier_losses(nets.dis_content(z_c), true_domain)


def domain_adv_losses(nets, real, fake, domain):
    """(discriminator LSGAN loss, generator LSGAN loss) for images of one domain vector batch."""
    real_scores = nets.dis_domain(real, domain)
    fake_scores = nets.dis_domain(fake, domain)
    return lsgan_discriminator(real_scores, fake_scores), lsgan_generator(fake_scores)


def reparameterize(mu, logvar, eps):
    return mu + torch.exp(0.5 * logvar) * eps


def _randn_like(t, rng):
    return torch.randn(t.shape, generator=rng, dtype=t.dtype, device=t.device)


def cross_cycle(nets, x_i, d_i, x_j, d_j, rng=None):
    """Swap content codes twice between two domain batches.

    Returns ``(x_hat_i, x_hat_j, u, v)`` where ``u`` carries the content of ``x_j``
    in domain ``i`` and ``v`` the content of ``x_i`` in domain ``j``.
    """
    n = x_i.shape[0]
    zc = nets.enc_c(torch.cat([x_i, x_j]))
    mu, logvar = nets.enc_a(torch.cat([x_i, x_j]), torch.cat([d_i, d_j]))
    za = reparameterize(mu, logvar, _randn_like(mu, rng))
    zc_i, zc_j = zc[:n], zc[n:]
    za_i, za_j = za[:n], za[n:]
    fake = nets.gen(torch.cat([zc_j, zc_i]), torch.cat([za_i, za_j]), torch.cat([d_i, d_j]))
    u, v = fake[:n], fake[n:]
    return _second_swap(nets, u, v, d_i, d_j, rng) + (u, v)


def _second_swap(nets, u, v, d_i, d_j, rng):
    n = u.shape[0]
    zc2 = nets.enc_c(torch.cat([u, v]))
    mu2, logvar2 = nets.enc_a(torch.cat([u, v]), torch.cat([d_i, d_j]))
    za2 = reparameterize(mu2, logvar2, _randn_like(mu2, rng))
    # content of x_i now lives in v, its attribute in u
    hat = nets.gen(torch.cat([zc2[n:], zc2[:n]]), za2, torch.cat([d_i, d_j]))
    return hat[:n], hat[n:]


def _labels(d):
    return d.argmax(dim=1)


def cross_cycle_loss(nets, x_i, d_i, x_j, d_j, rng=None):
    """L1(x_hat_i, x_i) + L1(x_hat_j, x_j) after two content swaps. Requires distinct domains."""
    if torch.any(_labels(d_i) == _labels(d_j)):
        raise ValueError("cross-cycle loss needs images from two different domains")
    x_hat_i, x_hat_j, _, _ = cross_cycle(nets, x_i, d_i, x_j, d_j, rng)
    return recon_loss(x_hat_i, x_i) + recon_loss(x_hat_j, x_j)


def translate_pair(nets, x_i, d_i, x_j, d_j, rng=None):
    """One batched forward pass over an unpaired cross-domain batch.

    Computes every generated image the objective needs and the four
    non-adversarial terms. Adversarial terms are left to the caller so the
    discriminators can be updated in between.
    """
    if torch.any(_labels(d_i) == _labels(d_j)):
        raise ValueError("pairs must come from two different domains")
    n = x_i.shape[0]
    x = torch.cat([x_i, x_j])
    d = torch.cat([d_i, d_j])
    zc = nets.enc_c(x)
    mu, logvar = nets.enc_a(x, d)
    za = reparameterize(mu, logvar, _randn_like(mu, rng))
    z_rand = _randn_like(mu[:n], rng)
    zc_i, zc_j = zc[:n], zc[n:]
    za_i, za_j = za[:n], za[n:]

    # u, v: swapped content; rec_*: own content + own attribute; rnd_*: random attribute
    contents = torch.cat([zc_j, zc_i, zc_i, zc_j, zc_i, zc_j])
    attrs = torch.cat([za_i, za_j, za_i, za_j, z_rand, z_rand])
    doms = torch.cat([d_i, d_j, d_i, d_j, d_j, d_i])
    out = nets.gen(contents, attrs, doms)
    u, v, rec_i, rec_j, rnd_ij, rnd_ji = out.split(n)

    x_hat_i, x_hat_j = _second_swap(nets, u, v, d_i, d_j, rng)
    mu_rnd, _ = nets.enc_a(torch.cat([rnd_ij, rnd_ji]), torch.cat([d_j, d_i]))

    terms = {
        "L_cc": recon_loss(x_hat_i, x_i) + recon_loss(x_hat_j, x_j),
        "L_recon": recon_loss(torch.cat([rec_i, rec_j]), x),
        "L_latent": latent_recon_loss(torch.cat([z_rand, z_rand]), mu_rnd),
        "L_KL": kl_loss(mu, logvar),
    }
    return {
        "real": x,
        "real_domain": d,
        "content": zc,
        "fake": torch.cat([u, v, rnd_ij, rnd_ji]),
        "fake_domain": torch.cat([d_i, d_j, d_j, d_i]),
        "terms": terms,
    }


def discriminator_loss(nets, fwd):
    """Sum of the domain (LSGAN) and content (cross-entropy) discriminator losses on detached inputs."""
    real = nets.dis_domain(fwd["real"], fwd["real_domain"])
    fake = nets.dis_domain(fwd["fake"].detach(), fwd["fake_domain"])
    d_domain = lsgan_discriminator(real, fake)
    d_content, _ = content_adv_losses(nets, fwd["content"].detach(), _labels(fwd["real_domain"]))
    return d_domain + d_content


def generator_terms(nets, fwd):
    """All six terms for the generator/encoder update."""
    terms = dict(fwd["terms"])
    _, terms["L_c"] = content_adv_losses(nets, fwd["content"], _labels(fwd["real_domain"]))
    terms["L_d"] = lsgan_generator(nets.dis_domain(fwd["fake"], fwd["fake_domain"]))
    return {name: terms[name] for name in TERM_NAMES}


def uniform_content_minimum(num_domains):
    return math.log(num_domains)
