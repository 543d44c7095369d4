"""Estimator wrapper around the translation networks: training loop, checkpoints, inference."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..validation import check_images, one_hot
from . import losses
from .losses import TERM_NAMES, LossWeights
from .networks import NetConfig, TranslationNets

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nucleistyle-gan"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step",) + TERM_NAMES + ("L_total_G", "L_total_D")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, checkpoint):
        super().__init__(f"non-finite loss at step {step}; last checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class AttributeCode:
    mu: np.ndarray
    logvar: np.ndarray
    sample: np.ndarray
    eps: np.ndarray


def fit_to_size(image, size, rng=None):
    """Reflect-pad images smaller than ``size``, then crop (random if ``rng`` given, else centred)."""
    h, w = image.shape[:2]
    ph, pw = max(0, size - h), max(0, size - w)
    if ph or pw:
        image = np.pad(image, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)), mode="reflect")
        h, w = image.shape[:2]
    if rng is None:
        top, left = (h - size) // 2, (w - size) // 2
    else:
        top, left = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
    return image[top:top + size, left:left + size]


def _to_tensor(images, dtype):
    return torch.as_tensor(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2)), dtype=dtype)


def _to_numpy(t):
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float64)


class StyleTransferGAN(BaseEstimator, TransformerMixin):
    """Multi-domain content/attribute translation model.

    ``fit(X, y)`` trains on images ``X`` (``(N, H, W, 3)`` in [0, 1]) with
    integer domain labels ``y``. ``transform`` re-renders images in randomly
    drawn domains with random attribute codes while keeping their content code.
    """

    def __init__(self, num_domains=None, image_size=64, content_channels=64, attr_dim=8,
                 width=16, dis_width=16, n_res=3, lr=1e-4, beta1=0.5, beta2=0.999,
                 batch_size=8, n_iter=2000, w_cc=10.0, w_c=1.0, w_d=1.0, w_recon=10.0,
                 w_latent=10.0, w_kl=0.01, seed=0, checkpoint_dir=None, checkpoint_every=500,
                 log_every=100, dtype="float32"):
        self.num_domains = num_domains
        self.image_size = image_size
        self.content_channels = content_channels
        self.attr_dim = attr_dim
        self.width = width
        self.dis_width = dis_width
        self.n_res = n_res
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.n_iter = n_iter
        self.w_cc = w_cc
        self.w_c = w_c
        self.w_d = w_d
        self.w_recon = w_recon
        self.w_latent = w_latent
        self.w_kl = w_kl
        self.seed = seed
        self.checkpoint_dir = checkpoint_dir
        self.checkpoint_every = checkpoint_every
        self.log_every = log_every
        self.dtype = dtype

    # ------------------------------------------------------------ setup

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def _net_config(self, num_domains):
        return NetConfig(image_size=self.image_size, content_channels=self.content_channels,
                         attr_dim=self.attr_dim, num_domains=num_domains, width=self.width,
                         dis_width=self.dis_width, n_res=self.n_res, lr=self.lr,
                         betas=(self.beta1, self.beta2), batch_size=self.batch_size,
                         n_iter=self.n_iter, seed=self.seed)

    def loss_weights(self):
        return LossWeights(self.w_cc, self.w_c, self.w_d, self.w_recon, self.w_latent, self.w_kl)

    def _build(self, num_domains):
        self.config_ = self._net_config(num_domains)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.nets_ = TranslationNets(self.config_).to(self.torch_dtype)
        betas = (self.beta1, self.beta2)
        self.opt_g_ = torch.optim.Adam(self.nets_.generator_parameters(), lr=self.lr, betas=betas)
        self.opt_d_ = torch.optim.Adam(self.nets_.discriminator_parameters(), lr=self.lr, betas=betas)
        self.rng_ = np.random.default_rng(self.seed)
        self.noise_ = torch.Generator().manual_seed(self.seed + 1)
        self.step_ = 0
        self.log_ = []
        self.num_domains_ = num_domains
        self.nets_.eval()

    # ------------------------------------------------------------ training

    def fit(self, X, y, resume_from=None, max_steps=None):
        """Train until ``n_iter`` total steps (or ``max_steps`` more steps, whichever is first).

        ``resume_from`` continues from a checkpoint including optimizer and RNG
        state, so an interrupted run resumes onto the same trajectory.
        """
        y = np.asarray(y, dtype=int)
        domains = np.unique(y)
        if len(domains) < 2:
            raise ValueError("training needs images from at least two domains")
        num_domains = self.num_domains or int(y.max()) + 1
        if y.max() >= num_domains:
            raise ValueError(f"domain label {y.max()} >= num_domains {num_domains}")
        images = [fit_to_size(im, self.image_size) for im in X]
        images = check_images(images)
        if resume_from is not None:
            self._load_state(torch.load(resume_from, weights_only=True))
            if self.num_domains_ != num_domains:
                raise ValueError("checkpoint domain count does not match training labels")
        elif not hasattr(self, "nets_"):
            self._build(num_domains)
        self.n_features_in_ = images.shape[1] * images.shape[2] * 3
        by_domain = {int(d): np.flatnonzero(y == d) for d in domains}
        stop = self.n_iter if max_steps is None else min(self.n_iter, self.step_ + max_steps)
        self._train_loop(images, by_domain, stop)
        return self

    def _sample_batch(self, images, by_domain):
        present = sorted(by_domain)
        n = max(1, self.batch_size // 2)
        ii, jj, di, dj = [], [], [], []
        for _ in range(n):
            a, b = self.rng_.choice(len(present), 2, replace=False)
            a, b = present[a], present[b]
            ii.append(self.rng_.choice(by_domain[a]))
            jj.append(self.rng_.choice(by_domain[b]))
            di.append(a)
            dj.append(b)
        dt = self.torch_dtype
        k = self.num_domains_
        return (_to_tensor(images[ii], dt), torch.as_tensor(one_hot(di, k), dtype=dt),
                _to_tensor(images[jj], dt), torch.as_tensor(one_hot(dj, k), dtype=dt))

    def train_step(self, x_i, d_i, x_j, d_j):
        """One discriminator update followed by one encoder/generator update. Returns a log row."""
        nets = self.nets_
        nets.train()
        fwd = losses.translate_pair(nets, x_i, d_i, x_j, d_j, self.noise_)

        self.opt_d_.zero_grad(set_to_none=True)
        d_loss = losses.discriminator_loss(nets, fwd)
        d_loss.backward()
        self.opt_d_.step()

        for p in nets.discriminator_parameters():
            p.requires_grad_(False)
        self.opt_g_.zero_grad(set_to_none=True)
        terms = losses.generator_terms(nets, fwd)
        g_loss = losses.total_loss(terms, self.loss_weights())
        g_loss.backward()
        self.opt_g_.step()
        for p in nets.discriminator_parameters():
            p.requires_grad_(True)
        nets.eval()

        self.step_ += 1
        row = {"step": self.step_}
        row.update({name: t.item() for name, t in terms.items()})
        row["L_total_G"] = g_loss.item()
        row["L_total_D"] = d_loss.item()
        return row

    def _train_loop(self, images, by_domain, stop):
        t0 = time.time()
        while self.step_ < stop:
            row = self.train_step(*self._sample_batch(images, by_domain))
            if not all(math.isfinite(v) for v in row.values()):
                path = self._last_checkpoint()
                logger.error("non-finite loss at step %d: %s", row["step"], row)
                raise NonFiniteLossError(row["step"], path)
            self.log_.append(row)
            if self.log_every and self.step_ % self.log_every == 0:
                logger.info("step %d  G %.4f  D %.4f  recon %.4f  cc %.4f  (%.1fs)", self.step_,
                            row["L_total_G"], row["L_total_D"], row["L_recon"], row["L_cc"],
                            time.time() - t0)
            if self.checkpoint_dir and self.checkpoint_every and self.step_ % self.checkpoint_every == 0:
                self.save_checkpoint()
        if self.checkpoint_dir:
            self.save_checkpoint()

    # ------------------------------------------------------------ checkpoints

    def _checkpoint_path(self, step=None):
        return Path(self.checkpoint_dir) / f"gan_step{self.step_ if step is None else step:07d}.pt"

    def _last_checkpoint(self):
        if not self.checkpoint_dir:
            return None
        found = sorted(Path(self.checkpoint_dir).glob("gan_step*.pt"))
        return str(found[-1]) if found else None

    def _state(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config_.to_dict(),
            # where checkpoints go is a property of the run, not of the model
            "params": {k: v for k, v in self.get_params().items() if k != "checkpoint_dir"},
            "step": self.step_,
            "nets": self.nets_.state_dict(),
            "opt_g": self.opt_g_.state_dict(),
            "opt_d": self.opt_d_.state_dict(),
            "rng": self.rng_.bit_generator.state,
            "noise": self.noise_.get_state(),
            "log": {c: [row[c] for row in self.log_] for c in LOG_COLUMNS},
        }

    def save(self, path):
        check_is_fitted(self, "nets_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self._state(), path)
        return path

    def save_checkpoint(self):
        Path(self.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        path = self.save(self._checkpoint_path())
        self.save_log(Path(self.checkpoint_dir) / "train_log.csv")
        return path

    def _load_state(self, state):
        if state.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a style-transfer checkpoint")
        if state.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('version')}")
        cfg = NetConfig(**state["config"])
        if cfg.architecture != self._net_config(cfg.num_domains).architecture:
            raise ValueError(f"checkpoint architecture {cfg.architecture} does not match estimator "
                             f"{self._net_config(cfg.num_domains).architecture}")
        self._build(cfg.num_domains)
        self.nets_.load_state_dict(state["nets"])
        self.opt_g_.load_state_dict(state["opt_g"])
        self.opt_d_.load_state_dict(state["opt_d"])
        self.rng_.bit_generator.state = state["rng"]
        self.noise_.set_state(state["noise"])
        self.step_ = int(state["step"])
        log = state["log"]
        self.log_ = [{c: (int(log[c][i]) if c == "step" else log[c][i]) for c in LOG_COLUMNS}
                     for i in range(len(log["step"]))]
        self.n_features_in_ = cfg.image_size * cfg.image_size * 3

    @classmethod
    def load(cls, path, **overrides):
        """Rebuild an estimator from a checkpoint; ``overrides`` change non-architecture params."""
        state = torch.load(path, weights_only=True)
        params = dict(state.get("params", {}))
        params.update(overrides)
        est = cls(**params)
        est._load_state(state)
        return est

    def save_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in self.log_:
                w.writerow([row["step"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])

    # ------------------------------------------------------------ inference

    def _prep(self, images):
        check_is_fitted(self, "nets_")
        images = check_images(images)
        if images.shape[1:3] != (self.config_.image_size,) * 2:
            raise ValueError(f"images must be {self.config_.image_size}x{self.config_.image_size}, "
                             f"got {images.shape[1:3]}")
        return _to_tensor(images, self.torch_dtype)

    def _domains(self, domains, n):
        domains = np.broadcast_to(np.asarray(domains, dtype=int), (n,))
        return torch.as_tensor(one_hot(domains, self.num_domains_), dtype=self.torch_dtype)

    @torch.no_grad()
    def encode_content(self, images):
        """Content codes, ``(N, C_c, H/4, W/4)``."""
        return self.nets_.enc_c(self._prep(images)).numpy()

    @torch.no_grad()
    def encode_attribute(self, images, domains, eps=None, random_state=None):
        """Attribute distribution and a reparameterized sample ``mu + exp(logvar / 2) * eps``."""
        x = self._prep(images)
        mu, logvar = self.nets_.enc_a(x, self._domains(domains, len(x)))
        if eps is None:
            eps = np.random.default_rng(random_state).standard_normal(mu.shape)
        eps_t = torch.as_tensor(np.asarray(eps), dtype=mu.dtype)
        if eps_t.shape != mu.shape:
            raise ValueError(f"eps shape {tuple(eps_t.shape)} does not match {tuple(mu.shape)}")
        sample = losses.reparameterize(mu, logvar, eps_t)
        return AttributeCode(mu.numpy(), logvar.numpy(), sample.numpy(), eps_t.numpy())

    @torch.no_grad()
    def generate(self, content, attr, domains):
        """Render content codes with attribute codes in the given domains -> ``(N, H, W, 3)``."""
        check_is_fitted(self, "nets_")
        cfg = self.config_
        zc = torch.as_tensor(np.asarray(content), dtype=self.torch_dtype)
        za = torch.as_tensor(np.atleast_2d(attr), dtype=self.torch_dtype)
        expected = (cfg.content_channels, cfg.image_size // 4, cfg.image_size // 4)
        if zc.dim() != 4 or tuple(zc.shape[1:]) != expected:
            raise ValueError(f"content code must be (N, {expected}), got {tuple(zc.shape)}")
        if za.shape != (zc.shape[0], cfg.attr_dim):
            raise ValueError(f"attribute code must be ({zc.shape[0]}, {cfg.attr_dim}), got {tuple(za.shape)}")
        return _to_numpy(self.nets_.gen(zc, za, self._domains(domains, len(zc))))

    def reconstruct(self, images, domains):
        """Self-reconstruction through the attribute means."""
        code = self.encode_attribute(images, domains, eps=None, random_state=0)
        return self.generate(self.encode_content(images), code.mu, domains)

    def transform(self, X, target_domains=None, random_state=None):
        """Keep each image's content; draw a standard-normal attribute and (unless given) a domain."""
        check_is_fitted(self, "nets_")
        rng = np.random.default_rng(random_state)
        n = len(X)
        if target_domains is None:
            target_domains = rng.integers(0, self.num_domains_, size=n)
        z_a = rng.standard_normal((n, self.config_.attr_dim))
        return self.generate(self.encode_content(X), z_a, target_domains)

    @property
    def log_frame(self):
        """Training log as a dict of column arrays."""
        return {c: np.array([row[c] for row in self.log_]) for c in LOG_COLUMNS}

    @torch.no_grad()
    def evaluate(self, images, domains, pairs=None, random_state=0):
        """Mean self-reconstruction L1 and cross-cycle L1 (each per image) on held images."""
        x = self._prep(images)
        domains = np.asarray(domains, dtype=int)
        d = self._domains(domains, len(x))
        rec = self.nets_.gen(self.nets_.enc_c(x), self.nets_.enc_a(x, d)[0], d)
        recon = float((rec - x).abs().mean())
        rng = np.random.default_rng(random_state)
        if pairs is None:
            pairs = []
            for i in range(len(x)):
                others = np.flatnonzero(domains != domains[i])
                if len(others):
                    pairs.append((i, int(rng.choice(others))))
        gen = torch.Generator().manual_seed(random_state)
        ii = [p[0] for p in pairs]
        jj = [p[1] for p in pairs]
        cc = losses.cross_cycle_loss(self.nets_, x[ii], d[ii], x[jj], d[jj], gen) / 2
        return {"recon_l1": recon, "cross_cycle_l1": float(cc)}
