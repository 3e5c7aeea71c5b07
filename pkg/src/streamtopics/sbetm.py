"""Stick-breaking embedded topic model.

One timestep's model: a bag-of-words encoder with residual blocks and
batch normalization, Kumaraswamy stick heads, the stick-breaking
transform onto the topic simplex, an embedding-factorized decoder, and
the three-term training objective (weighted reconstruction, Gaussian
regularizer, stick KL).

All tensors are float64 torch tensors. Randomness always flows through
an explicit ``torch.Generator`` so every caller controls determinism.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

__all__ = [
    "ModelConfig",
    "ModelParams",
    "GaussianPosterior",
    "StickVars",
    "TopicProportions",
    "init_params",
    "counts_matrix",
    "encode",
    "reparameterize",
    "stick_params",
    "sample_kumaraswamy",
    "draw_sticks",
    "stick_break",
    "topic_word_matrix",
    "reconstruct_loglik",
    "kl_gaussian_std",
    "kl_kumaraswamy_beta",
    "elbo",
    "infer_theta",
    "active_topics",
    "save_params",
    "load_params",
]

_EULER = 0.5772156649015329

DTYPE = torch.float64


# ---------------------------------------------------------------------------
# configuration and parameters


@dataclass(frozen=True)
class ModelConfig:
    """Shapes, prior, loss weights, and numeric stabilizers.

    ``w_rec``, ``w_gauss`` and ``w_stick`` weight the reconstruction,
    Gaussian-regularizer and stick-KL terms of the objective. The
    defaults follow the best configuration reported for the model
    (weights 1, 1, 0.05 with a Beta(0.5, 0.5) prior).
    """

    V: int
    K: int
    L: int
    H: int
    a0: float = 0.5
    b0: float = 0.5
    w_rec: float = 1.0
    w_gauss: float = 1.0
    w_stick: float = 0.05
    dropout_rate: float = 0.1
    taylor_terms: int = 10
    u_clamp: float = 1e-6
    softplus_eps: float = 1e-4
    n_blocks: int = 1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if min(self.V, self.L, self.H) < 1:
            raise ValueError("V, L, H must be positive")
        if self.a0 <= 0 or self.b0 <= 0:
            raise ValueError("Beta prior shapes must be positive")
        if min(self.w_rec, self.w_gauss, self.w_stick) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 < self.u_clamp < 0.5:
            raise ValueError("u_clamp must be in (0, 0.5)")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.taylor_terms < 1:
            raise ValueError("taylor_terms must be positive")


def _is_buffer(name: str) -> bool:
    return name.endswith("_mean") or name.endswith("_var")


@dataclass
class ModelParams:
    """Named tensors of one model instance.

    ``rho`` holds the fixed word embeddings, ``alpha`` the trainable
    topic embeddings; the remaining entries are encoder weights, stick
    heads, and batch-norm statistics. Trainable tensors carry
    ``requires_grad``; ``rho`` and the batch-norm buffers do not.
    """

    config: ModelConfig
    tensors: dict = field(repr=False)

    def trainable_names(self):
        return [
            n
            for n in sorted(self.tensors)
            if n != "rho" and not _is_buffer(n)
        ]

    def trainable(self):
        return [self.tensors[n] for n in self.trainable_names()]

    def clone(self) -> "ModelParams":
        out = {}
        for name, t in self.tensors.items():
            c = t.detach().clone()
            c.requires_grad_(t.requires_grad)
            out[name] = c
        return ModelParams(config=self.config, tensors=out)


def glorot_uniform(shape, generator) -> torch.Tensor:
    """Glorot (Xavier) uniform init; fan pair taken from the 2-D shape."""
    fan_out, fan_in = shape[0], shape[1] if len(shape) > 1 else shape[0]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    t = torch.rand(shape, generator=generator, dtype=DTYPE)
    return (t * 2.0 - 1.0) * limit


def init_params(config: ModelConfig, rho, generator) -> ModelParams:
    """Fresh model parameters; ``rho`` is a V x L array of word embeddings."""
    rho_t = torch.as_tensor(np.asarray(rho), dtype=DTYPE)
    if rho_t.shape != (config.V, config.L):
        raise ValueError(f"rho has shape {tuple(rho_t.shape)}, expected {(config.V, config.L)}")
    H, K = config.H, config.K
    t = {
        "rho": rho_t,
        "alpha": glorot_uniform((K, config.L), generator),
        "enc_in_w": glorot_uniform((H, config.V), generator),
        "enc_in_b": torch.zeros(H, dtype=DTYPE),
        "mu_w": glorot_uniform((H, H), generator),
        "mu_b": torch.zeros(H, dtype=DTYPE),
        "logvar_w": glorot_uniform((H, H), generator),
        "logvar_b": torch.zeros(H, dtype=DTYPE),
        "psi_a_w": glorot_uniform((K - 1, H), generator),
        "psi_a_b": torch.zeros(K - 1, dtype=DTYPE),
        "psi_b_w": glorot_uniform((K - 1, H), generator),
        "psi_b_b": torch.zeros(K - 1, dtype=DTYPE),
    }
    for i in range(config.n_blocks):
        t[f"res{i}_w"] = glorot_uniform((H, H), generator)
        t[f"res{i}_b"] = torch.zeros(H, dtype=DTYPE)
        t[f"res{i}_bn_gamma"] = torch.ones(H, dtype=DTYPE)
        t[f"res{i}_bn_beta"] = torch.zeros(H, dtype=DTYPE)
        t[f"res{i}_bn_mean"] = torch.zeros(H, dtype=DTYPE)
        t[f"res{i}_bn_var"] = torch.ones(H, dtype=DTYPE)
    for name, tensor in t.items():
        if name != "rho" and not _is_buffer(name):
            tensor.requires_grad_(True)
    return ModelParams(config=config, tensors=t)


def counts_matrix(docs, V: int) -> torch.Tensor:
    """Dense (D, V) float64 count matrix from sparse documents."""
    out = torch.zeros((len(docs), V), dtype=DTYPE)
    for i, doc in enumerate(docs):
        for wid, c in doc.counts.items():
            if wid >= V:
                raise ValueError(f"document {doc.id!r} references word id {wid} >= V={V}")
            out[i, wid] = float(c)
    return out


# ---------------------------------------------------------------------------
# posterior types


@dataclass(frozen=True)
class GaussianPosterior:
    """Per-document encoder output (rows are documents)."""

    mu: torch.Tensor
    logvar: torch.Tensor


@dataclass(frozen=True)
class StickVars:
    """Stick fractions with the Kumaraswamy shapes that produced them."""

    nu: torch.Tensor
    a: torch.Tensor
    b: torch.Tensor


@dataclass(frozen=True)
class TopicProportions:
    """Simplex vector(s) over the K truncated topics."""

    theta: torch.Tensor


# ---------------------------------------------------------------------------
# encoder


def _batchnorm(x, gamma, beta, running_mean, running_var, training, momentum, eps):
    if training:
        mean = x.mean(dim=0)
        var = x.var(dim=0, unbiased=False)
        with torch.no_grad():
            n = x.shape[0]
            unbiased = var.detach() * (n / max(n - 1, 1))
            running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
            running_var.mul_(1 - momentum).add_(momentum * unbiased)
    else:
        mean = running_mean
        var = running_var
    return gamma * (x - mean) / torch.sqrt(var + eps) + beta


def _dropout(x, rate, generator):
    if rate <= 0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate).to(x.dtype)
    return x * keep / (1.0 - rate)


def encode(w_norm, params: ModelParams, mode: str = "eval", generator=None) -> GaussianPosterior:
    """Run the encoder on normalized bag-of-words rows.

    ``w_norm`` is a (D, V) tensor of empirical word frequencies (a
    single V-vector is also accepted). Train mode uses batch statistics
    and dropout; eval mode uses running batch-norm statistics and is
    deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    training = mode == "train"
    cfg = params.config
    t = params.tensors
    x = torch.as_tensor(w_norm, dtype=DTYPE)
    squeeze = x.dim() == 1
    if squeeze:
        x = x.unsqueeze(0)
    h = torch.tanh(x @ t["enc_in_w"].T + t["enc_in_b"])
    for i in range(cfg.n_blocks):
        y = h @ t[f"res{i}_w"].T + t[f"res{i}_b"]
        y = _batchnorm(
            y,
            t[f"res{i}_bn_gamma"],
            t[f"res{i}_bn_beta"],
            t[f"res{i}_bn_mean"],
            t[f"res{i}_bn_var"],
            training,
            cfg.bn_momentum,
            cfg.bn_eps,
        )
        y = torch.tanh(y)
        if training:
            y = _dropout(y, cfg.dropout_rate, generator)
        h = h + y
    mu = h @ t["mu_w"].T + t["mu_b"]
    logvar = h @ t["logvar_w"].T + t["logvar_b"]
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise ValueError("encoder produced non-finite output")
    if squeeze:
        mu, logvar = mu.squeeze(0), logvar.squeeze(0)
    return GaussianPosterior(mu=mu, logvar=logvar)


def reparameterize(post: GaussianPosterior, noise) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * noise."""
    return post.mu + torch.exp(0.5 * post.logvar) * torch.as_tensor(noise, dtype=DTYPE)


def stick_params(z, params: ModelParams):
    """Positive Kumaraswamy shapes from the two stick heads.

    Softplus plus a small stabilizer keeps both strictly positive.
    """
    t = params.tensors
    eps = params.config.softplus_eps
    z = torch.as_tensor(z, dtype=DTYPE)
    a = torch.nn.functional.softplus(z @ t["psi_a_w"].T + t["psi_a_b"]) + eps
    b = torch.nn.functional.softplus(z @ t["psi_b_w"].T + t["psi_b_b"]) + eps
    return a, b


def sample_kumaraswamy(a, b, u, u_clamp=1e-6) -> torch.Tensor:
    """Inverse-CDF sample nu = (1 - (1 - u)^(1/b))^(1/a).

    The uniform draws are clamped into [u_clamp, 1 - u_clamp] and the
    powers are evaluated through logs for stability at extreme shapes.
    """
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    u = torch.as_tensor(u, dtype=DTYPE).clamp(u_clamp, 1.0 - u_clamp)
    s = torch.exp(torch.log1p(-u) / b).clamp(max=1.0 - 1e-15)
    return torch.exp(torch.log1p(-s) / a)


def draw_sticks(z, params: ModelParams, u, u_clamp=1e-6) -> StickVars:
    """Stick head evaluation followed by Kumaraswamy sampling."""
    a, b = stick_params(z, params)
    return StickVars(nu=sample_kumaraswamy(a, b, u, u_clamp), a=a, b=b)


def stick_break(nu) -> torch.Tensor:
    """Map stick fractions (..., K-1) to simplex vectors (..., K).

    theta_1 = nu_1, theta_k = nu_k * prod_{j<k} (1 - nu_j), and the
    last component takes the unbroken remainder.
    """
    nu = torch.as_tensor(nu, dtype=DTYPE)
    rem = torch.cumprod(1.0 - nu, dim=-1)
    return torch.cat(
        [nu[..., :1], nu[..., 1:] * rem[..., :-1], rem[..., -1:]], dim=-1
    )


# ---------------------------------------------------------------------------
# decoder and objective terms


def topic_word_matrix(rho, alpha) -> torch.Tensor:
    """Column-stochastic beta: softmax over words of rho . alpha_k."""
    rho = torch.as_tensor(rho, dtype=DTYPE)
    alpha = torch.as_tensor(alpha, dtype=DTYPE)
    return torch.softmax(rho @ alpha.T, dim=0)


def reconstruct_loglik(counts, theta, beta) -> torch.Tensor:
    """Mixture log likelihood sum_v counts_v log(sum_k theta_k beta_vk).

    The mixture probability is floored at 1e-12 before the log. Rows
    are documents; 1-D inputs give a scalar.
    """
    counts = torch.as_tensor(counts, dtype=DTYPE)
    theta = torch.as_tensor(theta, dtype=DTYPE)
    squeeze = counts.dim() == 1
    c = counts.unsqueeze(0) if squeeze else counts
    th = theta.unsqueeze(0) if theta.dim() == 1 else theta
    mix = (th @ beta.T).clamp(min=1e-12)
    ll = (c * torch.log(mix)).sum(dim=-1)
    return ll.squeeze(0) if squeeze else ll


def kl_gaussian_std(post: GaussianPosterior) -> torch.Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)) per row."""
    return 0.5 * (post.mu**2 + torch.exp(post.logvar) - 1.0 - post.logvar).sum(dim=-1)


def _hurwitz_zeta(s, q, n_direct=12):
    """Differentiable Hurwitz zeta(s, q) by Euler-Maclaurin summation.

    Accurate to about 1e-12 for s > 1 and q >= 2 at the default depth,
    with gradients flowing through the power terms.
    """
    s = torch.as_tensor(s, dtype=DTYPE)
    ns = torch.arange(n_direct, dtype=DTYPE)
    direct = ((q + ns) ** (-s.unsqueeze(-1))).sum(dim=-1)
    Q = q + n_direct
    tail = Q ** (1.0 - s) / (s - 1.0) + 0.5 * Q ** (-s)
    tail = tail + s / 12.0 * Q ** (-s - 1.0)
    tail = tail - s * (s + 1) * (s + 2) / 720.0 * Q ** (-s - 3.0)
    tail = tail + s * (s + 1) * (s + 2) * (s + 3) * (s + 4) / 30240.0 * Q ** (-s - 5.0)
    return direct + tail


def _betaln(x, y):
    return torch.special.gammaln(x) + torch.special.gammaln(y) - torch.special.gammaln(x + y)


_SERIES_CAP = 512


def _series_tail(a, b, q0):
    """Asymptotic tail of sum_{m>=q0} B(m/a, b)/(m + a b).

    The coefficients come from the Stirling expansion of the ratio
    Gamma(m/a)/Gamma(m/a + b); the expansion parameter is roughly
    a b^2 / q0, so callers must gate on that before trusting it.
    """
    d1 = -a * b * (b + 1.0) / 2.0
    d2 = a * a * b * (b + 1.0) * (b + 2.0) * (3.0 * b + 1.0) / 24.0
    d3 = -a.pow(3) * b.pow(2) * (b + 1.0).pow(2) * (b + 2.0) * (b + 3.0) / 48.0
    d4 = (
        a.pow(4)
        * b
        * (b + 1.0)
        * (b + 2.0)
        * (b + 3.0)
        * (b + 4.0)
        * (15.0 * b.pow(3) + 30.0 * b.pow(2) + 5.0 * b - 2.0)
        / 5760.0
    )
    scale = torch.exp(torch.special.gammaln(b) + b * torch.log(a))
    return scale * (
        _hurwitz_zeta(1.0 + b, q0)
        + d1 * _hurwitz_zeta(2.0 + b, q0)
        + d2 * _hurwitz_zeta(3.0 + b, q0)
        + d3 * _hurwitz_zeta(4.0 + b, q0)
        + d4 * _hurwitz_zeta(5.0 + b, q0)
    )


def kl_kumaraswamy_beta(a, b, a0, b0, taylor_terms=10) -> torch.Tensor:
    """Closed-form KL(Kumaraswamy(a, b) || Beta(a0, b0)), elementwise.

    Uses the digamma/Euler-Mascheroni expression. The infinite Beta
    series is summed directly for ``taylor_terms`` terms (more when the
    shapes demand it, capped at 512) and completed with a Hurwitz-zeta
    asymptotic tail wherever that tail converges; outside that region
    the truncation alone already overestimates the KL slightly, which
    keeps it nonnegative. Raises on a non-finite intermediate.
    """
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    a0t = torch.as_tensor(a0, dtype=DTYPE)
    b0t = torch.as_tensor(b0, dtype=DTYPE)
    first = (a - a0t) / a * (-_EULER - torch.special.digamma(b) - 1.0 / b)
    # the tail expansion needs q0 beyond the a b^2 scale; extend the
    # direct sum when the requested truncation point is too early
    need = float((1.5 * a * b * b).max().detach()) + 1.0
    if not math.isfinite(need):
        raise ValueError("non-finite Kumaraswamy shape parameters")
    n_terms = max(taylor_terms, min(int(math.ceil(need)), _SERIES_CAP))
    m = torch.arange(1, n_terms + 1, dtype=DTYPE)
    am = a.unsqueeze(-1)
    bm = b.unsqueeze(-1)
    series = (torch.exp(_betaln(m / am, bm)) / (m + am * bm)).sum(dim=-1)
    q0 = float(n_terms + 1)
    valid = 1.5 * a * b * b <= q0
    safe_a = torch.where(valid, a, torch.ones_like(a))
    safe_b = torch.where(valid, b, torch.ones_like(b))
    tail = torch.where(valid, _series_tail(safe_a, safe_b, q0), torch.zeros_like(a))
    kl = (
        first
        + torch.log(a)
        + torch.log(b)
        + _betaln(a0t, b0t)
        - (b - 1.0) / b
        + (b0t - 1.0) * b * (series + tail)
    )
    if not torch.isfinite(kl).all():
        raise ValueError("non-finite intermediate in Kumaraswamy-Beta KL")
    return kl


def elbo(counts, params: ModelParams, config: ModelConfig, generator, n_samples=1, mode="train"):
    """Three-term objective on a batch; returns (loss, component dict).

    ``loss = -w_rec * rec + w_gauss * kl_g + w_stick * kl_s`` where the
    components are per-document averages over the batch and ``rec`` and
    ``kl_s`` average ``n_samples`` Monte Carlo draws sharing the same z
    samples. ``counts`` may be a (D, V) tensor or a list of Documents.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if not torch.is_tensor(counts):
        counts = counts_matrix(counts, config.V)
    w_norm = counts / counts.sum(dim=-1, keepdim=True)
    post = encode(w_norm, params, mode=mode, generator=generator)
    kl_g = kl_gaussian_std(post).mean()
    beta = topic_word_matrix(params.tensors["rho"], params.tensors["alpha"])
    rec = counts.new_zeros(())
    kl_s = counts.new_zeros(())
    n_docs = counts.shape[0]
    for _ in range(n_samples):
        noise = torch.randn((n_docs, config.H), generator=generator, dtype=DTYPE)
        z = reparameterize(post, noise)
        a, bshape = stick_params(z, params)
        u = torch.rand((n_docs, config.K - 1), generator=generator, dtype=DTYPE)
        nu = sample_kumaraswamy(a, bshape, u, config.u_clamp)
        theta = stick_break(nu)
        rec = rec + reconstruct_loglik(counts, theta, beta).mean()
        kl_s = kl_s + kl_kumaraswamy_beta(
            a, bshape, config.a0, config.b0, config.taylor_terms
        ).sum(dim=-1).mean()
    rec = rec / n_samples
    kl_s = kl_s / n_samples
    loss = -config.w_rec * rec + config.w_gauss * kl_g + config.w_stick * kl_s
    parts = {"rec": rec.detach(), "kl_g": kl_g.detach(), "kl_s": kl_s.detach()}
    if not torch.isfinite(loss):
        detail = {k: float(v) for k, v in parts.items()}
        raise ValueError(f"non-finite objective: {detail}")
    return loss, parts


def infer_theta(counts, params: ModelParams, config: ModelConfig) -> TopicProportions:
    """Deterministic evaluation-time topic proportions.

    Eval-mode encoding with z = mu, sticks at the Kumaraswamy mean
    b * B(1 + 1/a, b) evaluated through log-gamma, then stick breaking.
    """
    if not torch.is_tensor(counts):
        counts = counts_matrix(counts, config.V)
    w_norm = counts / counts.sum(dim=-1, keepdim=True)
    with torch.no_grad():
        post = encode(w_norm, params, mode="eval")
        a, b = stick_params(post.mu, params)
        log_mean = torch.log(b) + _betaln(1.0 + 1.0 / a, b)
        nu = torch.exp(log_mean).clamp(0.0, 1.0)
        theta = stick_break(nu)
    return TopicProportions(theta=theta)


def active_topics(thetas, rule="argmax", n_min=1, tau=0.01):
    """Count topics in use across a theta matrix.

    The default "argmax" rule marks topic k active when it is the
    argmax of at least ``n_min`` documents; the "mass" rule uses a mean
    proportion threshold ``tau``. Returns (K_pred, active id tuple).
    """
    th = thetas.theta if isinstance(thetas, TopicProportions) else thetas
    th = np.asarray(torch.as_tensor(th).detach().cpu().numpy(), dtype=np.float64)
    if th.ndim == 1:
        th = th[None, :]
    k = th.shape[1]
    if rule == "argmax":
        counts = np.bincount(th.argmax(axis=1), minlength=k)
        active = np.flatnonzero(counts >= n_min)
    elif rule == "mass":
        active = np.flatnonzero(th.mean(axis=0) >= tau)
    else:
        raise ValueError(f"unknown activity rule {rule!r}")
    return len(active), tuple(int(i) for i in active)


# ---------------------------------------------------------------------------
# checkpoints


def save_params(params: ModelParams, path):
    """Write a checkpoint: u32 manifest length, JSON manifest, raw blobs.

    Blobs are little-endian float32 in row-major order, concatenated in
    sorted tensor-name order; the manifest records byte offsets into
    the data section.
    """
    names = sorted(params.tensors)
    blobs = []
    entries = []
    offset = 0
    for name in names:
        arr = params.tensors[name].detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": 1,
        "config": asdict(params.config),
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_params(path) -> ModelParams:
    """Read a checkpoint written by :func:`save_params`."""
    with open(path, "rb") as fh:
        (head_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(head_len).decode("utf-8"))
        data = fh.read()
    if manifest.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    config = ModelConfig(**manifest["config"])
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=start).reshape(shape)
        t = torch.as_tensor(arr.astype(np.float64))
        name = entry["name"]
        t.requires_grad_(name != "rho" and not _is_buffer(name))
        tensors[name] = t
    return ModelParams(config=config, tensors=tensors)
