"""Evidential model: forward pass, Fisher proxy and the training objective."""

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from gemkit import autodiff as ad
from gemkit import density, networks
from gemkit.dirichlet import alpha_from_logits_t, entropy_t, kl_to_uniform_t

log = logging.getLogger(__name__)

VARIANTS = ("EDL_BASELINE", "DAEDL_BASELINE", "CORE", "MIX", "FI")
SINGLE_HEAD_VARIANTS = ("EDL_BASELINE", "DAEDL_BASELINE", "CORE")
NLL_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


@dataclass
class GemConfig:
    variant: str = "FI"
    K: int = 3
    tau: float = 10.0
    eps: float = 1e-8
    eps_prime: float = 1e-4
    gamma: float = 1.2
    s_min: float = 0.1
    s_max: float = 0.9
    lambda_kl: float = 1e-3
    lambda_fi: float = 0.3
    lambda_ebm: float = 0.1
    lambda_unc: float = 1.0
    beta_id: float = 0.1
    beta_ood: float = 0.1
    fi_trace_beta: float = 0.01
    temperature: float = 0.5
    # switches
    sn: bool = True
    gate: bool = None
    density: bool = None
    fi_reg: bool = False
    fi_mod: bool = False
    ebm: bool = False
    unc: bool = False
    vos: bool = False
    tanh_energy: bool = False
    energy_desaturation: float = 0.5
    ebm_backbone_grad: bool = False
    # VOS
    vos_weight: float = 0.1
    vos_warmup_epochs: int = 10
    vos_margin: float = 1.0
    vos_tail_quantile: float = 0.95
    # density
    gmm_components: int = None
    density_warmup_epochs: int = 5
    gmm_var_floor: float = 1e-6
    kl_uses_rho: bool = False
    daedl_lambda_min: float = 0.1
    # architecture
    feature_dim: int = 16
    backbone_hidden: tuple = (64, 64)
    activation: str = "relu"
    head_hidden: tuple = (64,)
    energy_hidden: tuple = (32,)
    gate_hidden: tuple = (32,)
    router_hidden: tuple = (32,)
    dropout: float = 0.05
    internal_dropout: float = 0.02

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant in SINGLE_HEAD_VARIANTS:
            self.K = 1
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not 0 < self.s_min < self.s_max < 1:
            raise ConfigError("gate bounds must satisfy 0 < s_min < s_max < 1")
        for name in ("lambda_kl", "lambda_fi", "lambda_ebm", "lambda_unc", "beta_id", "beta_ood",
                     "fi_trace_beta", "vos_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.tau <= 0 or self.eps <= 0 or self.temperature <= 0:
            raise ConfigError("tau, eps and temperature must be positive")
        for name in ("backbone_hidden", "head_hidden", "energy_hidden", "gate_hidden", "router_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))

    @property
    def gated(self):
        if self.gate is not None:
            return bool(self.gate)
        return self.variant in ("CORE", "MIX", "FI")

    @property
    def uses_density(self):
        if self.variant == "DAEDL_BASELINE":
            return True
        if self.density is not None:
            return bool(self.density)
        return self.variant in ("CORE", "MIX", "FI")

    @property
    def loss_kind(self):
        return "se" if self.variant in SINGLE_HEAD_VARIANTS else "nll"

    @property
    def vos_active(self):
        return self.vos and (self.ebm or self.unc)

    @classmethod
    def preset(cls, variant, **overrides):
        """Default hyperparameters (MNIST-scale column) for a named variant."""
        base = {"variant": variant}
        if variant == "FI":
            base.update(fi_reg=True, fi_mod=True, ebm=True, unc=True, vos=True)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass
class ForwardDiagnostics:
    E: np.ndarray
    s_hat: np.ndarray
    s: np.ndarray
    pi_raw: np.ndarray
    pi: np.ndarray
    logits: np.ndarray          # (K, N, C)
    alpha_per_head: np.ndarray  # (K, N, C)
    head_probs: np.ndarray      # (K, N, C)
    alpha0_mix: np.ndarray
    rho: np.ndarray
    p_mix: np.ndarray
    p_hat: np.ndarray
    fi_per_head: np.ndarray = None
    fi_bar: np.ndarray = None

    @property
    def n_heads(self):
        return self.alpha_per_head.shape[0]


@dataclass
class ForwardResult:
    """Tape tensors from one forward pass, plus detached extras."""

    z: ad.Tensor
    E: ad.Tensor
    s_hat: ad.Tensor
    s: ad.Tensor
    logits: list
    alphas: list
    head_probs: list
    pi_raw: ad.Tensor
    pi: ad.Tensor
    p_mix: ad.Tensor
    p_hat: ad.Tensor
    rho: np.ndarray
    fi: np.ndarray = None
    fi_bar: np.ndarray = None

    def diagnostics(self):
        alphas = np.stack([a.data for a in self.alphas])
        pi = self.pi.data
        alpha0_mix = (pi * alphas.sum(axis=2).T).sum(axis=1)
        n, c = self.p_hat.shape
        return ForwardDiagnostics(
            E=self.E.data[:, 0].copy(),
            s_hat=self.s_hat.data[:, 0].copy(),
            s=self.s.data.copy() if self.s is not None else np.ones((n, c)),
            pi_raw=self.pi_raw.data.copy(),
            pi=pi.copy(),
            logits=np.stack([u.data for u in self.logits]),
            alpha_per_head=alphas,
            head_probs=np.stack([p.data for p in self.head_probs]),
            alpha0_mix=alpha0_mix,
            rho=self.rho.copy(),
            p_mix=self.p_mix.data.copy(),
            p_hat=self.p_hat.data.copy(),
            fi_per_head=None if self.fi is None else self.fi.copy(),
            fi_bar=None if self.fi_bar is None else self.fi_bar.copy(),
        )


@dataclass
class LossBreakdown:
    pred: float
    kl: float
    fi: float
    ebm: float
    unc: float
    total: float
    weights: dict = field(default_factory=dict)
    unc_ood_missing: bool = False

    def recombined(self):
        w = self.weights
        return (self.pred + w["kl"] * self.kl + w["fi"] * self.fi
                + w["ebm"] * self.ebm + w["unc"] * self.unc)

    def as_row(self):
        return {"loss_total": self.total, "loss_pred": self.pred, "loss_kl": self.kl,
                "loss_fi": self.fi, "loss_ebm": self.ebm, "loss_unc": self.unc}


# ------------------------------------------------------------- pure pieces

def pseudo_label(head_logits):
    """argmax_c of the head-averaged logits; ties go to the lowest class index.

    ``head_logits`` is (K, N, C) or a list of (N, C) arrays.
    """
    mean = np.mean(np.stack([np.asarray(u) for u in head_logits]), axis=0)
    return np.argmax(mean, axis=1)


def fi_proxy(logits, labels, rho=None, tau=10.0, eps=1e-8):
    """Squared logit-gradient norm of log p(y | x) for one head, per row.

    Computed on a private tape from a detached copy of the logits, so it adds
    no second-order terms to the main graph.
    """
    u = ad.Tensor(np.array(logits, dtype=np.float64, copy=True), requires_grad=True)
    n, c = u.shape
    onehot = np.eye(c)[np.asarray(labels)]
    alpha = alpha_from_logits_t(u, rho=rho, tau=tau, eps=eps)
    logp = ad.sub(ad.log(alpha), ad.log(ad.sum(alpha, axis=1)))
    ad.backward(ad.sum(ad.mul(logp, onehot)))
    return (u.grad ** 2).sum(axis=1)


def fi_closed_form(logits, labels, rho=None, tau=10.0, eps=1e-8):
    """Chain-rule form of :func:`fi_proxy`; used as an independent check."""
    u = np.asarray(logits, dtype=np.float64)
    n, c = u.shape
    r = np.ones((n, 1)) if rho is None else np.asarray(rho, dtype=np.float64).reshape(-1, 1)
    alpha = r * np.exp(np.clip(u, -tau, tau)) + eps
    a0 = alpha.sum(axis=1, keepdims=True)
    onehot = np.eye(c)[np.asarray(labels)]
    g = (alpha - eps) * (onehot / alpha - 1.0 / a0)
    g = g * ((u > -tau) & (u < tau))
    return (g * g).sum(axis=1)


def fi_normalize(fi, eps=1e-8):
    fi = np.asarray(fi, dtype=np.float64)
    return fi / (fi.sum(axis=1, keepdims=True) + eps)


def fi_modulate(pi_raw, fi, lambda_fi, eps_prime=1e-4, eps=1e-8):
    """Reweight router scores toward heads with lower normalised Fisher proxy.

    ``pi_raw`` may be a Tensor (kept on tape; the FI weights are constants)
    or an array. Returns (pi, fi_bar).
    """
    fi_bar = fi_normalize(fi, eps)
    weight = np.exp(lambda_fi * (1.0 - fi_bar))
    if isinstance(pi_raw, ad.Tensor):
        mod = ad.normalize_rows(ad.mul(pi_raw, weight))
        return ad.normalize_rows(ad.add(mod, eps_prime)), fi_bar
    mod = np.asarray(pi_raw) * weight
    mod = mod / mod.sum(axis=-1, keepdims=True)
    mod = mod + eps_prime
    return mod / mod.sum(axis=-1, keepdims=True), fi_bar


def _onehot(y, c):
    return np.eye(c)[np.asarray(y, dtype=int)]


def loss_core(p_hat, y, alpha, lambda_kl):
    """Returns (se, kl) tensors; the core loss is se + lambda_kl * kl."""
    c = p_hat.shape[1]
    se = ad.mean(ad.sum(ad.square(ad.sub(_onehot(y, c), p_hat)), axis=1))
    kl = ad.mean(kl_to_uniform_t(alpha))
    return se, kl


def loss_mix(p_hat, y, alphas, pi):
    """Returns (nll, kl) with kl = mean_x sum_k pi_k KL_k."""
    c = p_hat.shape[1]
    py = ad.sum(ad.mul(p_hat, _onehot(y, c)), axis=1)
    nll = ad.mean(ad.neg(ad.log(ad.add(py, NLL_FLOOR))))
    kl = None
    for k, alpha in enumerate(alphas):
        term = ad.mul(ad.slice_cols(pi, k, k + 1), kl_to_uniform_t(alpha))
        kl = term if kl is None else ad.add(kl, term)
    return nll, ad.mean(kl)


def loss_fi(pi, fi, trace_beta=0.01):
    """mean_x sum_k pi_k FI_k + trace_beta * mean(FI); FI values are constants."""
    fi = np.asarray(fi, dtype=np.float64)
    main = ad.mean(ad.sum(ad.mul(pi, fi), axis=1))
    return ad.add(main, trace_beta * float(fi.mean()))


def loss_ebm(E_id, E_neg=None, tau=10.0, margin=1.0, vos_weight=0.1):
    out = ad.mean(ad.softplus(ad.clip(E_id, -tau, tau)))
    if E_neg is not None:
        neg_term = ad.mean(ad.softplus(ad.sub(margin, E_neg)))
        out = ad.add(out, ad.mul(neg_term, vos_weight))
    return out


def loss_unc(p_id, p_ood=None, beta_id=0.1, beta_ood=0.1):
    """beta_id * mean H(p_id) - beta_ood * mean H(p_ood); OOD term is 0 when absent."""
    out = ad.mul(ad.mean(entropy_t(p_id)), beta_id)
    if p_ood is not None:
        out = ad.sub(out, ad.mul(ad.mean(entropy_t(p_ood)), beta_ood))
    return out


# ------------------------------------------------------------------- model

class GemModel:
    """Backbone, K evidential heads, energy head, integration gate and router."""

    def __init__(self, config, input_dim, n_classes, seed=0):
        self.config = config
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)
        self.seed = int(seed)
        cfg = config
        seq = np.random.SeedSequence([self.seed, 0xC0FFEE])
        child = seq.spawn(4 + cfg.K)
        rngs = [np.random.default_rng(s) for s in child]
        d = cfg.feature_dim
        self.backbone = networks.Mlp((self.input_dim, *cfg.backbone_hidden, d), rngs[0],
                                     activation=cfg.activation, dropout=cfg.dropout, sn=cfg.sn)
        self.energy_net = networks.Mlp((d, *cfg.energy_hidden, 1), rngs[1],
                                       activation="tanh", dropout=cfg.internal_dropout)
        self.gate_net = networks.Mlp((d + 1, *cfg.gate_hidden, self.n_classes), rngs[2],
                                     activation="tanh", dropout=cfg.internal_dropout)
        self.router_net = networks.Mlp((d + 1, *cfg.router_hidden, cfg.K), rngs[3],
                                       activation="tanh", dropout=cfg.internal_dropout)
        self.heads = networks.HeadSet(cfg.K, (d, *cfg.head_hidden, self.n_classes), rngs[4:],
                                      activation="tanh", dropout=cfg.dropout)
        self.gmm = None
        self.gmm_calibration = None
        self.class_gaussians = None
        self.energy_calibration = None

    # ---------------------------------------------------------- registry
    def modules(self):
        return {"backbone": self.backbone, "energy": self.energy_net, "gate": self.gate_net,
                "router": self.router_net, "heads": self.heads}

    def parameters(self):
        out = {}
        for mname, mod in self.modules().items():
            for pname, t in mod.parameters().items():
                out[f"{mname}.{pname}"] = t
        return out

    def zero_grad(self):
        for t in self.parameters().values():
            t.grad = None

    # ------------------------------------------------------------ density
    @property
    def density_ready(self):
        return self.gmm is not None and self.gmm.fitted

    def features(self, x, batch_size=4096):
        with ad.no_grad():
            return np.concatenate([
                self.backbone.forward(x[i:i + batch_size], train=False).data
                for i in range(0, len(x), batch_size)
            ]) if len(x) else np.zeros((0, self.config.feature_dim))

    def fit_density(self, x, y, seed=0):
        """Refit GMM, its log-likelihood calibration and class Gaussians on train features."""
        z = self.features(x)
        n_comp = self.config.gmm_components or self.n_classes
        self.gmm = density.gmm_fit(z, n_comp, seed=seed, var_floor=self.config.gmm_var_floor)
        self.gmm_calibration = density.DensityCalibration.fit(self.gmm.log_likelihood(z))
        self.class_gaussians = density.ClassGaussians.fit(z, y, self.n_classes)
        return z

    def _needs_rho(self):
        return self.config.uses_density and self.config.variant != "DAEDL_BASELINE"

    def rho(self, z_data):
        if not self.config.uses_density or self.config.variant == "DAEDL_BASELINE":
            return np.ones(z_data.shape[0])
        if not self.density_ready:
            raise density.NotFittedError("density scaling is enabled but no GMM has been fitted")
        return density.rho_score(self.gmm, z_data, self.config.gamma)

    # ------------------------------------------------------------ forward
    def forward(self, x, mode="eval", labels=None, rng=None, rho=None, fi=None, update_sn=None):
        """One pass in the order backbone, energy, heads, router, FI modulation, rho, mix, gate."""
        train = mode == "train"
        if update_sn is None:
            update_sn = train
        x = ad.as_tensor(x)
        if x.shape[1] != self.input_dim:
            raise ad.ShapeError(f"model expects {self.input_dim} inputs, got {x.shape[1]}")
        z = self.backbone.forward(x, train=train, rng=rng, update_sn=update_sn)
        if rho is None and train and self._needs_rho():
            # the GMM was fitted on eval-mode features, so score those
            with ad.no_grad():
                z_eval = self.backbone.forward(x, train=False, update_sn=False)
            rho = self.rho(z_eval.data)
        return self.forward_features(z, train=train, labels=labels, rng=rng, rho=rho, fi=fi,
                                     update_sn=update_sn)

    def forward_features(self, z, train=False, labels=None, rng=None, rho=None, fi=None,
                         update_sn=False, allow_fi=True):
        cfg = self.config
        z = ad.as_tensor(z)
        E = networks.energy_forward(self.energy_net, z, use_tanh=cfg.tanh_energy,
                                    desaturation=cfg.energy_desaturation, train=train, rng=rng)
        s_hat = ad.sigmoid(E)
        logits = [self.heads.logits(z, k, cfg.temperature, train=train, rng=rng) for k in range(cfg.K)]

        if rho is None:
            rho = self.rho(z.data)
        rho = np.asarray(rho, dtype=np.float64).reshape(-1)

        if cfg.variant == "DAEDL_BASELINE":
            if not self.density_ready:
                raise density.NotFittedError("DAEDL baseline needs a fitted GMM")
            lam = density.lambda_from_loglik(self.gmm.log_likelihood(z.data), self.gmm_calibration,
                                             cfg.daedl_lambda_min)
            alphas = [ad.exp(ad.clip(ad.mul(u, lam[:, None]), -cfg.tau, cfg.tau)) for u in logits]
        else:
            r = rho if cfg.uses_density else None
            alphas = [alpha_from_logits_t(u, rho=r, tau=cfg.tau, eps=cfg.eps) for u in logits]

        pi_raw = networks.router_forward(self.router_net, z, s_hat, train=train, rng=rng)
        pi = pi_raw
        fi_vals = None
        fi_bar = None
        want_fi = train and allow_fi and (cfg.fi_mod or cfg.fi_reg)
        if fi is not None:
            fi_vals = np.asarray(fi, dtype=np.float64)
        elif want_fi:
            y = labels if labels is not None else pseudo_label([u.data for u in logits])
            r = rho if cfg.uses_density and cfg.variant != "DAEDL_BASELINE" else None
            fi_vals = np.stack([fi_proxy(u.data, y, rho=r, tau=cfg.tau, eps=cfg.eps) for u in logits],
                               axis=1)
        if train and cfg.fi_mod and fi_vals is not None:
            pi, fi_bar = fi_modulate(pi_raw, fi_vals, cfg.lambda_fi, cfg.eps_prime)

        head_probs = [ad.normalize_rows(a) for a in alphas]
        if cfg.K == 1:
            p_mix = head_probs[0]
        else:
            p_mix = None
            for k, p in enumerate(head_probs):
                term = ad.mul(ad.slice_cols(pi, k, k + 1), p)
                p_mix = term if p_mix is None else ad.add(p_mix, term)

        if cfg.gated:
            s = networks.gate_forward(self.gate_net, z, s_hat, cfg.s_min, cfg.s_max, train=train, rng=rng)
            p_hat = ad.normalize_rows(ad.mul(p_mix, s))
        else:
            s = None
            p_hat = p_mix
        return ForwardResult(z=z, E=E, s_hat=s_hat, s=s, logits=logits, alphas=alphas,
                             head_probs=head_probs, pi_raw=pi_raw, pi=pi, p_mix=p_mix, p_hat=p_hat,
                             rho=rho, fi=fi_vals, fi_bar=fi_bar)

    def predict(self, x, batch_size=2048):
        """Eval-mode diagnostics for a whole array, without recording a tape."""
        parts = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                parts.append(self.forward(x[i:i + batch_size], mode="eval").diagnostics())
        return _concat_diagnostics(parts)

    def energy_values(self, x, diag=None):
        """Energies from whichever source the fitted energy calibration selected."""
        calib = self.energy_calibration
        diag = diag if diag is not None else self.predict(x)
        if calib is None or calib.source == "head":
            return diag.E
        if calib.source == "gmm":
            return density.gmm_energy(self.gmm, self.features(x))
        return density.logit_energy(diag.logits.mean(axis=0))

    # --------------------------------------------------------- objective
    def sample_negatives(self, n, rng):
        """VOS negatives in feature space, classes taken round-robin."""
        cg = self.class_gaussians
        classes = [c for c in range(self.n_classes) if cg.present[c]]
        counts = np.bincount(np.arange(n) % len(classes), minlength=len(classes))
        parts = [density.vos_sample(cg, c, int(m), self.config.vos_tail_quantile, rng=rng)
                 for c, m in zip(classes, counts) if m > 0]
        return np.concatenate(parts, axis=0)

    def objective(self, x, y, epoch=0, rng=None, vos_rng=None, rho=None, fi=None, negatives=None,
                  update_sn=None):
        """Total training loss (Tensor) and its LossBreakdown.

        ``rho``, ``fi`` and ``negatives`` may be passed in to hold those
        stop-gradient quantities fixed (used by gradient checks).
        """
        cfg = self.config
        if rho is None and self._needs_rho() and epoch < cfg.density_warmup_epochs:
            # features still move fast here; a GMM of the init features would zero out rho
            rho = np.ones(len(y))
        res = self.forward(x, mode="train", labels=y, rng=rng, rho=rho, fi=fi, update_sn=update_sn)
        kl_alphas = res.alphas
        if self._needs_rho() and not cfg.kl_uses_rho:
            # prior on the density-free evidence; with rho inside, KL ~ 1/eps off-support
            kl_alphas = [alpha_from_logits_t(u, tau=cfg.tau, eps=cfg.eps) for u in res.logits]
        if cfg.loss_kind == "se":
            pred, kl = loss_core(res.p_hat, y, kl_alphas[0], cfg.lambda_kl)
        else:
            pred, kl = loss_mix(res.p_hat, y, kl_alphas, res.pi)
        zero = ad.Tensor(0.0)
        fi_term = zero
        if cfg.fi_reg and res.fi is not None:
            fi_term = loss_fi(res.pi, res.fi, cfg.fi_trace_beta)

        neg = None
        if negatives is not None:
            neg = negatives
        elif (cfg.vos_active and epoch >= cfg.vos_warmup_epochs and self.class_gaussians is not None):
            neg = self.sample_negatives(len(y), vos_rng if vos_rng is not None else np.random.default_rng(0))
        neg_res = None
        if neg is not None:
            neg_res = self.forward_features(neg, train=True, rng=rng, allow_fi=False)

        ebm_term = zero
        if cfg.ebm:
            E_id = res.E
            if not cfg.ebm_backbone_grad:
                # the energy loss shapes E_psi only; z stays fixed for it
                E_id = networks.energy_forward(self.energy_net, ad.Tensor(res.z.data), use_tanh=cfg.tanh_energy,
                                               desaturation=cfg.energy_desaturation, train=True, rng=rng)
            ebm_term = loss_ebm(E_id, None if neg_res is None else neg_res.E, cfg.tau,
                                cfg.vos_margin, cfg.vos_weight)
        unc_term = zero
        if cfg.unc:
            unc_term = loss_unc(res.p_hat, None if neg_res is None else neg_res.p_hat,
                                cfg.beta_id, cfg.beta_ood)

        weights = {"kl": cfg.lambda_kl, "fi": cfg.lambda_fi if cfg.fi_reg else 0.0,
                   "ebm": cfg.lambda_ebm if cfg.ebm else 0.0, "unc": cfg.lambda_unc if cfg.unc else 0.0}
        total = ad.add(pred, ad.mul(kl, weights["kl"]))
        if cfg.fi_reg:
            total = ad.add(total, ad.mul(fi_term, weights["fi"]))
        if cfg.ebm:
            total = ad.add(total, ad.mul(ebm_term, weights["ebm"]))
        if cfg.unc:
            total = ad.add(total, ad.mul(unc_term, weights["unc"]))
        breakdown = LossBreakdown(pred=pred.item(), kl=kl.item(), fi=fi_term.item(), ebm=ebm_term.item(),
                                  unc=unc_term.item(), total=total.item(), weights=weights,
                                  unc_ood_missing=cfg.unc and neg_res is None)
        return total, breakdown

    # ------------------------------------------------------- checkpoints
    def save(self, path, extra=None):
        modules = {name: mod.parameters() for name, mod in self.modules().items()}
        sn = {}
        for name, mod in self.modules().items():
            mlps = mod.heads if isinstance(mod, networks.HeadSet) else [mod]
            for j, mlp in enumerate(mlps):
                for i, layer in enumerate(mlp.layers):
                    if layer.sn_enabled:
                        sn[f"{name}.{j}.{i}.u"] = layer.sn_u
                        sn[f"{name}.{j}.{i}.v"] = layer.sn_v
        modules["sn_state"] = sn
        meta = {
            "config": self.config.to_dict(),
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "gmm": self.gmm.to_dict() if self.density_ready else None,
            "gmm_calibration": None if self.gmm_calibration is None
            else [self.gmm_calibration.q01, self.gmm_calibration.q99],
            "class_gaussians": None if self.class_gaussians is None else self.class_gaussians.to_dict(),
            "energy_calibration": None if self.energy_calibration is None
            else self.energy_calibration.to_dict(),
        }
        meta.update(extra or {})
        networks.save_checkpoint(path, modules, extra=meta)

    @classmethod
    def load(cls, path):
        modules, meta = networks.load_checkpoint(path)
        config = GemConfig.from_dict(meta["config"])
        model = cls(config, meta["input_dim"], meta["n_classes"], seed=meta.get("seed", 0))
        params = model.parameters()
        for mname, entry in modules.items():
            if mname == "sn_state":
                continue
            for pname, arr in entry.items():
                t = params[f"{mname}.{pname}"]
                if t.shape != arr.shape:
                    raise ValueError(f"checkpoint shape mismatch for {mname}.{pname}")
                t.data[...] = arr
        for key, vec in modules.get("sn_state", {}).items():
            name, j, i, which = key.split(".")
            mod = model.modules()[name]
            mlp = mod.heads[int(j)] if isinstance(mod, networks.HeadSet) else mod
            setattr(mlp.layers[int(i)], "sn_u" if which == "u" else "sn_v", vec.copy())
        if meta.get("gmm"):
            model.gmm = density.GmmModel.from_dict(meta["gmm"])
        if meta.get("gmm_calibration"):
            model.gmm_calibration = density.DensityCalibration(*meta["gmm_calibration"])
        if meta.get("class_gaussians"):
            model.class_gaussians = density.ClassGaussians.from_dict(meta["class_gaussians"])
        if meta.get("energy_calibration"):
            model.energy_calibration = density.EnergyCalibration.from_dict(meta["energy_calibration"])
        return model, meta


def _concat_diagnostics(parts):
    if len(parts) == 1:
        return parts[0]
    out = {}
    for f in dataclasses.fields(ForwardDiagnostics):
        vals = [getattr(p, f.name) for p in parts]
        if vals[0] is None:
            out[f.name] = None
        elif f.name in ("logits", "alpha_per_head", "head_probs"):
            out[f.name] = np.concatenate(vals, axis=1)
        else:
            out[f.name] = np.concatenate(vals, axis=0)
    return ForwardDiagnostics(**out)
