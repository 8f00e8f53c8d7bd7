"""Training loop: Adam with gradient clipping, mixture warm start from a
Gaussian-mixture fit of the initial latents, per-epoch metrics, and
bit-exact checkpointing."""

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import elbo, mixture, network
from .data import match_clusters_to_classes
from .elbo import TrainingMode
from .errors import ContractViolation, NumericFault, ValidationError
from .network import MlpConfig, TwoHeadMlp
from .tensor import GradientMap, Tensor, evaluate_and_grad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CHECKPOINT_VERSION = 1
FROZEN_DOF = 1e6  # Gaussian-limit baseline: dof pinned here and not trained


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; defaults cover the unstated knobs."""

    net: MlpConfig
    latent_dim: int
    n_components: int
    stepsize: float = 1e-3
    sigma_jitter_sq: float = 0.01
    l1_coeff: float = 0.001
    epochs: int = 100
    batch_size: int = 128
    t_samples: int = 1
    warm_start_iters: int = 15
    seed: int = 0
    mode: TrainingMode = TrainingMode("unsupervised")
    nu_init: float = 5.0
    freeze_dof: bool = False
    detach_gamma: bool = False
    supervised_replacement: str = "weights"
    log_std_clamp: float = 7.0
    grad_clip: float = 1.0

    def __post_init__(self):
        positive = {
            "latent_dim": self.latent_dim,
            "n_components": self.n_components,
            "stepsize": self.stepsize,
            "sigma_jitter_sq": self.sigma_jitter_sq,
            "batch_size": self.batch_size,
            "t_samples": self.t_samples,
            "log_std_clamp": self.log_std_clamp,
            "grad_clip": self.grad_clip,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ContractViolation(f"{name} must be positive, got {value}")
        for name, value in (
            ("epochs", self.epochs),
            ("warm_start_iters", self.warm_start_iters),
            ("l1_coeff", self.l1_coeff),
        ):
            if value < 0:
                raise ContractViolation(f"{name} must be >= 0, got {value}")
        if self.net.layer_dims[-1] != self.latent_dim:
            raise ContractViolation(
                f"encoder output dim {self.net.layer_dims[-1]} != "
                f"latent_dim {self.latent_dim}"
            )
        if self.supervised_replacement not in elbo.SUPERVISED_REPLACEMENTS:
            raise ContractViolation(
                f"supervised_replacement must be one of "
                f"{elbo.SUPERVISED_REPLACEMENTS}"
            )
        if not self.nu_init > mixture.nu_floor_constant():
            raise ContractViolation(
                f"nu_init must exceed {mixture.nu_floor_constant()}"
            )


@dataclass
class EpochMetrics:
    epoch: int  # 1-based
    loss: float  # mean batch loss
    error_rate: Optional[float]
    wallclock: float  # seconds spent in this epoch


@dataclass
class TrainResult:
    trainer: "Trainer"
    metrics: list = field(default_factory=list)


# -------------------------------------------------------------- optimization


def clip_grad_norm(grads, max_norm=1.0):
    """Scale all gradients so their joint l2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ContractViolation(f"max_norm must be positive, got {max_norm}")
    sq = 0.0
    for g in grads.values():
        sq += float((g.data**2).sum())
    norm = float(np.sqrt(sq))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    clipped = GradientMap()
    for name, g in grads.items():
        clipped[name] = Tensor(g.data * scale)
    return clipped


def adam_step(params, grads, moments, stepsize, t):
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8, bias-corrected).

    Mutates the parameter tensors in place and the moment store; ``t`` is
    the 1-based update count shared by every parameter group.
    """
    if t < 1:
        raise ContractViolation(f"adam step count must be >= 1, got {t}")
    corr1 = 1.0 - ADAM_BETA1**t
    corr2 = 1.0 - ADAM_BETA2**t
    for name, g in grads.items():
        if name not in params:
            raise ContractViolation(f"gradient for unknown parameter {name!r}")
        grad = g.data
        if name in moments:
            m, v = moments[name]
        else:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
        moments[name] = (m, v)
        step = stepsize * (m / corr1) / (np.sqrt(v / corr2) + ADAM_EPS)
        params[name].assign_(params[name].data - step)


# -------------------------------------------------------------------- trainer


def _t_scale_from_rows(rows, mean, nu, iters=4, ridge=1e-9):
    """Student-t scale-matrix fixed point started from the sample covariance.

    For rows drawn from a t distribution with the given dof the sample
    covariance overestimates the scale matrix by nu / (nu - 2); iterating
    S <- mean_i w_i d_i d_i^T with w_i = (nu + D) / (nu + d_i^T S^-1 d_i)
    recovers the maximum-likelihood scale. For Gaussian rows the update is
    consistent, so light-tailed clusters are left essentially unchanged.
    """
    d = rows.shape[1]
    diffs = rows - mean
    scale = np.cov(rows.T, bias=True).reshape(d, d)
    eye = np.eye(d)
    for _ in range(iters):
        solved = np.linalg.solve(scale + ridge * eye, diffs.T)
        maha = np.einsum("nd,dn->n", diffs, solved)
        w = (nu + d) / (nu + np.maximum(maha, 0.0))
        scale = (w[:, None] * diffs).T @ diffs / rows.shape[0]
    return scale


def _mixture_from_assignments(latents, assignments, k_count, jitter, nu_init):
    """Initial latent mixture from per-cluster moments of the latents.

    Cluster scales come from the t fixed point at nu_init rather than the
    raw covariance so heavy-tailed clusters start near their scale matrix.
    Clusters with fewer than two rows fall back to the global moments so
    every component starts well-posed.
    """
    n, d = latents.shape
    global_mean = latents.mean(axis=0)
    global_cov = _t_scale_from_rows(latents, global_mean, nu_init)
    weights = np.zeros(k_count)
    means = np.zeros((k_count, d))
    covs = np.zeros((k_count, d, d))
    for k in range(k_count):
        rows = latents[assignments == k]
        if rows.shape[0] < 2:
            weights[k] = 1.0 / n
            means[k] = global_mean
            covs[k] = global_cov
            continue
        weights[k] = rows.shape[0] / n
        means[k] = rows.mean(axis=0)
        covs[k] = _t_scale_from_rows(rows, means[k], nu_init)
    weights = weights / weights.sum()
    return mixture.raw_from_moments(weights, means, covs, jitter, nu_init)


class Trainer:
    """Owns the networks, raw mixture parameters, optimizer state and rng.

    The rng is consumed in a fixed order (network init, warm-start fit,
    then per-epoch shuffles and noise draws) so a run is reproducible from
    the seed and resumable bit-exactly from a checkpoint.
    """

    def __init__(self, observations, labels, cfg, _restore=None):
        observations = np.asarray(observations, dtype=np.float64)
        if observations.ndim != 2 or observations.shape[0] == 0:
            raise ContractViolation("training needs a non-empty (N, L) matrix")
        if observations.shape[1] != cfg.net.layer_dims[0]:
            raise ContractViolation(
                f"encoder expects {cfg.net.layer_dims[0]} features, data has "
                f"{observations.shape[1]}"
            )
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (observations.shape[0],):
                raise ContractViolation("labels must align with observations")
            if labels.size and labels.max() >= cfg.n_components:
                raise ValidationError(
                    f"label {labels.max()} outside the {cfg.n_components} components"
                )
        if cfg.mode.kind in ("supervised", "semi_supervised") and labels is None:
            raise ContractViolation(f"{cfg.mode.kind} training requires labels")
        self.cfg = cfg
        self.observations = observations
        self.labels = labels
        self.labeled_rows = (
            np.arange(observations.shape[0])
            if labels is not None
            else np.empty(0, dtype=np.int64)
        )

        dec_dims = tuple(reversed(cfg.net.layer_dims))
        dec_cfg = MlpConfig(dec_dims, cfg.net.activation)
        if _restore is not None:
            self.rng = _restore["rng"]
            self.encoder = TwoHeadMlp(
                cfg.net, "enc", np.random.default_rng(0), cfg.log_std_clamp
            )
            self.decoder = TwoHeadMlp(
                dec_cfg, "dec", np.random.default_rng(0), cfg.log_std_clamp
            )
            self.raw_mix = mixture.SmmRawParams(
                m=np.zeros(cfg.n_components),
                n=np.full(cfg.n_components, mixture.raw_dof_for_nu(cfg.nu_init)),
                mu=np.zeros((cfg.n_components, cfg.latent_dim)),
                c_raw=np.zeros((cfg.n_components, cfg.latent_dim, cfg.latent_dim)),
                c_logdiag=np.zeros((cfg.n_components, cfg.latent_dim)),
                sigma_jitter_sq=cfg.sigma_jitter_sq,
            )
            for name, values in _restore["params"].items():
                p = self.params()[name]
                p.assign_(np.asarray(values, dtype=np.float64).reshape(p.shape))
            self.moments = {}
            for name, (m, v) in _restore["moments"].items():
                shape = self.params()[name].shape
                self.moments[name] = (
                    np.asarray(m, dtype=np.float64).reshape(shape),
                    np.asarray(v, dtype=np.float64).reshape(shape),
                )
            self.step = _restore["step"]
            self.epoch = _restore["epoch"]
            self.warm_weights = _restore["warm_weights"]
            return

        self.rng = np.random.default_rng(cfg.seed)
        self.encoder = TwoHeadMlp(cfg.net, "enc", self.rng, cfg.log_std_clamp)
        self.decoder = TwoHeadMlp(dec_cfg, "dec", self.rng, cfg.log_std_clamp)

        latents = network.encoder_forward(
            Tensor(observations), self.encoder
        ).mu_x.data
        # Warm-start assignments: labels when the mode may see them,
        # otherwise hard assignments of a mixture fit to the observations.
        # Unsupervised runs ignore labels even if present (metrics only).
        if labels is not None and cfg.mode.kind != "unsupervised":
            assignments = labels.copy()
        else:
            fit = mixture.gmm_em_fit(
                observations,
                cfg.n_components,
                self.rng,
                cfg.sigma_jitter_sq,
                nu_init=cfg.nu_init,
            )
            assignments = fit.responsibilities.argmax(axis=1)
        self.raw_mix = _mixture_from_assignments(
            latents, assignments, cfg.n_components, cfg.sigma_jitter_sq,
            cfg.nu_init,
        )
        if cfg.freeze_dof:
            self.raw_mix.n.assign_(
                np.full(cfg.n_components, mixture.raw_dof_for_nu(FROZEN_DOF))
            )
        self.warm_weights = elbo.one_hot(assignments, cfg.n_components)
        self.moments = {}
        self.step = 0
        self.epoch = 0

    # ------------------------------------------------------------- plumbing

    def params(self):
        return {
            **self.encoder.params(),
            **self.decoder.params(),
            **self.raw_mix.params(),
        }

    def trainable_params(self):
        out = self.params()
        if self.cfg.freeze_dof:
            out.pop("mix.n")
        return out

    def _epoch_plan(self, epoch):
        """(mode kind, row indices) for a 0-based epoch index."""
        mode = self.cfg.mode
        all_rows = np.arange(self.observations.shape[0])
        if mode.kind == "unsupervised":
            return "unsupervised", all_rows
        if mode.kind == "supervised":
            return "supervised", self.labeled_rows
        if epoch < mode.supervised_epochs:
            return "supervised", self.labeled_rows
        return "unsupervised", all_rows

    # ------------------------------------------------------------- training

    def train_epochs(self, n_epochs=None):
        """Run up to ``cfg.epochs`` (or ``n_epochs`` more); returns metrics."""
        cfg = self.cfg
        last = cfg.epochs if n_epochs is None else self.epoch + n_epochs
        metrics = []
        while self.epoch < last:
            t_start = time.perf_counter()
            kind, rows = self._epoch_plan(self.epoch)
            if rows.size == 0:
                raise ContractViolation("no rows available for this epoch")
            order = rows[self.rng.permutation(rows.size)]
            losses = []
            for b_idx, start in enumerate(range(0, order.size, cfg.batch_size)):
                batch = order[start : start + cfg.batch_size]
                try:
                    losses.append(self._update(batch, kind))
                except NumericFault as exc:
                    raise NumericFault(
                        f"epoch {self.epoch + 1}, batch {b_idx + 1}: {exc}"
                    ) from exc
            self.epoch += 1
            error_rate = None
            if self.labels is not None:
                error_rate, _ = self.evaluate(self.observations, self.labels)
            metrics.append(
                EpochMetrics(
                    epoch=self.epoch,
                    loss=float(np.mean(losses)),
                    error_rate=error_rate,
                    wallclock=time.perf_counter() - t_start,
                )
            )
        return metrics

    def _update(self, batch_rows, kind):
        cfg = self.cfg
        weight_override = None
        if self.step < cfg.warm_start_iters:
            weight_override = self.warm_weights[batch_rows]
        labels_arg = (
            self.labels[batch_rows]
            if (kind == "supervised" and self.labels is not None)
            else None
        )
        loss = elbo.loss_batch(
            self.observations[batch_rows],
            self.encoder,
            self.decoder,
            self.raw_mix,
            kind,
            cfg.l1_coeff,
            rng=self.rng,
            t_samples=cfg.t_samples,
            labels=labels_arg,
            weight_override=weight_override,
            detach_gamma=cfg.detach_gamma,
            supervised_replacement=cfg.supervised_replacement,
        )
        value, grads = evaluate_and_grad(loss)
        if cfg.freeze_dof:
            grads.pop("mix.n", None)
        grads = clip_grad_norm(grads, cfg.grad_clip)
        self.step += 1
        adam_step(self.trainable_params(), grads, self.moments, cfg.stepsize, self.step)
        return value

    # ------------------------------------------------------------ evaluation

    def predict_responsibilities(self, observations, chunk=2048):
        """(N, K) responsibilities without touching the optimizer state."""
        observations = np.asarray(observations, dtype=np.float64)
        params = mixture.materialize_params(self.raw_mix)
        out = []
        for start in range(0, observations.shape[0], chunk):
            stats = network.encoder_forward(
                Tensor(observations[start : start + chunk]), self.encoder
            )
            out.append(mixture.posterior_stats(stats, params).gamma.data)
        return np.vstack(out)

    def evaluate(self, observations, labels, map_clusters=None):
        """Error rate and K-by-K confusion (rows: predicted, cols: true).

        Unsupervised models are scored after the optimal cluster-to-class
        assignment; supervised/semi-supervised models use cluster ids as
        class ids directly.
        """
        if labels is None:
            raise ContractViolation("evaluation requires labels")
        labels = np.asarray(labels, dtype=np.int64)
        k = self.cfg.n_components
        if labels.size == 0:
            raise ContractViolation("evaluation requires at least one row")
        if labels.max() >= k or labels.min() < 0:
            raise ValidationError(
                f"labels span [{labels.min()}, {labels.max()}] but the model "
                f"has {k} clusters"
            )
        if map_clusters is None:
            map_clusters = self.cfg.mode.kind == "unsupervised"
        gamma = self.predict_responsibilities(observations)
        pred = np.argmax(gamma, axis=1)  # ties resolve to the lowest index
        confusion = np.zeros((k, k), dtype=np.int64)
        np.add.at(confusion, (pred, labels), 1)
        if map_clusters:
            _, accuracy = match_clusters_to_classes(confusion)
            return 1.0 - accuracy, confusion
        return float((pred != labels).mean()), confusion

    def sample(self, count, rng):
        """Generative draws: (cluster, u, latent x, decoded observation o)."""
        params = mixture.materialize_params(self.raw_mix)
        labels, u, x = mixture.sample_generative(rng, params, count)
        if count == 0:
            return labels, u, x, np.empty((0, self.cfg.net.layer_dims[0]))
        mu_o, log_std_o = self.decoder.forward(Tensor(x))
        from .distributions import standard_normal_array

        noise = standard_normal_array(rng, mu_o.data.size).reshape(mu_o.shape)
        obs = mu_o.data + np.exp(log_std_o.data) * noise
        return labels, u, x, obs


def train(observations, labels, cfg):
    """Fresh run: returns the trained state plus per-epoch metrics."""
    trainer = Trainer(observations, labels, cfg)
    metrics = trainer.train_epochs()
    return TrainResult(trainer=trainer, metrics=metrics)


# ---------------------------------------------------------------- checkpoints


def _config_to_dict(cfg):
    return {
        "net": {
            "layer_dims": list(cfg.net.layer_dims),
            "activation": cfg.net.activation,
        },
        "latent_dim": cfg.latent_dim,
        "n_components": cfg.n_components,
        "stepsize": cfg.stepsize,
        "sigma_jitter_sq": cfg.sigma_jitter_sq,
        "l1_coeff": cfg.l1_coeff,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "t_samples": cfg.t_samples,
        "warm_start_iters": cfg.warm_start_iters,
        "seed": cfg.seed,
        "mode": {
            "kind": cfg.mode.kind,
            "supervised_epochs": cfg.mode.supervised_epochs,
        },
        "nu_init": cfg.nu_init,
        "freeze_dof": cfg.freeze_dof,
        "detach_gamma": cfg.detach_gamma,
        "supervised_replacement": cfg.supervised_replacement,
        "log_std_clamp": cfg.log_std_clamp,
        "grad_clip": cfg.grad_clip,
    }


def config_from_dict(raw):
    raw = dict(raw)
    net = raw.pop("net")
    mode = raw.pop("mode")
    return TrainConfig(
        net=MlpConfig(tuple(net["layer_dims"]), net["activation"]),
        mode=TrainingMode(mode["kind"], mode.get("supervised_epochs", 0)),
        **raw,
    )


def save_checkpoint(trainer, path):
    """Versioned JSON snapshot: config echo, parameters, Adam moments,
    progress counters, warm-start weights, and the exact rng state."""
    state = {
        "version": CHECKPOINT_VERSION,
        "config": _config_to_dict(trainer.cfg),
        "epoch": trainer.epoch,
        "step": trainer.step,
        "params": {
            name: p.data.ravel().tolist() for name, p in trainer.params().items()
        },
        "moments": {
            name: [m.ravel().tolist(), v.ravel().tolist()]
            for name, (m, v) in trainer.moments.items()
        },
        "warm_weights": trainer.warm_weights.tolist(),
        "rng_state": trainer.rng.bit_generator.state,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state, fh)


def load_checkpoint(path, observations, labels):
    """Rebuild a Trainer whose next step matches the saved run bit-exactly."""
    with open(path, "r", encoding="utf-8") as fh:
        state = json.load(fh)
    version = state.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint version {version!r} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    cfg = config_from_dict(state["config"])
    bit_gen = np.random.PCG64()
    bit_gen.state = state["rng_state"]
    restore = {
        "rng": np.random.Generator(bit_gen),
        "params": state["params"],
        "moments": state["moments"],
        "step": int(state["step"]),
        "epoch": int(state["epoch"]),
        "warm_weights": np.asarray(state["warm_weights"], dtype=np.float64),
    }
    return Trainer(observations, labels, cfg, _restore=restore)
