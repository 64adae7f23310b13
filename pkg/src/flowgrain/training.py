"""Random-crop training loop for flow models.

The loop is deterministic given (seed, data, config): a single PCG64
stream drives, in this order, the image split permutation, the SVD fit
sample (raw draws then dequantization noise), model initialization, the
fixed validation crops, and then per-batch crop draws and their noise.

Each epoch is a fixed number of fresh crop batches; the crop population
is combinatorially large so there is no natural data epoch. Validation
crops come from held-out images through the same pipeline, and early
stopping keeps the parameters of the best validation epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .checkpoint import read_container, write_container
from .errors import (
    CorruptCheckpointError,
    DivergenceError,
    ImageTooSmallError,
    NonFiniteError,
)
from .flows import FlowConfig, FlowModel
from .projection import ProjectionBasis, fit_basis, project


@dataclass
class TrainConfig:
    crop_size: int = 46
    batch_size: int = 256
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    val_fraction: float = 0.1
    svd_components: int | None = 100
    batches_per_epoch: int = 200
    val_crops: int = 2048
    dequantize: bool = True
    whiten: bool = True
    fit_sample_cap: int = 20000

    def validate(self):
        if self.crop_size < 1:
            raise ValueError("crop_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.max_epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("max_epochs and batches_per_epoch must be >= 1")


@dataclass
class TrainHistory:
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    best_epoch: int = -1


@dataclass
class TrainedFlow:
    """Everything needed to score crops exactly as during training."""

    model: FlowModel
    basis: ProjectionBasis | None
    train_config: TrainConfig
    history: TrainHistory

    @property
    def crop_size(self):
        return self.train_config.crop_size

    def preprocess(self, raw):
        """Inference preprocessing: bin-center scaling, no noise, then the
        training-time projection when one exists."""
        x = (np.asarray(raw, dtype=np.float64) + 0.5) / 256.0
        if self.basis is not None:
            x = project(self.basis, x, whiten=self.train_config.whiten)
        return x

    def score_crops(self, raw):
        """Log-likelihood of raw flattened crop vectors (m, w*w*3)."""
        return self.model.log_prob(self.preprocess(raw))


class Adam:
    """Adam updates over a fixed parameter list; skips any step whose
    gradients are missing or non-finite so a bad batch cannot poison the
    parameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = []
        for p in self.params:
            if p.grad is None or not np.all(np.isfinite(p.grad)):
                return False
            grads.append(p.grad)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


# ---------------------------------------------------------------------------
# crop pipeline


def sample_crops(images, crop_size, count, rng, with_positions=False):
    """Uniformly random crops: image chosen uniformly, then a uniform
    top-left position. Returns (count, crop_size^2 * 3) raw pixel vectors
    (and, optionally, (image_index, row, col) provenance rows)."""
    w = int(crop_size)
    for rec in images:
        h_img, w_img = rec.pixels.shape[:2]
        if h_img < w or w_img < w:
            raise ImageTooSmallError(
                f"image '{rec.id}' is {h_img}x{w_img}, smaller than crop {w}")
    out = np.empty((count, w * w * 3))
    pos = np.empty((count, 3), dtype=np.int64)
    n = len(images)
    for j in range(count):
        i = int(rng.integers(n))
        px = images[i].pixels
        r = int(rng.integers(px.shape[0] - w + 1))
        c = int(rng.integers(px.shape[1] - w + 1))
        out[j] = px[r : r + w, c : c + w, :].astype(np.float64).reshape(-1)
        pos[j] = (i, r, c)
    if with_positions:
        return out, pos
    return out


def dequantize_crops(raw, rng):
    """8-bit values plus uniform [0,1) noise, scaled to [0,1)."""
    return (raw + rng.random(raw.shape)) / 256.0


def center_crops(raw):
    """Noise-free counterpart: bin centers scaled into (0,1)."""
    return (np.asarray(raw, dtype=np.float64) + 0.5) / 256.0


# ---------------------------------------------------------------------------
# training


def _eval_nll(model, x, chunk=4096):
    total = 0.0
    for lo in range(0, len(x), chunk):
        lp = model.log_prob(x[lo : lo + chunk])
        if not np.all(np.isfinite(lp)):
            return float("inf")
        total += float(np.sum(lp))
    return -total / len(x)


def _snapshot(model):
    params = {k: p.data.copy() for k, p in model.parameters().items()}
    state = {k: a.copy() for k, a in model.state_arrays().items()}
    return params, state


def _restore(model, snap):
    params, state = snap
    for k, p in model.parameters().items():
        p.data[...] = params[k]
    for k in model.state_arrays():
        model.set_state_array(k, state[k])


def _fit(model, draw_batch, val_x, cfg):
    """Shared optimization loop: Adam over mean NLL with early stopping on
    the fixed validation matrix ``val_x``."""
    params = model.parameters()
    opt = Adam(params.values(), lr=cfg.learning_rate)
    history = TrainHistory()
    best = float("inf")
    best_snap = _snapshot(model)
    since_best = 0
    for epoch in range(cfg.max_epochs):
        losses = []
        for _ in range(cfg.batches_per_epoch):
            x = draw_batch()
            ad.zero_grad(params.values())
            try:
                with ad.Tape() as tape:
                    nll = model.mean_nll_t(ad.Tensor(x), train=True,
                                           update_stats=True)
                ad.backward(tape, nll)
            except NonFiniteError:
                continue
            if opt.step():
                losses.append(float(nll.data))
        if not losses:
            raise DivergenceError(
                f"train NLL non-finite for all of epoch {epoch}")
        val = _eval_nll(model, val_x)
        history.train_nll.append(float(np.mean(losses)))
        history.val_nll.append(val)
        if val < best:
            best = val
            best_snap = _snapshot(model)
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    _restore(model, best_snap)
    return history


def train_flow(images, train_cfg, flow_cfg):
    """Train a flow on random crops from ``images`` (a list of records
    with ``.pixels``); returns a TrainedFlow holding the best-validation
    parameters."""
    train_cfg.validate()
    cfg = train_cfg
    if not images:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    w = cfg.crop_size

    perm = rng.permutation(len(images))
    n_val = max(1, int(round(cfg.val_fraction * len(images))))
    if n_val >= len(images):
        raise ValueError("val_fraction leaves no training images")
    val_images = [images[i] for i in perm[:n_val]]
    train_images = [images[i] for i in perm[n_val:]]

    def draw(imgs, count):
        raw = sample_crops(imgs, w, count, rng)
        if cfg.dequantize:
            return dequantize_crops(raw, rng)
        return center_crops(raw)

    basis = None
    if cfg.svd_components is not None:
        fit_n = min(cfg.fit_sample_cap,
                    max(4 * cfg.svd_components, cfg.batch_size * 8))
        basis = fit_basis(draw(train_images, fit_n), cfg.svd_components)

    d_eff = cfg.svd_components if basis is not None else w * w * 3
    flow_cfg = replace(flow_cfg, input_dim=d_eff)
    model = FlowModel(flow_cfg, rng)

    def pipeline(x):
        return project(basis, x, whiten=cfg.whiten) if basis is not None else x

    val_x = pipeline(draw(val_images, cfg.val_crops))

    def draw_batch():
        return pipeline(draw(train_images, cfg.batch_size))

    history = _fit(model, draw_batch, val_x, cfg)
    return TrainedFlow(model=model, basis=basis, train_config=cfg,
                       history=history)


def train_flow_tabular(data, train_cfg, flow_cfg):
    """Tabular entry point: rows of ``data`` are the samples; no crop
    pipeline, no dequantization."""
    train_cfg.validate()
    cfg = train_cfg
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or len(x) < 4:
        raise ValueError("tabular data must be (n, d) with n >= 4")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(x))
    n_val = max(1, int(round(cfg.val_fraction * len(x))))
    val_rows = x[perm[:n_val]]
    train_rows = x[perm[n_val:]]

    basis = None
    if cfg.svd_components is not None and cfg.svd_components < x.shape[1]:
        basis = fit_basis(train_rows, cfg.svd_components)

    def pipeline(rows):
        return project(basis, rows, whiten=cfg.whiten) if basis is not None else rows

    d_eff = basis.k if basis is not None else x.shape[1]
    flow_cfg = replace(flow_cfg, input_dim=d_eff)
    model = FlowModel(flow_cfg, rng)
    val_x = pipeline(val_rows)

    def draw_batch():
        idx = rng.integers(0, len(train_rows), cfg.batch_size)
        return pipeline(train_rows[idx])

    history = _fit(model, draw_batch, val_x, cfg)
    train_cfg_out = cfg
    return TrainedFlow(model=model, basis=basis, train_config=train_cfg_out,
                       history=history)


# ---------------------------------------------------------------------------
# persistence


def _bool(s):
    return s in ("True", "true", "1", "yes")


def save_flow_checkpoint(path, trained):
    cfg = trained.train_config
    fc = trained.model.config
    config = {
        "model.kind": "flow",
        "flow.kind": fc.kind,
        "flow.input_dim": fc.input_dim,
        "flow.n_flows": fc.n_flows,
        "flow.hidden_width": fc.hidden_width,
        "flow.activation": fc.activation,
        "flow.use_batchnorm": fc.use_batchnorm,
        "flow.ordering": fc.ordering,
        "train.crop_size": cfg.crop_size,
        "train.batch_size": cfg.batch_size,
        "train.learning_rate": repr(cfg.learning_rate),
        "train.max_epochs": cfg.max_epochs,
        "train.patience": cfg.patience,
        "train.seed": cfg.seed,
        "train.val_fraction": repr(cfg.val_fraction),
        "train.svd_components": "none" if cfg.svd_components is None else cfg.svd_components,
        "train.batches_per_epoch": cfg.batches_per_epoch,
        "train.val_crops": cfg.val_crops,
        "train.dequantize": cfg.dequantize,
        "train.whiten": cfg.whiten,
        "train.fit_sample_cap": cfg.fit_sample_cap,
        "history.best_epoch": trained.history.best_epoch,
        "basis.present": trained.basis is not None,
    }
    arrays = {}
    for name, p in trained.model.parameters().items():
        arrays[f"param.{name}"] = p.data
    for name, a in trained.model.state_arrays().items():
        arrays[f"state.{name}"] = a
    if trained.basis is not None:
        config["basis.n_samples"] = trained.basis.n_samples
        arrays["basis.mean"] = trained.basis.mean
        arrays["basis.components"] = trained.basis.components
        arrays["basis.singular_values"] = trained.basis.singular_values
    arrays["history.train_nll"] = np.asarray(trained.history.train_nll)
    arrays["history.val_nll"] = np.asarray(trained.history.val_nll)
    write_container(path, config, arrays)


def load_flow_checkpoint(path):
    config, arrays = read_container(path)
    if config.get("model.kind") != "flow":
        raise CorruptCheckpointError(
            f"expected a flow checkpoint, found kind "
            f"'{config.get('model.kind', '?')}'")
    flow_cfg = FlowConfig(
        kind=config["flow.kind"],
        input_dim=int(config["flow.input_dim"]),
        n_flows=int(config["flow.n_flows"]),
        hidden_width=int(config["flow.hidden_width"]),
        activation=config["flow.activation"],
        use_batchnorm=_bool(config["flow.use_batchnorm"]),
        ordering=config["flow.ordering"],
    )
    svd = config["train.svd_components"]
    train_cfg = TrainConfig(
        crop_size=int(config["train.crop_size"]),
        batch_size=int(config["train.batch_size"]),
        learning_rate=float(config["train.learning_rate"]),
        max_epochs=int(config["train.max_epochs"]),
        patience=int(config["train.patience"]),
        seed=int(config["train.seed"]),
        val_fraction=float(config["train.val_fraction"]),
        svd_components=None if svd == "none" else int(svd),
        batches_per_epoch=int(config["train.batches_per_epoch"]),
        val_crops=int(config["train.val_crops"]),
        dequantize=_bool(config["train.dequantize"]),
        whiten=_bool(config["train.whiten"]),
        fit_sample_cap=int(config["train.fit_sample_cap"]),
    )
    model = FlowModel(flow_cfg, np.random.default_rng(0))
    for name, p in model.parameters().items():
        key = f"param.{name}"
        if key not in arrays:
            raise CorruptCheckpointError(f"missing parameter array '{key}'")
        if arrays[key].shape != p.data.shape:
            raise CorruptCheckpointError(
                f"parameter '{key}' has shape {arrays[key].shape}, "
                f"expected {p.data.shape}")
        p.data[...] = arrays[key]
    for name in model.state_arrays():
        key = f"state.{name}"
        if key not in arrays:
            raise CorruptCheckpointError(f"missing state array '{key}'")
        model.set_state_array(name, arrays[key])

    basis = None
    if _bool(config.get("basis.present", "False")):
        basis = ProjectionBasis(
            mean=arrays["basis.mean"],
            components=arrays["basis.components"],
            singular_values=arrays["basis.singular_values"],
            n_samples=int(config["basis.n_samples"]),
        )
    history = TrainHistory(
        train_nll=list(arrays.get("history.train_nll", np.empty(0))),
        val_nll=list(arrays.get("history.val_nll", np.empty(0))),
        best_epoch=int(config.get("history.best_epoch", -1)),
    )
    return TrainedFlow(model=model, basis=basis, train_config=train_cfg,
                       history=history)
