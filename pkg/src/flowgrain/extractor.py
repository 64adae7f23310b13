"""Residual convolutional regressor distilling flow log-likelihoods into
a low-dimensional quality embedding.

The network follows pre-activation residual blocks (stride-2 transitions,
3x3 kernels, global average pooling); the dense layer before the scalar
output head is restricted to a handful of units (default 3) and its
activations are the quality embedding. The scalar head is affine in the
embedding.

The teacher signal for a crop is the mean flow log-likelihood over the
non-overlapping tiling of the crop by the flow's own window, so extractor
crops can be larger than flow crops (the default is 4x the linear size).
Teacher values are standardized over the training pool (raw LL magnitudes
carry no meaning here) and the constants ride along in the checkpoint.

Training draws fixed train/validation crop pools from disjoint image
sets, then streams shuffled minibatches with early stopping on validation
MSE. ``embed`` evaluates one crop at a time so a crop's embedding never
depends on which batch it arrived in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import read_container, write_container
from .errors import (
    CorruptCheckpointError,
    DivergenceError,
    NonFiniteError,
    ShapeMismatchError,
)
from .training import Adam, center_crops, sample_crops


@dataclass
class ExtractorConfig:
    crop_size: int = 44            # 4x the reduced-regime flow crop
    stage_widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    pre_linear_units: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_steps: int = 3000
    eval_interval: int = 100
    patience: int = 8              # evals without improvement
    seed: int = 0
    train_pool: int = 8192
    val_pool: int = 1024
    val_fraction: float = 0.1

    def validate(self):
        if self.pre_linear_units < 1:
            raise ValueError("pre_linear_units must be >= 1")
        if len(self.stage_widths) < 1 or self.blocks_per_stage < 1:
            raise ValueError("need at least one stage and one block per stage")
        if self.crop_size < 8:
            raise ValueError("crop_size must be >= 8")


def _he_uniform(rng, shape, fan_in):
    a = np.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=shape)


class _ResBlock:
    """Pre-activation residual block; downsampling blocks use a stride-2
    first conv and a 1x1 projection shortcut."""

    def __init__(self, c_in, c_out, stride, rng):
        self.stride = stride
        self.project = c_in != c_out or stride != 1
        self.w1 = ad.parameter(_he_uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
        self.b1 = ad.parameter(np.zeros(c_out))
        self.w2 = ad.parameter(_he_uniform(rng, (c_out, c_out, 3, 3), c_out * 9))
        self.b2 = ad.parameter(np.zeros(c_out))
        if self.project:
            self.wp = ad.parameter(_he_uniform(rng, (c_out, c_in, 1, 1), c_in))

    def parameters(self):
        out = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        if self.project:
            out["wp"] = self.wp
        return out

    def forward(self, x):
        h = ad.relu(x)
        y = ad.conv2d(h, self.w1, self.b1, stride=self.stride, padding=1)
        y = ad.relu(y)
        y = ad.conv2d(y, self.w2, self.b2, stride=1, padding=1)
        skip = ad.conv2d(h, self.wp, stride=self.stride, padding=0) if self.project else x
        return ad.add(skip, y)


class ExtractorModel:
    def __init__(self, config, rng=None):
        config.validate()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = list(config.stage_widths)
        self.stem_w = ad.parameter(_he_uniform(rng, (widths[0], 3, 3, 3), 27))
        self.stem_b = ad.parameter(np.zeros(widths[0]))
        self.blocks = []
        c_in = widths[0]
        for si, c_out in enumerate(widths):
            for bi in range(config.blocks_per_stage):
                stride = 2 if (si > 0 and bi == 0) else 1
                self.blocks.append(_ResBlock(c_in, c_out, stride, rng))
                c_in = c_out
        k = config.pre_linear_units
        self.emb_w = ad.parameter(_he_uniform(rng, (c_in, k), c_in))
        self.emb_b = ad.parameter(np.zeros(k))
        self.out_w = ad.parameter(_he_uniform(rng, (k, 1), k))
        self.out_b = ad.parameter(np.zeros(1))

    def parameters(self):
        out = {"stem.w": self.stem_w, "stem.b": self.stem_b}
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters().items():
                out[f"block{i}.{name}"] = p
        out.update({"emb.w": self.emb_w, "emb.b": self.emb_b,
                    "out.w": self.out_w, "out.b": self.out_b})
        return out

    def forward(self, x):
        """x: (B, 3, S, S) tensor in [0, 1]; returns (embedding (B, k),
        standardized prediction (B,))."""
        h = ad.conv2d(x, self.stem_w, self.stem_b, stride=1, padding=1)
        for block in self.blocks:
            h = block.forward(h)
        h = ad.relu(h)
        pooled = ad.reduce_mean(h, axis=(2, 3))               # (B, C)
        emb = ad.tanh(ad.affine(ad.matmul(pooled, self.emb_w),
                                shift=self.emb_b))            # (B, k)
        pred = ad.affine(ad.matmul(emb, self.out_w), shift=self.out_b)
        return emb, ad.reshape(pred, (pred.shape[0],))


@dataclass
class EmbeddingPoint:
    image_id: str
    row: int
    col: int
    embedding: np.ndarray
    pred_ll: float
    teacher_ll: float


@dataclass
class ExtractorHistory:
    val_mse: list = field(default_factory=list)
    best_eval: int = -1


@dataclass
class TrainedExtractor:
    model: ExtractorModel
    config: ExtractorConfig
    teacher_mean: float
    teacher_std: float
    flow_crop_size: int
    history: ExtractorHistory

    @property
    def crop_size(self):
        return self.config.crop_size

    def prepare(self, crops):
        """Raw crop array (M, S, S, 3) or flat (M, S*S*3) to the network's
        (M, 3, S, S) float layout."""
        s = self.config.crop_size
        crops = np.asarray(crops, dtype=np.float64)
        if crops.ndim == 2:
            if crops.shape[1] != s * s * 3:
                raise ShapeMismatchError("prepare", crops.shape, (s * s * 3,))
            crops = crops.reshape(-1, s, s, 3)
        if crops.shape[1:] != (s, s, 3):
            raise ShapeMismatchError("prepare", crops.shape, (s, s, 3))
        return center_crops(crops).transpose(0, 3, 1, 2)


def teacher_loglik(flow, crops):
    """Mean flow log-likelihood over the non-overlapping tiling of each
    crop by the flow's window; extractor crop size must be a multiple of
    the flow crop size."""
    w = flow.crop_size
    crops = np.asarray(crops, dtype=np.float64)
    n, s = crops.shape[0], crops.shape[1]
    if crops.ndim != 4 or s % w != 0:
        raise ValueError(
            f"crops {crops.shape} must be (n, S, S, 3) with S a multiple of "
            f"the flow crop {w}")
    t = s // w
    total = np.zeros(n)
    for u in range(t):
        for v in range(t):
            tile = crops[:, u * w : (u + 1) * w, v * w : (v + 1) * w, :]
            total += flow.score_crops(tile.reshape(n, -1))
    return total / (t * t)


def _mse_t(model, x, target):
    _, pred = model.forward(ad.Tensor(x))
    diff = ad.sub(pred, ad.constant(target))
    return ad.reduce_mean(ad.mul(diff, diff))


def _eval_mse(model, x, target, chunk=256):
    total, n = 0.0, 0
    for lo in range(0, len(x), chunk):
        _, pred = model.forward(ad.Tensor(x[lo : lo + chunk]))
        total += float(np.sum((pred.data - target[lo : lo + chunk]) ** 2))
        n += len(pred.data)
    return total / n


def train_extractor(images, flow, cfg, teacher_override=None):
    """Fit the regressor on random crops against the flow's LL signal.

    ``teacher_override`` replaces the teacher values (same order as the
    drawn pools) and exists for calibration tests.
    """
    cfg.validate()
    if cfg.crop_size % flow.crop_size != 0:
        raise ValueError(
            f"extractor crop {cfg.crop_size} must be a multiple of the "
            f"flow crop {flow.crop_size}")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(images))
    n_val = max(1, int(round(cfg.val_fraction * len(images))))
    if n_val >= len(images):
        raise ValueError("val_fraction leaves no training images")
    val_images = [images[i] for i in perm[:n_val]]
    train_images = [images[i] for i in perm[n_val:]]

    s = cfg.crop_size
    train_raw = sample_crops(train_images, s, cfg.train_pool, rng)
    val_raw = sample_crops(val_images, s, cfg.val_pool, rng)
    train_raw = train_raw.reshape(-1, s, s, 3)
    val_raw = val_raw.reshape(-1, s, s, 3)

    if teacher_override is not None:
        teach_train = np.asarray(teacher_override[: len(train_raw)], dtype=np.float64)
        teach_val = np.asarray(teacher_override[len(train_raw):], dtype=np.float64)
        if len(teach_val) != len(val_raw):
            raise ValueError("teacher_override must cover train and val pools")
    else:
        teach_train = teacher_loglik(flow, train_raw)
        teach_val = teacher_loglik(flow, val_raw)

    mean = float(np.mean(teach_train))
    std = float(np.std(teach_train))
    if std < 1e-12:
        std = 1.0
    y_train = (teach_train - mean) / std
    y_val = (teach_val - mean) / std

    model = ExtractorModel(cfg, rng)
    x_train = center_crops(train_raw).transpose(0, 3, 1, 2)
    x_val = center_crops(val_raw).transpose(0, 3, 1, 2)

    params = model.parameters()
    opt = Adam(params.values(), lr=cfg.learning_rate)
    history = ExtractorHistory()
    best = float("inf")
    best_params = {k: p.data.copy() for k, p in params.items()}
    since_best = 0
    order = rng.permutation(len(x_train))
    cursor = 0
    bad_since_eval = 0
    for step in range(1, cfg.max_steps + 1):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(x_train))
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        ad.zero_grad(params.values())
        try:
            with ad.Tape() as tape:
                loss = _mse_t(model, x_train[idx], y_train[idx])
            ad.backward(tape, loss)
            if not opt.step():
                bad_since_eval += 1
        except NonFiniteError:
            bad_since_eval += 1

        if step % cfg.eval_interval == 0 or step == cfg.max_steps:
            if bad_since_eval >= cfg.eval_interval:
                raise DivergenceError(
                    f"loss non-finite for the whole window ending at step {step}")
            bad_since_eval = 0
            val_mse = _eval_mse(model, x_val, y_val)
            history.val_mse.append(val_mse)
            if val_mse < best:
                best = val_mse
                best_params = {k: p.data.copy() for k, p in params.items()}
                history.best_eval = len(history.val_mse) - 1
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    for k, p in params.items():
        p.data[...] = best_params[k]
    return TrainedExtractor(model=model, config=cfg, teacher_mean=mean,
                            teacher_std=std, flow_crop_size=flow.crop_size,
                            history=history)


def embed(trained, crops, provenance=None, teacher=None):
    """Embed crops one at a time; returns EmbeddingPoint rows.

    ``provenance`` is an optional list of (image_id, row, col);
    ``teacher`` optional matching teacher LL values (NaN when absent).
    """
    x = trained.prepare(crops)
    n = len(x)
    points = []
    for i in range(n):
        emb_t, pred_t = trained.model.forward(ad.Tensor(x[i : i + 1]))
        pred = float(pred_t.data[0]) * trained.teacher_std + trained.teacher_mean
        image_id, row, col = (provenance[i] if provenance is not None
                              else ("crop", i, 0))
        t_ll = float(teacher[i]) if teacher is not None else float("nan")
        points.append(EmbeddingPoint(image_id=str(image_id), row=int(row),
                                     col=int(col),
                                     embedding=emb_t.data[0].copy(),
                                     pred_ll=pred, teacher_ll=t_ll))
    return points


def export_scatter(points, out_path, plot_path=None):
    """CSV of embeddings and LL values, sorted by (image_id, row, col);
    optionally also a static scatter image when matplotlib is present."""
    if not points:
        raise ValueError("no embedding points to export")
    k = len(points[0].embedding)
    header = ["image_id", "row", "col"] + [f"e{i + 1}" for i in range(k)] + \
        ["pred_ll", "teacher_ll"]
    rows = sorted(points, key=lambda p: (p.image_id, p.row, p.col))
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for p in rows:
            cells = [p.image_id, str(p.row), str(p.col)]
            cells += [repr(float(v)) for v in p.embedding]
            cells += [repr(float(p.pred_ll)), repr(float(p.teacher_ll))]
            fh.write(",".join(cells) + "\n")
    if plot_path is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        emb = np.stack([p.embedding for p in rows])
        color = np.array([p.pred_ll for p in rows])
        fig = plt.figure(figsize=(7, 6))
        axis = fig.add_subplot(projection="3d") if emb.shape[1] >= 3 else fig.add_subplot()
        if emb.shape[1] >= 3:
            sc = axis.scatter(emb[:, 0], emb[:, 1], emb[:, 2], c=color,
                              cmap="coolwarm", s=8)
        else:
            sc = axis.scatter(emb[:, 0], emb[:, 1] if emb.shape[1] > 1 else color,
                              c=color, cmap="coolwarm", s=8)
        fig.colorbar(sc, label="predicted log-likelihood")
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
    return out_path


# ---------------------------------------------------------------------------
# persistence (same container format as flow checkpoints)


def save_extractor_checkpoint(path, trained):
    cfg = trained.config
    config = {
        "model.kind": "extractor",
        "extractor.crop_size": cfg.crop_size,
        "extractor.stage_widths": ",".join(str(wd) for wd in cfg.stage_widths),
        "extractor.blocks_per_stage": cfg.blocks_per_stage,
        "extractor.pre_linear_units": cfg.pre_linear_units,
        "extractor.learning_rate": repr(cfg.learning_rate),
        "extractor.batch_size": cfg.batch_size,
        "extractor.max_steps": cfg.max_steps,
        "extractor.eval_interval": cfg.eval_interval,
        "extractor.patience": cfg.patience,
        "extractor.seed": cfg.seed,
        "extractor.train_pool": cfg.train_pool,
        "extractor.val_pool": cfg.val_pool,
        "extractor.val_fraction": repr(cfg.val_fraction),
        "teacher.mean": repr(trained.teacher_mean),
        "teacher.std": repr(trained.teacher_std),
        "teacher.flow_crop_size": trained.flow_crop_size,
        "history.best_eval": trained.history.best_eval,
    }
    arrays = {f"param.{k}": p.data for k, p in trained.model.parameters().items()}
    arrays["history.val_mse"] = np.asarray(trained.history.val_mse)
    write_container(path, config, arrays)


def load_extractor_checkpoint(path):
    config, arrays = read_container(path)
    if config.get("model.kind") != "extractor":
        raise CorruptCheckpointError(
            f"expected an extractor checkpoint, found kind "
            f"'{config.get('model.kind', '?')}'")
    cfg = ExtractorConfig(
        crop_size=int(config["extractor.crop_size"]),
        stage_widths=tuple(int(v) for v in
                           config["extractor.stage_widths"].split(",")),
        blocks_per_stage=int(config["extractor.blocks_per_stage"]),
        pre_linear_units=int(config["extractor.pre_linear_units"]),
        learning_rate=float(config["extractor.learning_rate"]),
        batch_size=int(config["extractor.batch_size"]),
        max_steps=int(config["extractor.max_steps"]),
        eval_interval=int(config["extractor.eval_interval"]),
        patience=int(config["extractor.patience"]),
        seed=int(config["extractor.seed"]),
        train_pool=int(config["extractor.train_pool"]),
        val_pool=int(config["extractor.val_pool"]),
        val_fraction=float(config["extractor.val_fraction"]),
    )
    model = ExtractorModel(cfg, np.random.default_rng(0))
    for name, p in model.parameters().items():
        key = f"param.{name}"
        if key not in arrays:
            raise CorruptCheckpointError(f"missing parameter array '{key}'")
        p.data[...] = arrays[key]
    history = ExtractorHistory(
        val_mse=list(arrays.get("history.val_mse", np.empty(0))),
        best_eval=int(config.get("history.best_eval", -1)),
    )
    return TrainedExtractor(
        model=model, config=cfg,
        teacher_mean=float(config["teacher.mean"]),
        teacher_std=float(config["teacher.std"]),
        flow_crop_size=int(config["teacher.flow_crop_size"]),
        history=history,
    )
