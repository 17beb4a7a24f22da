"""Classifier assembly, training and evaluation.

Pipeline per clip: normalize and append frame time -> temporal interaction
sampling -> layer norm -> prompt network -> selection-scan permutation ->
ST-SSM blocks (bi-directional selective scan and structure aggregation, both
pre-norm residual) -> layer norm -> max-pool -> batch norm -> MLP head.

The pooled vector is batch-normalized (batch statistics while training, stored
statistics otherwise).  Clip-to-clip differences in the pooled features are a
small fraction of their common level, and plain momentum SGD barely moves the
head without this rescaling.  Those features also drift by several of their
own standard deviations within an epoch, so a momentum average lags badly;
training therefore re-estimates the statistics on a fixed slice of the
training set after every epoch.

The time feature lets max-pooled features separate where a part is early in
the clip from where it is late, which is most of what distinguishes the motion
classes.  None of the classes depend on heading about z, and with a couple of
hundred training clips the model otherwise memorizes headings; training clips
are therefore turned by a fresh random z rotation each time they are drawn.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import normalize
from .nn import SGD, MlpSpec, cross_entropy, derive_seed, init_mlp, mlp_forward
from .sampling import TisPlan, TisWeights, make_tis_plan, point_feats, tis_forward
from .serialization import PromptNetParams, prompt_forward, stss_order
from .ssm import SsmParams, bi_ssm
from .stsa import StsaParams, neighbors_for, received_weight, stsa_aggregate
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    n_blocks: int = 1
    k_prompts: int = 8
    k_knn: int = 8
    d_state: int = 8
    hilbert_bits: int = 10
    prompt_soft_gate: bool = True
    seed: int = 0
    n_classes: int = 4
    frames: int = 16
    n_spatial: int = 64
    k_group: int = 16
    in_channels: int = 3
    time_feature: bool = True  # append the frame's time in [-1, 1] to every point
    d_t: int = 4
    tis: bool = True
    load_balance: float = 0.01
    norm_momentum: float = 0.1
    scan_chunk: int = 0  # 0 runs the sequential scan

    def __post_init__(self):
        for f in ("channels", "n_blocks", "k_prompts", "k_knn", "d_state", "hilbert_bits",
                  "n_classes", "frames", "n_spatial", "k_group", "in_channels", "d_t"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")

    @property
    def sampled_frames(self) -> int:
        return self.frames // 2

    @property
    def seq_len(self) -> int:
        return self.sampled_frames * self.n_spatial


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.01
    decay_factor: float = 0.1
    decay_epochs: tuple = (20, 30)
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    val_fraction: float = 0.25
    calibration_clips: int = 64
    augment: bool = True  # random rotation about z, half of them mirrored, per training clip

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay epochs must be sorted")
        if self.batch_size < 1 or self.epochs < 0 or self.calibration_clips < 0:
            raise ValueError("bad batch size / epochs")

    def lr_at(self, epoch: int) -> float:
        n = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr * self.decay_factor ** n


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class Block:
    fwd: SsmParams
    bwd: SsmParams
    stsa: StsaParams

    def named(self, prefix: str) -> dict:
        out = {}
        for tag, p in (("fwd", self.fwd), ("bwd", self.bwd)):
            for name in ("W_delta", "b_delta", "W_B", "W_C", "A_log", "D"):
                out[f"{prefix}.ssm_{tag}.{name}"] = getattr(p, name)
        for i, t in enumerate(self.stsa.mlp):
            out[f"{prefix}.stsa.mlp.{i}"] = t
        out[f"{prefix}.stsa.embedding"] = self.stsa.embedding
        return out


@dataclass
class Prepared:
    """Normalized clip plus its coordinate-only sampling plan."""

    plan: TisPlan
    feats: np.ndarray
    label: int | None
    coord_feats: bool = False  # feats[..., :3] are the coordinates themselves


def rotate_prepared(p: Prepared, R: np.ndarray) -> Prepared:
    """The clip with every point mapped by the orthogonal ``R``.

    Sampling and grouping depend only on distances, so the plan's indices are
    reused and only its offsets and coordinates turn.
    """
    plan = p.plan
    turned = {"anchor_coords": plan.anchor_coords @ R.T, "s1_rel": plan.s1_rel @ R.T}
    if plan.s2_rel is not None:
        turned["s2_rel"] = plan.s2_rel @ R.T
    feats = p.feats
    if p.coord_feats:
        feats = feats.copy()
        feats[..., :3] = feats[..., :3] @ R.T
    return dataclasses.replace(p, plan=dataclasses.replace(plan, **turned), feats=feats)


def random_z_rotation(rng) -> np.ndarray:
    """Uniform rotation about the z axis, composed with an x mirror half of the time."""
    a = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(a), np.sin(a)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if rng.random() < 0.5:
        R[:, 0] = -R[:, 0]
    return R


class UstSsm:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        s = cfg.seed
        c = cfg.channels
        self.tis = TisWeights.init(cfg.in_channels + int(cfg.time_feature), c, derive_seed(s, 1))
        self.prompt = PromptNetParams.init(c, cfg.k_prompts, derive_seed(s, 2), hidden=c)
        self.blocks = []
        for b in range(cfg.n_blocks):
            bs = derive_seed(s, 10 + b)
            self.blocks.append(Block(
                SsmParams.init(c, cfg.d_state, derive_seed(bs, 1)),
                SsmParams.init(c, cfg.d_state, derive_seed(bs, 2)),
                StsaParams.init(c, cfg.sampled_frames, cfg.d_t, derive_seed(bs, 3)),
            ))
        self.norm_gamma = Tensor(np.ones(c), requires_grad=True)
        self.norm_beta = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.head_spec = MlpSpec((c, c, cfg.n_classes), ("relu", "none"), derive_seed(s, 3))
        self.head = init_mlp(self.head_spec)

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> dict:
        out = {}
        for i, t in enumerate(self.tis.params1):
            out[f"tis.stage1.{i}"] = t
        for i, t in enumerate(self.tis.params2):
            out[f"tis.stage2.{i}"] = t
        out["prompt.tnet"] = self.prompt.tnet
        for i, t in enumerate(self.prompt.local_params):
            out[f"prompt.local.{i}"] = t
        for i, t in enumerate(self.prompt.head_params):
            out[f"prompt.head.{i}"] = t
        for b, blk in enumerate(self.blocks):
            out.update(blk.named(f"block{b}"))
        out["pool_norm.gamma"] = self.norm_gamma
        out["pool_norm.beta"] = self.norm_beta
        for i, t in enumerate(self.head):
            out[f"head.{i}"] = t
        return out

    def named_buffers(self) -> dict:
        """Non-trainable state saved alongside the parameters."""
        return {"pool_norm.running_mean": self.running_mean, "pool_norm.running_var": self.running_var}

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict:
        out = {k: v.data.copy() for k, v in self.named_parameters().items()}
        out.update({k: v.copy() for k, v in self.named_buffers().items()})
        return out

    def load_state_dict(self, state: dict):
        named = {k: t.data for k, t in self.named_parameters().items()}
        named.update(self.named_buffers())
        if set(named) != set(state):
            missing = sorted(set(named) ^ set(state))
            raise ValueError(f"checkpoint tensors do not match the model: {missing[:5]}")
        for k, arr in named.items():
            if arr.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {arr.shape}")
            arr[...] = state[k]

    # ------------------------------------------------------------ forward

    def prepare(self, video) -> Prepared:
        cfg = self.cfg
        if video.T < 2:
            raise ValueError("classification needs T >= 2")
        if video.T // 2 != cfg.sampled_frames:
            raise ValueError(f"clip has {video.T} frames, model expects {cfg.frames}")
        v = normalize(video)
        feats = point_feats(v)
        if feats.shape[-1] != cfg.in_channels:
            raise ValueError(f"clip has {feats.shape[-1]} input channels, model expects {cfg.in_channels}")
        if cfg.time_feature:
            t = np.broadcast_to(np.linspace(-1.0, 1.0, v.T)[:, None, None], (v.T, v.N, 1))
            feats = np.concatenate([feats, t], axis=-1)
        plan = make_tis_plan(v.coords, cfg.n_spatial, cfg.k_group, cfg.tis)
        return Prepared(plan, feats, video.label, coord_feats=v.feats is None)

    def forward(self, batch, trace: bool = False, training: bool = False, _pooled_out=None) -> tuple:
        """Logits ``B x n_classes`` and an info dict (aux loss, permutations, ...).

        ``training`` normalizes the pooled features with batch statistics and
        updates the running statistics.
        """
        cfg = self.cfg
        plans = [p.plan for p in batch]
        feats = tis_forward(plans, [p.feats for p in batch], self.tis)
        B, Tp, n_s, C = feats.shape
        L = Tp * n_s
        x = T.layer_norm(T.reshape(feats, (B, L, C)))
        coords = np.stack([p.anchor_coords[p.out_frames].reshape(L, 3) for p in plans])
        frame_of = np.repeat(np.arange(Tp), n_s)

        pm = prompt_forward(coords, x, self.prompt)
        assignment = pm.assignment
        perms = np.stack([stss_order(coords[b], frame_of, assignment[b], cfg.hilbert_bits)
                          for b in range(B)])
        aux = None
        if cfg.prompt_soft_gate:
            onehot = np.zeros(pm.probs.shape)
            np.put_along_axis(onehot, assignment[..., None], 1.0, axis=-1)
            gate = T.sum_(T.mul(pm.probs, onehot), axis=-1, keepdims=True)
            x = T.mul(x, gate)
            if cfg.load_balance > 0 and cfg.k_prompts > 1:
                mean_p = T.mean(pm.probs, axis=1)
                kl = T.sum_(T.mul(mean_p, T.log(T.mul(mean_p, float(cfg.k_prompts)))), axis=-1)
                aux = T.mul(T.mean(kl), cfg.load_balance)

        gperm = (perms + (np.arange(B) * L)[:, None]).reshape(-1)
        x = T.reshape(T.permute(T.reshape(x, (B * L, C)), gperm), (B, L, C))
        s_coords = np.take_along_axis(coords, perms[..., None], axis=1)
        s_frame = frame_of[perms]

        chunk = cfg.scan_chunk if cfg.scan_chunk > 0 else None
        info = {"perms": perms, "assignment": assignment, "aux_loss": aux,
                "coords": s_coords, "frame_of": s_frame}
        for blk in self.blocks:
            x = st_ssm_block(x, s_coords, s_frame, blk, cfg.k_knn, chunk, info if trace else None)
        pooled = T.max_(T.layer_norm(x), axis=1)
        if _pooled_out is not None:
            _pooled_out.append(pooled.data.copy())
        pooled = self._pool_norm(pooled, training)
        logits = mlp_forward(pooled, self.head_spec, self.head)
        return logits, info

    def calibrate(self, prepared, batch_size: int = 16):
        """Set the stored pooled-feature statistics from ``prepared`` clips under the current weights."""
        feats = []
        with no_grad():
            for s in range(0, len(prepared), batch_size):
                self.forward(prepared[s:s + batch_size], _pooled_out=feats)
        pooled = np.concatenate(feats)
        self.running_mean[:] = pooled.mean(axis=0)
        self.running_var[:] = pooled.var(axis=0)

    def _pool_norm(self, pooled: Tensor, training: bool, eps: float = 1e-5) -> Tensor:
        if training:
            m = self.cfg.norm_momentum
            self.running_mean *= 1 - m
            self.running_mean += m * pooled.data.mean(axis=0)
            self.running_var *= 1 - m
            self.running_var += m * pooled.data.var(axis=0)
            normed = T.layer_norm(pooled, eps, axis=0)
        else:
            normed = T.mul(T.sub(pooled, self.running_mean), 1.0 / np.sqrt(self.running_var + eps))
        return T.add(T.mul(normed, self.norm_gamma), self.norm_beta)

    def logits(self, videos) -> np.ndarray:
        with no_grad():
            out, _ = self.forward([self.prepare(v) for v in videos])
        return out.data


def st_ssm_block(x: Tensor, coords: np.ndarray, frame_of: np.ndarray, blk: Block,
                 k: int, chunk: int | None = None, trace: dict | None = None) -> Tensor:
    """``x + biSSM(LN x)`` followed by ``x + STSA(LN x)``; shape ``B x L x C`` is preserved."""
    x = T.add(x, bi_ssm(T.layer_norm(x), blk.fwd, blk.bwd, chunk))
    nbr = neighbors_for(coords, frame_of, blk.stsa.embedding.data, k)
    if trace is not None:
        upd, w = stsa_aggregate(T.layer_norm(x), nbr, blk.stsa, return_weights=True)
        trace.setdefault("stsa_weight", []).append(received_weight(nbr, w, nbr.shape[0] * nbr.shape[1]))
    else:
        upd = stsa_aggregate(T.layer_norm(x), nbr, blk.stsa)
    return T.add(x, upd)


def forward_classify(video, model: UstSsm) -> np.ndarray:
    """Class logits for one clip."""
    return model.logits([video])[0]


def batch_loss(model: UstSsm, batch, training: bool = True) -> tuple:
    logits, info = model.forward(batch, training=training)
    labels = np.array([p.label for p in batch])
    loss = cross_entropy(logits, labels)
    if info["aux_loss"] is not None:
        loss = T.add(loss, info["aux_loss"])
    return loss, logits


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: UstSsm
    log: list = field(default_factory=list)
    best_val_acc: float = 0.0
    best_epoch: int = -1

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["train_acc"]),
                    repr(r["val_acc"])])
    return buf.getvalue()


def _accuracy(model: UstSsm, prepared, batch_size: int) -> float:
    if not prepared:
        return float("nan")
    correct = 0
    with no_grad():
        for s in range(0, len(prepared), batch_size):
            chunk = prepared[s:s + batch_size]
            logits, _ = model.forward(chunk)
            correct += int(np.sum(np.argmax(logits.data, 1) == [p.label for p in chunk]))
    return correct / len(prepared)


def train(train_set, model_cfg: ModelConfig, train_cfg: TrainConfig, val_set=None,
          epoch_callback=None) -> TrainResult:
    """Mini-batch momentum SGD with a step schedule; keeps the best held-out weights.

    With ``augment`` each training clip is turned by a fresh random rotation
    about z (mirrored half of the time) every time it is drawn.

    Without ``val_set`` a stratified split of ``train_set`` is held out.
    """
    from .data import split_dataset

    if not train_set:
        raise ValueError("empty training set")
    if any(v.label is None for v in train_set):
        raise ValueError("training clips need labels")
    if val_set is None:
        train_set, val_set = split_dataset(train_set, train_cfg.val_fraction, train_cfg.seed)
    labels = [v.label for v in list(train_set) + list(val_set)]
    if max(labels) >= model_cfg.n_classes:
        raise ValueError("label exceeds the configured class count")

    model = UstSsm(model_cfg)
    tr = [model.prepare(v) for v in train_set]
    va = [model.prepare(v) for v in val_set]
    opt = SGD(model.parameters(), train_cfg.lr, train_cfg.momentum)
    rng = np.random.default_rng(derive_seed(train_cfg.seed, 99))
    calib = [tr[i] for i in np.sort(rng.permutation(len(tr))[:train_cfg.calibration_clips])]
    aug_rng = np.random.default_rng(derive_seed(train_cfg.seed, 98))
    result = TrainResult(model)
    best_state = model.state_dict()
    best = -1.0
    for epoch in range(train_cfg.epochs):
        opt.lr = train_cfg.lr_at(epoch)
        order = rng.permutation(len(tr))
        total, correct, seen = 0.0, 0, 0
        for step, s in enumerate(range(0, len(order), train_cfg.batch_size)):
            batch = [tr[i] for i in order[s:s + train_cfg.batch_size]]
            if train_cfg.augment:
                batch = [rotate_prepared(p, random_z_rotation(aug_rng)) for p in batch]
            opt.zero_grad()
            loss, logits = batch_loss(model, batch)
            lv = loss.data.item()
            if not np.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            opt.step()
            total += lv * len(batch)
            correct += int(np.sum(np.argmax(logits.data, 1) == [p.label for p in batch]))
            seen += len(batch)
        if calib:
            model.calibrate(calib)
        val_acc = _accuracy(model, va, max(train_cfg.batch_size, 16))
        row = {"epoch": epoch, "lr": opt.lr, "train_loss": total / max(seen, 1),
               "train_acc": correct / max(seen, 1), "val_acc": val_acc}
        result.log.append(row)
        log.info("epoch %d lr %.4g loss %.4f train %.3f val %.3f", epoch, opt.lr,
                 row["train_loss"], row["train_acc"], val_acc)
        if epoch_callback is not None:
            epoch_callback(row)
        if val_acc > best:
            best = val_acc
            best_state = model.state_dict()
            result.best_epoch = epoch
    model.load_state_dict(best_state)
    result.best_val_acc = max(best, 0.0)
    return result


@dataclass
class Metrics:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_class": self.per_class.tolist(),
                "confusion": self.confusion.tolist()}


def metrics_from_predictions(labels, preds, n_classes: int) -> Metrics:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    support = conf.sum(axis=1)
    per_class = np.where(support > 0, np.diag(conf) / np.maximum(support, 1), np.nan)
    return Metrics(float(np.trace(conf) / conf.sum()), per_class, conf)


def evaluate(dataset, model: UstSsm, batch_size: int = 16) -> Metrics:
    """Top-1 accuracy, per-class accuracy and confusion matrix; parameters are not touched."""
    if not dataset:
        raise ValueError("empty dataset")
    n_cls = model.cfg.n_classes
    labels = [v.label for v in dataset]
    if any(lab is None or not 0 <= lab < n_cls for lab in labels):
        raise ValueError(f"dataset labels do not fit a {n_cls}-class model")
    preds = []
    for s in range(0, len(dataset), batch_size):
        preds.extend(np.argmax(model.logits(dataset[s:s + batch_size]), axis=1))
    return metrics_from_predictions(labels, preds, n_cls)


# ---------------------------------------------------------------- checkpoints

def save_model(path, model: UstSsm, extra: dict | None = None):
    meta = {"format": "USTC", "model_config": dataclasses.asdict(model.cfg),
            "seed": model.cfg.seed, "param_count": model.n_params(),
            "buffers": sorted(model.named_buffers())}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> UstSsm:
    tensors, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    model = UstSsm(cfg)
    model.load_state_dict(tensors)
    return model


def checkpoint_param_count(path) -> int:
    """Trainable entries stored in a checkpoint (running statistics excluded)."""
    tensors, meta = load_checkpoint(path)
    skip = set(meta.get("buffers", ()))
    return int(sum(int(np.prod(t.shape)) for k, t in tensors.items() if k not in skip))
