"""Ordinal loss, SGD with momentum, polynomial LR decay, checkpoints and the training loop."""

import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .discretization import SidBins
from .model import ModelConfig, RVMDE, no_decay_names

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
CKPT_MAGIC = b"RVCK"
CKPT_VERSION = 1

# flipped by the mutation test that proves the gradient checks can fail
_GRAD_SIGN = 1.0


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------- loss

def _ordinal_weights(labels, mask, dtype):
    """Per-pixel weights realizing mean over valid pixels, then mean over samples."""
    m = mask.to(dtype)
    per_sample = m.flatten(1).sum(1)
    has = per_sample > 0
    n_samples = int(has.sum())
    if n_samples == 0:
        raise TrainingError("empty supervision: no valid ground-truth pixels in batch")
    scale = torch.where(has, 1.0 / (per_sample.clamp(min=1) * n_samples), torch.zeros_like(per_sample))
    return m * scale.view(-1, 1, 1)


class _OrdinalLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, labels, mask):
        b, c, h, w = logits.shape
        K = c // 2
        s = logits[:, 1::2] - logits[:, 0::2]
        p = torch.sigmoid(s)
        q = torch.sigmoid(-s)
        k = torch.arange(K, device=logits.device).view(1, K, 1, 1)
        y = (k < labels.unsqueeze(1)).to(logits.dtype)
        nll = -(y * torch.log(p.clamp(min=LOG_CLAMP)) + (1 - y) * torch.log(q.clamp(min=LOG_CLAMP)))
        wts = _ordinal_weights(labels, mask, logits.dtype)
        ctx.save_for_backward(p, q, y, wts)
        return (nll.sum(1) * wts).sum()

    @staticmethod
    def backward(ctx, grad_out):
        p, q, y, wts = ctx.saved_tensors
        # d/ds -log p = -q ; d/ds -log q = p ; zero where the clamp is active
        ds = y * -q * (p > LOG_CLAMP) + (1 - y) * p * (q > LOG_CLAMP)
        ds = ds * wts.unsqueeze(1) * grad_out * _GRAD_SIGN
        g = torch.empty(ds.shape[0], 2 * ds.shape[1], *ds.shape[2:], dtype=ds.dtype, device=ds.device)
        g[:, 1::2] = ds
        g[:, 0::2] = -ds
        return g, None, None


def ordinal_loss(logits, labels, mask):
    """Ordinal negative log-likelihood of (B, 2K, H, W) pair logits.

    For label l the per-pixel loss is -sum_{k<l} log P_k - sum_{k>=l} log(1 - P_k),
    averaged over valid pixels of each sample and then over the batch.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if labels.dim() == 2:
        labels, mask = labels[None], mask[None]
    return _OrdinalLoss.apply(logits, labels, mask)


def ordinal_loss_from_probs(probs, labels, mask):
    """Same loss computed from probabilities P_k, (B, K, H, W); plain autograd."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if probs.dim() == 3:
        probs, labels, mask = probs[None], labels[None], mask[None]
    K = probs.shape[1]
    k = torch.arange(K).view(1, K, 1, 1)
    y = (k < labels.unsqueeze(1)).to(probs.dtype)
    nll = -(y * torch.log(probs.clamp(min=LOG_CLAMP)) + (1 - y) * torch.log((1 - probs).clamp(min=LOG_CLAMP)))
    return (nll.sum(1) * _ordinal_weights(labels, mask, probs.dtype)).sum()


# ---------------------------------------------------------------- optimizer

def poly_lr(it, max_iter, lr0=0.001, power=0.9):
    """lr0 * (1 - it / max_iter) ** power; 0 past the end of the schedule."""
    if it > max_iter:
        warnings.warn(f"iteration {it} beyond max_iter {max_iter}; learning rate clamped to 0")
        return 0.0
    if it < 0:
        raise ValueError(f"iteration must be >= 0, got {it}")
    return lr0 * (1.0 - it / max_iter) ** power


def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=0.0, no_decay=()):
    """Classic momentum SGD, in place.

    g' = g + wd * p ; v <- momentum * v + g' ; p <- p - lr * v
    Names in ``no_decay`` skip the weight-decay term.
    """
    if set(params) != set(grads):
        raise TrainingError("parameter and gradient name sets differ")
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise TrainingError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            if weight_decay and name not in no_decay:
                g = g + weight_decay * p
            v = state.get(name)
            if v is None:
                v = torch.zeros_like(p)
                state[name] = v
            v.mul_(momentum).add_(g)
            p.sub_(lr * v)
    return params, state


# ------------------------------------------------------------- grad check

def grad_check(op, inputs, eps=1e-5, wrt=None, seed=0):
    """Largest relative difference between autograd and central-difference gradients.

    ``op(*inputs)`` may return any tensor; non-scalar outputs are reduced with
    a fixed random projection. ``wrt`` defaults to the inputs; it may also list
    module parameters. Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    inputs = list(inputs)
    targets = inputs if wrt is None else list(wrt)
    for t in targets:
        if t.dtype != torch.float64:
            raise TrainingError("grad_check needs float64 tensors")
        t.requires_grad_(True)

    out = op(*inputs)
    proj = None
    if out.dim() > 0:
        gen = torch.Generator().manual_seed(seed)
        proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(o):
        return o if proj is None else (o * proj).sum()

    analytic = torch.autograd.grad(scalar(out), targets, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, a in zip(targets, analytic):
            a = torch.zeros_like(t) if a is None else a
            if not torch.isfinite(a).all():
                raise TrainingError("non-finite analytic gradient")
            flat = t.view(-1)
            af = a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = scalar(op(*inputs)).item()
                flat[i] = orig - eps
                fm = scalar(op(*inputs)).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = af[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


# ------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    model_config: ModelConfig
    bins: SidBins
    params: dict
    buffers: dict
    momentum: dict
    iteration: int = 0
    train_config: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # caller metadata, e.g. preprocessing
    version: int = CKPT_VERSION

    def build(self, dtype=torch.float32):
        """Instantiate the model with the stored weights."""
        model = RVMDE(self.model_config, self.bins).to(dtype)
        state = {}
        for name, arr in {**self.params, **self.buffers}.items():
            state[name] = torch.from_numpy(np.array(arr))
        ref = model.state_dict()
        for name, t in state.items():
            state[name] = t.to(ref[name].dtype)
        model.load_state_dict(state, strict=True)
        return model


def _pack_entry(name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, model, momentum=None, iteration=0, train_config=None, rng=None, history=None,
                    extra=None):
    """Write an ``RVCK`` checkpoint. Parameters and buffers are stored as float32."""
    entries = []
    for name, p in model.named_parameters():
        entries.append(_pack_entry("param/" + name, p.detach().cpu().numpy()))
    for name, b in model.named_buffers():
        entries.append(_pack_entry("buffer/" + name, b.detach().cpu().numpy().astype(np.float32)))
    for name, v in sorted((momentum or {}).items()):
        entries.append(_pack_entry("momentum/" + name, v.detach().cpu().numpy()))
    meta = {
        "model": model.cfg.to_dict(),
        "bins": model.bins.to_dict(),
        "train": train_config or {},
        "iteration": int(iteration),
        "rng": rng or {},
        "history": history or {},
        "extra": extra or {},
        "n_entries": len(entries),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
        for e in entries:
            fh.write(e)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()

    def need(off, n):
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint (needed {off + n} bytes, have {len(data)})")

    need(0, 12)
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, not an RVCK checkpoint")
    version, jlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    need(12, jlen)
    try:
        meta = json.loads(data[12:12 + jlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from None
    off = 12 + jlen
    groups = {"param": {}, "buffer": {}, "momentum": {}}
    for _ in range(meta["n_entries"]):
        need(off, 4)
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        need(off, nlen + 4)
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        need(off, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(off, 4 * count)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
        off += 4 * count
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise CheckpointError(f"{path}: unknown entry kind in {name!r}")
        groups[kind][key] = arr
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes after last entry")
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model"]),
        bins=SidBins.from_dict(meta["bins"]),
        params=groups["param"],
        buffers=groups["buffer"],
        momentum=groups["momentum"],
        iteration=meta["iteration"],
        train_config=meta["train"],
        rng=meta["rng"],
        history=meta["history"],
        extra=meta.get("extra", {}),
        version=version,
    )


# ----------------------------------------------------------------- fitting

@dataclass
class TrainConfig:
    lr0: float = 0.001
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 2
    epochs: int = 40
    max_iters: int = 0  # > 0 overrides epochs
    step_decay: bool = False  # extra lr x0.1 every 10 epochs
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self):
        if not self.lr0 >= 0:
            raise TrainingError(f"lr0 must be >= 0, got {self.lr0}")
        if not self.poly_power > 0:
            raise TrainingError(f"poly_power must be > 0, got {self.poly_power}")
        if not 0 <= self.momentum < 1:
            raise TrainingError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise TrainingError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainingError("batch_size and epochs must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainingError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingHistory:
    iteration: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,loss,lr\n")
            for i, l, r in zip(self.iteration, self.loss, self.lr):
                fh.write(f"{i},{l!r},{r!r}\n")


@dataclass
class TrainItem:
    """One preprocessed training example as float32 tensors."""

    key: str
    rgb: torch.Tensor  # 3 x H x W
    radar: torch.Tensor  # C x H x W
    labels: torch.Tensor  # H x W int64
    mask: torch.Tensor  # H x W bool


def epoch_order(seed, epoch, n):
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def schedule_length(n_items, cfg):
    per_epoch = math.ceil(n_items / cfg.batch_size)
    if cfg.max_iters > 0:
        return per_epoch, cfg.max_iters
    return per_epoch, cfg.epochs * per_epoch


def _lr_at(it, epoch, max_iter, cfg):
    lr = poly_lr(it, max_iter, cfg.lr0, cfg.poly_power)
    if cfg.step_decay:
        lr *= 0.1 ** (epoch // 10)
    return lr


def periodic_path(path, it):
    """``run/model.ckpt`` -> ``run/model.iter000100.ckpt``."""
    path = str(path)
    stem, dot, ext = path.rpartition(".")
    if not dot or "/" in ext:
        return f"{path}.iter{it:06d}"
    return f"{stem}.iter{it:06d}.{ext}"


def fit(model, dataset, cfg, checkpoint_path=None, resume=None, extra=None):
    """Train ``model`` in place on a list of ``TrainItem``.

    Items are ordered by key, then shuffled per epoch with a generator seeded
    by (seed, epoch), so input order does not affect batches. ``resume`` is a
    ``Checkpoint`` whose weights, momentum, iteration and history are continued.
    ``extra`` is stored verbatim in every checkpoint written.
    """
    cfg.validate()
    if not dataset:
        raise TrainingError("empty dataset")
    items = sorted(dataset, key=lambda it: it.key)
    per_epoch, max_iter = schedule_length(len(items), cfg)
    params = dict(model.named_parameters())
    skip_decay = no_decay_names(model)
    momentum = {}
    history = TrainingHistory()
    start = 0
    if resume is not None:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(torch.from_numpy(resume.params[name]).to(dtype))
            for name, b in model.named_buffers():
                b.copy_(torch.from_numpy(resume.buffers[name]).to(b.dtype))
        momentum = {k: torch.from_numpy(v.copy()).to(dtype) for k, v in resume.momentum.items()}
        start = resume.iteration
        h = resume.history or {}
        history = TrainingHistory(list(h.get("iteration", [])), list(h.get("loss", [])), list(h.get("lr", [])))

    def snapshot(path, it):
        save_checkpoint(path, model, momentum, it, cfg.to_dict(),
                        {"seed": cfg.seed, "scheme": "per-epoch default_rng([seed, epoch])"},
                        history.to_dict(), extra)

    model.train()
    order = None
    for it in range(start, max_iter):
        epoch, b = divmod(it, per_epoch)
        if order is None or b == 0:
            order = epoch_order(cfg.seed, epoch, len(items))
        batch = [items[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
        rgb = torch.stack([x.rgb for x in batch])
        radar = torch.stack([x.radar for x in batch])
        labels = torch.stack([x.labels for x in batch])
        mask = torch.stack([x.mask for x in batch])

        _, logits = model(rgb, radar)
        loss = ordinal_loss(logits, labels, mask)
        if not torch.isfinite(loss):
            if checkpoint_path:
                snapshot(checkpoint_path, it)
            raise TrainingDiverged(f"non-finite loss at iteration {it}; last finite state saved to {checkpoint_path}")
        grads = torch.autograd.grad(loss, list(params.values()))
        lr = _lr_at(it, epoch, max_iter, cfg)
        sgd_step(params, dict(zip(params, grads)), momentum, lr, cfg.momentum, cfg.weight_decay, skip_decay)

        history.iteration.append(it)
        history.loss.append(loss.item())
        history.lr.append(lr)
        if it % 25 == 0:
            log.info("iter %d/%d loss %.5f lr %.3g", it, max_iter, loss.item(), lr)
        if checkpoint_path and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 and it + 1 < max_iter:
            snapshot(periodic_path(checkpoint_path, it + 1), it + 1)
    if checkpoint_path:
        snapshot(checkpoint_path, max_iter)
    return history
