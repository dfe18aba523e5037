"""Pretraining, linear probing, fine-tuning, exports and the ablation grid."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, RunConfig
from .data import PointCloudVideo, random_scale, read_dataset, sample_clip, stratified_split
from .model import PointCMP

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "lr", "loss_local", "loss_global", "loss_total",
                 "mean_pos_rank", "sim_pos", "sim_hard", "sim_batch")


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup from 0 to ``lr_max`` over ``warmup_steps``, then cosine decay to 0 at the last step."""
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    decay_steps = total_steps - 1 - warmup_steps
    if decay_steps <= 0:
        return lr_max
    progress = min((step - warmup_steps) / decay_steps, 1.0)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def seed_everything(seed: int, deterministic: bool = True):
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def make_batch(videos: list[PointCloudVideo], cfg: RunConfig, rng: np.random.Generator,
               augment: bool = True) -> torch.Tensor:
    clips = []
    for v in videos:
        clip = sample_clip(v, cfg.frames, cfg.stride, cfg.points_per_frame, rng)
        if augment:
            clip = random_scale(clip, cfg.scale_lo, cfg.scale_hi, rng)
        clips.append(clip.points)
    x = torch.from_numpy(np.stack(clips))
    # body-centred coordinates; tokens are translation invariant, anchors are not
    return x - x.mean(dim=(1, 2), keepdim=True)


def load_split(cfg: RunConfig, dataset_path):
    videos, num_classes = read_dataset(dataset_path)
    if num_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {num_classes} classes, config expects {cfg.num_classes}")
    train, test = stratified_split([v.label for v in videos], cfg.train_fraction, cfg.data_seed)
    return [videos[i] for i in train], [videos[i] for i in test]


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: dict
    config: dict
    optimizer: dict | None = None
    epoch: int = 0
    rng: dict = field(default_factory=dict)

    def save(self, path):
        torch.save(asdict(self), path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(**torch.load(path, weights_only=False))

    def run_config(self) -> RunConfig:
        return RunConfig(**self.config)

    def build_model(self) -> PointCMP:
        model = PointCMP(self.run_config())
        model.load_state_dict(self.model)
        return model


def checkpoint_of(model: PointCMP, optimizer=None, epoch: int = 0, rng=None) -> Checkpoint:
    return Checkpoint({k: v.detach().clone() for k, v in model.state_dict().items()}, asdict(model.cfg),
                      None if optimizer is None else optimizer.state_dict(), epoch, rng or {})


def as_model(source) -> PointCMP:
    if isinstance(source, PointCMP):
        return source
    if isinstance(source, Checkpoint):
        return source.build_model()
    return Checkpoint.load(source).build_model()


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    model: PointCMP
    metrics: list[dict]
    checkpoint: Checkpoint


def write_metrics(metrics: list[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in metrics:
            w.writerow(row)


def _fmt(x):
    return "" if x is None else float(x)


def pretrain(cfg: RunConfig, dataset_path, out_dir=None, model: PointCMP | None = None) -> PretrainResult:
    """Self-supervised pretraining on the training split of ``dataset_path``."""
    cfg.validate()
    train, _ = load_split(cfg, dataset_path)
    if len(train) < cfg.batch_size:
        raise ConfigError(f"training split has {len(train)} videos, fewer than batch_size {cfg.batch_size}")
    seed_everything(cfg.seed, cfg.deterministic)
    model = model or PointCMP(cfg)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = len(train) // cfg.batch_size
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    warmup = cfg.warmup_epochs * steps_per_epoch
    gen = torch.Generator().manual_seed(cfg.seed)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.txt")

    metrics = []
    step = 0
    t0 = time.time()
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train))
        for i in range(steps_per_epoch):
            if step >= total:
                break
            batch_videos = [train[j] for j in order[i * cfg.batch_size:(i + 1) * cfg.batch_size]]
            clips = make_batch(batch_videos, cfg, rng)
            lr = lr_at(step, total, warmup, cfg.lr)
            for group in opt.param_groups:
                group["lr"] = lr
            out = model(clips, gen)
            opt.zero_grad(set_to_none=True)
            out.total.backward()
            opt.step()
            gl = out.global_
            metrics.append({
                "step": step, "epoch": epoch, "lr": lr,
                "loss_local": _fmt(out.local.loss.detach() if out.local else None),
                "loss_global": _fmt(gl.loss.detach() if (gl and cfg.global_branch) else None),
                "loss_total": float(out.total.detach()),
                "mean_pos_rank": _fmt(out.local.mean_rank if out.local else None),
                "sim_pos": _fmt(gl.sim_positive.mean() if gl else None),
                "sim_hard": _fmt(gl.sim_hard.mean() if gl is not None and gl.sim_hard is not None else None),
                "sim_batch": _fmt(_off_diag_mean(gl.sim_batch) if gl else None),
            })
            step += 1
        logger.info("epoch %d step %d loss %.4f (%.1fs)", epoch, step, metrics[-1]["loss_total"], time.time() - t0)
        if out_dir:
            checkpoint_of(model, opt, epoch + 1, {"torch": gen.get_state()}).save(out_dir / "checkpoint.pt")
    ckpt = checkpoint_of(model, opt, cfg.epochs, {"torch": gen.get_state()})
    if out_dir:
        ckpt.save(out_dir / "checkpoint.pt")
        write_metrics(metrics, out_dir / "metrics.csv")
    return PretrainResult(model, metrics, ckpt)


def _off_diag_mean(m: torch.Tensor) -> float:
    b = m.shape[0]
    if b < 2:
        return float("nan")
    return float(m.masked_fill(torch.eye(b, dtype=torch.bool), 0).sum() / (b * (b - 1)))


# --------------------------------------------------------------------------
# evaluation


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def extract_features(model: PointCMP, videos, cfg: RunConfig, views: int, seed: int, augment: bool = True):
    """Global tokens for ``views`` random clips of each video: ``(V, views, C)``."""
    model.eval()
    rng = np.random.default_rng(seed)
    feats = []
    for start in range(0, len(videos), 16):
        chunk = videos[start:start + 16]
        per_view = []
        for _ in range(views):
            clips = make_batch(chunk, cfg, rng, augment)
            per_view.append(model.encode(clips)[2])
        feats.append(torch.stack(per_view, 1))
    return torch.cat(feats)


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(-1) == labels).float().mean())


def linear_probe(source, dataset_path, epochs: int | None = None, cfg: RunConfig | None = None,
                 seed: int | None = None) -> float:
    """Train an affine classifier on frozen global tokens; return held-out accuracy.

    Features are standardised with training-set statistics (a fixed affine map,
    equivalent to a non-learned batch norm in front of the classifier).
    """
    model = as_model(source)
    cfg = cfg or model.cfg
    epochs = cfg.probe_epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    train, test = load_split(cfg, dataset_path)
    before = param_checksum(model)

    xtr = extract_features(model, train, cfg, cfg.eval_views, seed + 1)
    xte = extract_features(model, test, cfg, cfg.eval_views, seed + 2)
    ytr = torch.tensor([v.label for v in train])
    yte = torch.tensor([v.label for v in test])
    flat = xtr.flatten(0, 1)
    mean, std = flat.mean(0), flat.std(0) + 1e-6
    acc = _fit_linear(((flat - mean) / std), ytr.repeat_interleave(cfg.eval_views),
                      ((xte - mean) / std), yte, cfg.num_classes, epochs, cfg.probe_lr, seed)
    if param_checksum(model) != before:
        raise RuntimeError("encoder parameters changed during linear probing")
    return acc


def _fit_linear(x, y, x_test, y_test, num_classes, epochs, lr, seed) -> float:
    g = torch.Generator().manual_seed(seed)
    head = nn.Linear(x.shape[-1], num_classes)
    with torch.no_grad():
        head.weight.normal_(0, 0.01, generator=g)
        head.bias.zero_()
    opt = torch.optim.AdamW(head.parameters(), lr=lr, weight_decay=1e-4)
    n = x.shape[0]
    for _ in range(epochs):
        perm = torch.randperm(n, generator=g)
        for i in range(0, n, 32):
            idx = perm[i:i + 32]
            loss = F.cross_entropy(head(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        logits = head(x_test).mean(1)  # average over views
    return _accuracy(logits, y_test)


def finetune(source, dataset_path, epochs: int | None = None, cfg: RunConfig | None = None,
             seed: int | None = None) -> float:
    """Train encoder and a linear head end to end; return held-out accuracy."""
    model = as_model(source)
    cfg = cfg or model.cfg
    epochs = cfg.finetune_epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    train, test = load_split(cfg, dataset_path)
    seed_everything(seed, cfg.deterministic)
    encoder = model.encoder
    head = nn.Linear(cfg.channels, cfg.num_classes)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.finetune_lr, weight_decay=cfg.weight_decay)
    bs = max(2, cfg.batch_size)
    steps_per_epoch = max(1, len(train) // bs)
    total = epochs * steps_per_epoch
    warmup = min(cfg.warmup_epochs, epochs // 4) * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        encoder.train()
        rng = np.random.default_rng([seed, 1000 + epoch])
        order = rng.permutation(len(train))
        for i in range(steps_per_epoch):
            vids = [train[j] for j in order[i * bs:(i + 1) * bs]]
            clips = make_batch(vids, cfg, rng)
            labels = torch.tensor([v.label for v in vids])
            for group in opt.param_groups:
                group["lr"] = lr_at(step, total, warmup, cfg.finetune_lr)
            logits = head(model.encode(clips)[2])
            loss = F.cross_entropy(logits, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    feats = extract_features(model, test, cfg, cfg.eval_views, seed + 2)
    with torch.no_grad():
        logits = head(feats).mean(1)
    return _accuracy(logits, torch.tensor([v.label for v in test]))


@torch.no_grad()
def export_embeddings(source, dataset_path, out) -> int:
    """One row per video: ``video_id label f_1 ... f_C`` from a fixed clip."""
    model = as_model(source)
    cfg = model.cfg
    videos, _ = read_dataset(dataset_path)
    feats = extract_features(model, videos, cfg, 1, seed=0, augment=False)[:, 0]
    with open(out, "w") as fh:
        for v, f in zip(videos, feats):
            fh.write(f"{v.video_id} {v.label} " + " ".join(f"{x:.7g}" for x in f.tolist()) + "\n")
    return len(videos)


def read_embeddings(path):
    ids, labels, rows = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        ids.append(parts[0])
        labels.append(int(parts[1]))
        rows.append([float(x) for x in parts[2:]])
    return ids, np.array(labels), np.array(rows, dtype=np.float64)


@torch.no_grad()
def similarity_histogram(source, dataset_path, out=None, seed: int = 0) -> dict[str, np.ndarray]:
    """Projected-space cosines of each query with its positive, a batch negative and its hard negative.

    Hard negatives always come from similarity-based channel erasing, whatever
    the training configuration was. The batch negative of sample ``i`` is
    sample ``i + 1`` of the same batch.
    """
    model = as_model(source)
    cfg = model.cfg
    videos, _ = read_dataset(dataset_path)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    cols = {"positive": [], "batch_negative": [], "hard_negative": []}
    bs = max(2, cfg.batch_size)
    order = rng.permutation(len(videos))
    for i in range(0, len(videos) - 1, bs):
        vids = [videos[j] for j in order[i:i + bs]]
        if len(vids) < 2:
            break
        out_step = model(make_batch(vids, cfg, rng), gen, erase_strategy="similarity")
        gl = out_step.global_
        b = len(vids)
        cols["positive"].append(gl.sim_positive)
        cols["hard_negative"].append(gl.sim_hard)
        cols["batch_negative"].append(gl.sim_batch[torch.arange(b), (torch.arange(b) + 1) % b])
    result = {k: torch.cat(v).numpy().astype(np.float64) for k, v in cols.items()}
    if out:
        with open(out, "w") as fh:
            fh.write("positive,batch_negative,hard_negative\n")
            for row in zip(result["positive"], result["batch_negative"], result["hard_negative"]):
                fh.write(",".join(f"{x:.6f}" for x in row) + "\n")
    return result


# --------------------------------------------------------------------------
# ablations


def ablation_grid(ratios=(0.25, 0.5, 0.75)) -> dict[str, dict]:
    """Config overrides for every ablation row, keyed by row name."""
    off = {"mask_strategy": "random", "erase_strategy": "off"}
    rows = {
        "A1": {"global_branch": False, **off},
        "A2": {"local_branch": False, **off},
        "A3": dict(off),
        "A4": {},
    }
    for label, gran, strat in (("B1", "token", "random"), ("B2", "token", "similarity"),
                               ("B3", "segment", "random"), ("B4", "segment", "similarity")):
        for r in ratios:
            rows[f"{label}@{r:g}"] = {"mask_granularity": gran, "mask_strategy": strat, "mask_ratio": r}
    rows["C1"] = {"erase_strategy": "off"}
    rows["C2"] = {"erase_strategy": "random"}
    rows["C3"] = {}
    rows["D1"] = {"global_branch": False, "matching_module": False}
    rows["D2"] = {"global_branch": False}
    rows["D3"] = {"matching_module": False}
    rows["D4"] = {}
    return rows


def run_ablation_suite(base: RunConfig, dataset_path, out=None, rows=None, seeds=(0, 1, 2),
                       cache: dict | None = None) -> dict[str, list[float]]:
    """Pretrain + linear probe for each row and seed. Returns ``{row: [acc per seed]}``.

    ``cache`` memoises results by effective config, so rows that coincide
    (e.g. A4, B4@0.25, C3, D4) train once.
    """
    grid = ablation_grid()
    names = list(grid) if rows is None else list(rows)
    cache = {} if cache is None else cache
    results = {}
    for name in names:
        accs = []
        for s in seeds:
            cfg = base.replace(**grid[name], seed=s).validate()
            key = cfg.to_text()
            if key not in cache:
                model = pretrain(cfg, dataset_path).model
                cache[key] = linear_probe(model, dataset_path, cfg=cfg)
            accs.append(cache[key])
        results[name] = accs
        logger.info("%s %s", name, accs)
    if out:
        Path(out).write_text(format_ablation_table(results))
    return results


def format_ablation_table(results: dict[str, list[float]]) -> str:
    lines = ["row\tmean_acc\t" + "\t".join(f"seed{i}" for i in range(max(len(v) for v in results.values())))]
    for name, accs in results.items():
        lines.append(f"{name}\t{100 * np.mean(accs):.2f}\t" + "\t".join(f"{100 * a:.2f}" for a in accs))
    return "\n".join(lines) + "\n"
