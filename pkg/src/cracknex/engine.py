"""Episodic training, mIoU evaluation and the component ablation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, checkpoint_from_model, model_from_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Dataset, Episode, augment_hflip, sample_episode
from .model import CrackNex, episode_losses, forward_episode

log = logging.getLogger(__name__)

# (use_reflectance, use_pfm, use_aspp) for the four ablation rows
ABLATION_ROWS = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (True, True, True),
)


class TrainingError(RuntimeError):
    pass


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def lr_at(iteration: int, config: TrainConfig) -> float:
    return config.lr0 * config.decay_factor ** (iteration // config.decay_every)


def training_episode(dataset: Dataset, config: TrainConfig, iteration: int, slot: int) -> Episode:
    """The seed-determined, flip-augmented episode for one batch slot of one iteration."""
    episode = sample_episode(dataset, config.shots, derive_seed(config.seed, iteration, slot))
    flipped = [augment_hflip(s, derive_seed(config.seed, iteration, slot, j, 1))
               for j, s in enumerate([*episode.support, episode.query])]
    return Episode(flipped[:-1], flipped[-1])


def format_log_line(iteration: int, lr: float, losses: dict) -> str:
    return (f"iter={iteration} lr={lr:.6g} loss={losses['total']:.6f} seg={losses['seg']:.6f} "
            f"ls={losses['ls']:.6f} lq={losses['lq']:.6f}")


def sgd_step(model: CrackNex, optimizer: torch.optim.Optimizer, episodes: Sequence[Episode],
             lr: float, config: TrainConfig) -> dict:
    """One update on the batch-averaged total loss; returns the averaged loss terms.

    Parameters are left untouched when the loss is not finite.
    """
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    sums = {"total": 0.0, "seg": 0.0, "ls": 0.0, "lq": 0.0}
    batch_total = 0.0
    for episode in episodes:
        pred, inter = forward_episode(episode, model, config)
        losses = episode_losses(pred, inter, episode, config)
        batch_total = batch_total + losses["total"] / len(episodes)
        for k in sums:
            sums[k] += float(losses[k].detach()) / len(episodes)
    if math.isfinite(sums["total"]):
        batch_total.backward()
        optimizer.step()
    return sums


def fit_episode(config: TrainConfig, episode: Episode, iterations: Optional[int] = None,
                on_log: Optional[Callable[[str], None]] = None):
    """Train on one fixed episode (no sampling, no augmentation); returns (model, loss history)."""
    emit = on_log or (lambda line: None)
    model = CrackNex(config)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.lr0, momentum=config.momentum)
    model.train()
    history = []
    for it in range(config.iterations if iterations is None else iterations):
        lr = lr_at(it, config)
        losses = sgd_step(model, optimizer, [episode], lr, config)
        if not math.isfinite(losses["total"]):
            raise TrainingError(f"non-finite loss at iteration {it} (lr={lr:g})")
        history.append(losses["total"])
        emit(format_log_line(it, lr, losses))
    return model, history


def train(config: TrainConfig, dataset: Dataset, out_path=None,
          resume: Optional[Checkpoint] = None,
          on_log: Optional[Callable[[str], None]] = None) -> Checkpoint:
    """SGD with momentum over batches of episodes, with step learning-rate decay.

    Losses are averaged over the ``batch_episodes`` episodes of an iteration.
    One log line per iteration goes to ``on_log`` (default: this module's logger).
    """
    emit = on_log or log.info
    if resume is not None:
        model = model_from_checkpoint(resume)
        start = resume.iteration
    else:
        model = CrackNex(config)
        start = 0
    optimizer = torch.optim.SGD(model.parameters(), lr=config.lr0, momentum=config.momentum)
    if resume is not None and resume.momentum:
        by_name = dict(model.named_parameters())
        for name, buf in resume.momentum.items():
            optimizer.state[by_name[name]]["momentum_buffer"] = torch.from_numpy(buf.copy())

    model.train()
    for it in range(start, config.iterations):
        lr = lr_at(it, config)
        episodes = [training_episode(dataset, config, it, slot)
                    for slot in range(config.batch_episodes)]
        losses = sgd_step(model, optimizer, episodes, lr, config)
        if not math.isfinite(losses["total"]):
            raise TrainingError(f"non-finite loss at iteration {it} (lr={lr:g})")
        emit(format_log_line(it, lr, losses))

    cp = checkpoint_from_model(model, max(start, config.iterations), optimizer)
    if out_path is not None:
        save_checkpoint(cp, out_path)
    return cp


# ------------------------------------------------------------------ evaluation


@dataclass
class IoUAccumulator:
    fg_intersection: int = 0
    fg_union: int = 0
    bg_intersection: int = 0
    bg_union: int = 0

    @staticmethod
    def _iou(inter: int, union: int) -> float:
        return 1.0 if union == 0 else inter / union

    @property
    def fg_iou(self) -> float:
        return self._iou(self.fg_intersection, self.fg_union)

    @property
    def bg_iou(self) -> float:
        return self._iou(self.bg_intersection, self.bg_union)

    @property
    def miou(self) -> float:
        return (self.fg_iou + self.bg_iou) / 2


def _check_binary(name: str, a: np.ndarray):
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")


def miou_accumulate(pred_binary, gt, accumulator: Optional[IoUAccumulator] = None) -> IoUAccumulator:
    """Add per-class intersection and union pixel counts of one prediction to ``accumulator``."""
    pred, gt = np.asarray(pred_binary), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    _check_binary("prediction", pred)
    _check_binary("ground truth", gt)
    acc = accumulator if accumulator is not None else IoUAccumulator()
    p, g = pred.astype(bool), gt.astype(bool)
    acc.fg_intersection += int(np.count_nonzero(p & g))
    acc.fg_union += int(np.count_nonzero(p | g))
    acc.bg_intersection += int(np.count_nonzero(~p & ~g))
    acc.bg_union += int(np.count_nonzero(~p | ~g))
    return acc


@dataclass
class EvalReport:
    miou: float
    fg_iou: float
    bg_iou: float
    episode_count: int
    K: int
    seed: int
    per_episode_ious: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.uint8)


def evaluate_model(model: CrackNex, dataset: Dataset, K: int, episode_count: int,
                   seed: int) -> EvalReport:
    if episode_count < 1:
        raise ValueError(f"episode_count must be >= 1, got {episode_count}")
    model.eval()
    acc = IoUAccumulator()
    per_episode = []
    with torch.no_grad():
        for e in range(episode_count):
            episode = sample_episode(dataset, K, derive_seed(seed, e))
            pred, _ = forward_episode(episode, model)
            binary = binarize(pred.double().numpy())
            single = miou_accumulate(binary, episode.query.mask)
            per_episode.append(single.miou)
            miou_accumulate(binary, episode.query.mask, acc)
    return EvalReport(acc.miou, acc.fg_iou, acc.bg_iou, episode_count, K, seed, per_episode)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, K: int, episode_count: int,
             seed: int) -> EvalReport:
    """Dataset-level fg/bg IoU over ``episode_count`` seeded K-shot episodes."""
    return evaluate_model(model_from_checkpoint(checkpoint), dataset, K, episode_count, seed)


# -------------------------------------------------------------------- ablation


def ablation_configs(base: TrainConfig) -> list[TrainConfig]:
    return [base.replace(use_reflectance=r, use_pfm=p, use_aspp=a) for r, p, a in ABLATION_ROWS]


def run_ablation(base_config: TrainConfig, dataset_train: Dataset, dataset_test: Dataset,
                 episode_count: Optional[int] = None, shots: Sequence[int] = (1, 5),
                 on_log: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Train each of the four toggle configurations once and evaluate at every K in ``shots``."""
    episodes = episode_count or base_config.eval_episodes
    rows = []
    for cfg in ablation_configs(base_config):
        cp = train(cfg, dataset_train, on_log=on_log or (lambda line: None))
        reports = {f"{k}-shot": asdict(evaluate(cp, dataset_test, k, episodes, cfg.seed))
                   for k in shots}
        rows.append({"reflectance": cfg.use_reflectance, "pfm": cfg.use_pfm,
                     "aspp": cfg.use_aspp, "reports": reports})
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    shot_keys = list(rows[0]["reports"]) if rows else []
    header = ["Reflectance", "PFM", "ASPP", *(f"mIoU {k}" for k in shot_keys)]
    body = []
    for row in rows:
        marks = ["x" if row[k] else "" for k in ("reflectance", "pfm", "aspp")]
        body.append(marks + [f"{100 * row['reports'][k]['miou']:.2f}" for k in shot_keys])
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(header)]
    fmt = lambda cells: "  ".join(c.center(w) for c, w in zip(cells, widths))
    lines = [fmt(header), "  ".join("-" * w for w in widths), *map(fmt, body)]
    return "\n".join(lines)
