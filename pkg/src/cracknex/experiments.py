"""Small end-to-end experiments on synthetic data, shared by scripts and tests."""
from __future__ import annotations

from dataclasses import dataclass

from .config import TrainConfig
from .data import Episode, generate_synthetic_crack, lowlight_dataset, synthetic_dataset
from .engine import binarize, evaluate, fit_episode, miou_accumulate, train
from .model import predict

LOWLIGHT = (2.2, 0.3, 0.01)  # gamma, gain, noise sigma


@dataclass
class OverfitResult:
    miou: float
    fg_iou: float
    bg_iou: float
    history: list[float]


def overfit_run(seed: int = 0, iterations: int = 500, lr: float = 0.05, size: int = 64,
                width: int = 16) -> OverfitResult:
    """Fit the full model to one fixed 1-shot episode and score its own query."""
    support = generate_synthetic_crack(size, size, (seed, 0), sample_id="support")
    query = generate_synthetic_crack(size, size, (seed, 1), sample_id="query")
    episode = Episode([support], query)
    cfg = TrainConfig(iterations=iterations, lr0=lr, width=width, image_size=(size, size), seed=seed)
    model, history = fit_episode(cfg, episode)
    acc = miou_accumulate(binarize(predict(episode, model)), query.mask)
    return OverfitResult(acc.miou, acc.fg_iou, acc.bg_iou, history)


def transfer_run(seed: int, iterations: int = 600, lr: float = 0.01, size: int = 64,
                 width: int = 16, train_count: int = 40, test_count: int = 40,
                 episodes: int = 200, shots: int = 1) -> dict:
    """mIoU on low-light test episodes for the full model and the bare baseline.

    Both runs share the seed, the normal-light training set and the test set.
    """
    train_ds = synthetic_dataset(train_count, size, size, seed=1000 + seed)
    test_ds = lowlight_dataset(
        synthetic_dataset(test_count, size, size, seed=2000 + seed, split_tag="novel"),
        *LOWLIGHT, seed=3000 + seed)
    base = TrainConfig(iterations=iterations, lr0=lr, width=width, image_size=(size, size),
                       seed=seed, shots=shots)
    result = {}
    for name, on in (("full", True), ("none", False)):
        cfg = base.replace(use_reflectance=on, use_pfm=on, use_aspp=on)
        cp = train(cfg, train_ds, on_log=lambda line: None)
        result[name] = evaluate(cp, test_ds, shots, episodes, seed).miou
    return result
