import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cracknex.checkpoint import (MAGIC, CheckpointError, checkpoint_from_model, dumps_checkpoint,
                                 load_checkpoint, loads_checkpoint, model_from_checkpoint,
                                 save_checkpoint)
from cracknex.config import TrainConfig
from cracknex.data import Episode, ImageSample, synthetic_dataset
from cracknex.engine import (ABLATION_ROWS, EvalReport, IoUAccumulator, TrainingError,
                             ablation_configs, binarize, evaluate, evaluate_model, fit_episode,
                             format_ablation_table, format_log_line, lr_at, miou_accumulate,
                             run_ablation, train, training_episode)
from cracknex.model import CrackNex, forward_episode, predict
from cracknex.network import encode, project_query
from cracknex.protonet import masked_average_pool, match, ssp_augment

from gradcheck import directional_errors, gradcheck_config, gradcheck_episode


def _state(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def count_oracle(pred, gt):
    fi = fu = bi = bu = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        fi += p == 1 and g == 1
        fu += p == 1 or g == 1
        bi += p == 0 and g == 0
        bu += p == 0 or g == 0
    return fi, fu, bi, bu


# ---------------------------------------------------------------- forward


def test_forward_output_range_and_shape(tiny_config, tiny_episode):
    pred, inter = forward_episode(tiny_episode, CrackNex(tiny_config))
    assert pred.shape == (32, 32)
    assert (pred >= 0).all() and (pred <= 1).all()
    assert inter["Fq_prime"].stride == 4


def test_all_toggles_off_is_bare_pipeline(tiny_config, tiny_episode):
    cfg = tiny_config.replace(use_reflectance=False, use_pfm=False, use_aspp=False, dtype="float64")
    model = CrackNex(cfg)
    assert model.refl_encoder is None and model.pfm is None and model.aspp is None
    pred, _ = forward_episode(tiny_episode, model)
    F_s = encode(tiny_episode.support[0].image, model.rgb_encoder)
    F_q = project_query(encode(tiny_episode.query.image, model.rgb_encoder), model.query_proj)
    P = ssp_augment(masked_average_pool(F_s, tiny_episode.support[0].mask), F_q, cfg.ssp)
    manual = match(P, F_q, cfg.temperature)
    np.testing.assert_allclose(pred.detach().numpy(), manual.detach().numpy(), atol=1e-12)


@pytest.mark.parametrize("toggles", ABLATION_ROWS)
def test_one_and_five_identical_supports_agree(tiny_config, tiny_episode, toggles):
    r, p, a = toggles
    cfg = tiny_config.replace(use_reflectance=r, use_pfm=p, use_aspp=a, dtype="float64")
    model = CrackNex(cfg)
    s = tiny_episode.support[0]
    copies = [ImageSample(f"s{k}", s.image, s.mask) for k in range(5)]
    one = predict(tiny_episode, model)
    five = predict(Episode(copies, tiny_episode.query), model)
    np.testing.assert_allclose(one, five, atol=1e-12)


def test_forward_is_bit_reproducible(tiny_config, tiny_episode):
    a = predict(tiny_episode, CrackNex(tiny_config))
    b = predict(tiny_episode, CrackNex(tiny_config))
    assert np.array_equal(a, b)


def test_concat_mode_doubles_feature_width(tiny_config, tiny_episode):
    cfg = tiny_config.replace(use_pfm=False)
    _, inter = forward_episode(tiny_episode, CrackNex(cfg))
    assert inter["P"].fg.shape == (2 * cfg.width,)
    assert inter["query_features"].grid.shape[0] == 2 * cfg.width


def test_initialisation_ignores_global_rng(tiny_config):
    torch.manual_seed(123)
    a = _state(CrackNex(tiny_config))
    torch.manual_seed(456)
    b = _state(CrackNex(tiny_config))
    assert all(torch.equal(a[k], b[k]) for k in a)


# --------------------------------------------------------------- training


def test_zero_iterations_returns_initialisation(tiny_config, tiny_dataset):
    cfg = tiny_config.replace(iterations=0)
    cp = train(cfg, tiny_dataset)
    init = _state(CrackNex(cfg))
    assert cp.iteration == 0
    for k, v in init.items():
        assert np.array_equal(cp.params[k], v.numpy())


@pytest.mark.parametrize("it,expected", [(0, 1e-3), (1999, 1e-3), (2000, 1e-4), (4000, 1e-5)])
def test_lr_schedule_points(it, expected):
    assert lr_at(it, TrainConfig()) == pytest.approx(expected, rel=1e-12)


def test_training_episode_is_seed_determined(tiny_config, tiny_dataset):
    a = training_episode(tiny_dataset, tiny_config, 3, 1)
    b = training_episode(tiny_dataset, tiny_config, 3, 1)
    assert [s.id for s in a.support] == [s.id for s in b.support]
    assert np.array_equal(a.query.image, b.query.image)
    c = training_episode(tiny_dataset, tiny_config, 3, 0)
    assert (a.query.id, a.support[0].id) != (c.query.id, c.support[0].id) or \
        not np.array_equal(a.query.image, c.query.image)


def test_overfit_loss_decreases(tiny_episode):
    cfg = TrainConfig(width=8, image_size=(32, 32), lr0=0.01, iterations=300)
    _, history = fit_episode(cfg, tiny_episode)
    assert len(history) == 300
    assert history[-1] < history[0]


def test_train_emits_one_log_line_per_iteration(tiny_config, tiny_dataset):
    lines = []
    train(tiny_config.replace(iterations=3), tiny_dataset, on_log=lines.append)
    assert len(lines) == 3
    for i, line in enumerate(lines):
        fields = dict(part.split("=") for part in line.split())
        assert list(fields) == ["iter", "lr", "loss", "seg", "ls", "lq"]
        assert int(fields["iter"]) == i
        assert all(math.isfinite(float(v)) for v in fields.values())


def test_format_log_line():
    line = format_log_line(7, 1e-3, {"total": 1.5, "seg": 1.0, "ls": 0.25, "lq": 1.25})
    assert line == "iter=7 lr=0.001 loss=1.500000 seg=1.000000 ls=0.250000 lq=1.250000"


def test_non_finite_loss_aborts(tiny_config, tiny_dataset, monkeypatch):
    import cracknex.engine as engine

    real = engine.episode_losses
    calls = []

    def poisoned(pred, inter, episode, config):
        losses = real(pred, inter, episode, config)
        calls.append(1)
        if len(calls) > 2 * config.batch_episodes:  # third iteration
            losses["total"] = losses["total"] * float("nan")
        return losses

    monkeypatch.setattr(engine, "episode_losses", poisoned)
    with pytest.raises(TrainingError, match=r"iteration 2 \(lr=0.01\)"):
        train(tiny_config.replace(iterations=5), tiny_dataset)


def test_training_is_bit_reproducible(tiny_config, tiny_dataset):
    a = train(tiny_config, tiny_dataset)
    b = train(tiny_config, tiny_dataset)
    assert dumps_checkpoint(a) == dumps_checkpoint(b)


def test_resume_matches_uninterrupted_run(tiny_config, tiny_dataset):
    full = train(tiny_config.replace(iterations=4), tiny_dataset)
    half = train(tiny_config.replace(iterations=2), tiny_dataset)
    half.config = half.config.replace(iterations=4)
    resumed = train(half.config, tiny_dataset, resume=loads_checkpoint(dumps_checkpoint(half)))
    assert resumed.iteration == 4
    for k in full.params:
        np.testing.assert_allclose(resumed.params[k], full.params[k], rtol=0, atol=1e-6)


# --------------------------------------------------------------- gradients


@pytest.mark.parametrize("overrides", [{}, {"use_aspp": False}, {"use_pfm": False}],
                         ids=["full", "no-aspp", "concat"])
def test_gradients_match_finite_differences(overrides):
    cfg = gradcheck_config(**overrides)
    groups = set()
    for group, name, a, n, rel in directional_errors(cfg, gradcheck_episode()):
        groups.add(group)
        assert rel <= 1e-4, f"{name}: analytic {a} vs numeric {n}"
    assert "rgb_encoder" in groups and "refl_encoder" in groups


# -------------------------------------------------------------- evaluation


def test_accumulator_trivial_counts():
    ones = np.ones((3, 4), dtype=np.uint8)
    acc = miou_accumulate(ones, ones)
    assert acc.fg_intersection == acc.fg_union == 12
    acc = miou_accumulate(ones, np.zeros_like(ones))
    assert acc.fg_intersection == 0 and acc.fg_union == 12


def test_accumulator_matches_loop_on_random_pairs():
    rng = np.random.default_rng(0)
    acc = IoUAccumulator()
    totals = np.zeros(4, dtype=int)
    for _ in range(200):
        pred = (rng.random((6, 7)) > rng.random()).astype(np.uint8)
        gt = (rng.random((6, 7)) > rng.random()).astype(np.uint8)
        one = miou_accumulate(pred, gt)
        expected = count_oracle(pred, gt)
        assert (one.fg_intersection, one.fg_union, one.bg_intersection, one.bg_union) == expected
        miou_accumulate(pred, gt, acc)
        totals += expected
    assert (acc.fg_intersection, acc.fg_union, acc.bg_intersection, acc.bg_union) == tuple(totals)


def test_accumulator_rejects_bad_input():
    with pytest.raises(ValueError):
        miou_accumulate(np.full((2, 2), 2), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        miou_accumulate(np.zeros((2, 2)), np.zeros((2, 3)))


def test_perfect_and_complement_predictions():
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[:, :2] = 1
    assert miou_accumulate(gt, gt).miou == 1.0
    comp = miou_accumulate(1 - gt, gt)
    assert comp.fg_iou == 0.0 and comp.bg_iou == 0.0


def test_hand_computed_episodes():
    # episode 1: pred fg {0,1}, gt fg {1,2} over 4 pixels -> fg I=1 U=3, bg I=1 U=3
    # episode 2: pred all bg, gt all bg -> fg I=0 U=0, bg I=4 U=4
    # episode 3: pred fg {0}, gt fg {0,3} -> fg I=1 U=2, bg I=2 U=3
    pairs = [([1, 1, 0, 0], [0, 1, 1, 0]), ([0, 0, 0, 0], [0, 0, 0, 0]), ([1, 0, 0, 0], [1, 0, 0, 1])]
    acc = IoUAccumulator()
    for p, g in pairs:
        miou_accumulate(np.array(p).reshape(2, 2), np.array(g).reshape(2, 2), acc)
    assert acc.fg_iou == pytest.approx(2 / 5)
    assert acc.bg_iou == pytest.approx(7 / 10)
    assert acc.miou == pytest.approx((2 / 5 + 7 / 10) / 2)


def test_empty_union_counts_as_perfect():
    z = np.zeros((2, 2), dtype=np.uint8)
    acc = miou_accumulate(z, z)
    assert acc.fg_iou == 1.0 and acc.miou == 1.0


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0, 1))
def test_binarize_threshold(p):
    assert binarize(np.array([p]))[0] == (1 if p > 0.5 else 0)


def test_evaluate_report_and_no_mutation(tiny_config, tiny_dataset):
    cp = train(tiny_config, tiny_dataset)
    before = cp.fingerprint()
    report = evaluate(cp, tiny_dataset, 1, 4, seed=3)
    assert cp.fingerprint() == before
    assert report.episode_count == 4 and report.K == 1 and report.seed == 3
    assert len(report.per_episode_ious) == 4
    assert report.miou == pytest.approx((report.fg_iou + report.bg_iou) / 2)
    assert 0 <= report.miou <= 1
    assert EvalReport.from_json(report.to_json()) == report
    assert set(json.loads(report.to_json())) == {"miou", "fg_iou", "bg_iou", "episode_count", "K",
                                                 "seed", "per_episode_ious"}


def test_evaluate_accepts_five_shots(tiny_config, tiny_dataset):
    cp = train(tiny_config.replace(iterations=0), tiny_dataset)
    assert evaluate(cp, tiny_dataset, 5, 2, seed=0).K == 5


def test_evaluate_rejects_zero_episodes(tiny_config, tiny_dataset):
    cp = train(tiny_config.replace(iterations=0), tiny_dataset)
    with pytest.raises(ValueError):
        evaluate(cp, tiny_dataset, 1, 0, seed=0)


def test_evaluate_perfect_model_scores_one(tiny_config, monkeypatch):
    """A model that reproduces the ground truth gets mIoU 1 through the whole harness."""
    import cracknex.engine as engine

    monkeypatch.setattr(engine, "forward_episode",
                        lambda ep, m: (torch.from_numpy(ep.query.mask.astype(float)), {}))
    report = evaluate_model(CrackNex(tiny_config), synthetic_dataset(4, 32, 32, seed=1), 1, 5, seed=0)
    assert report.miou == 1.0


# ------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bit_exact(tmp_path, tiny_config, tiny_dataset):
    cp = train(tiny_config, tiny_dataset)
    path = tmp_path / "model.ckpt"
    save_checkpoint(cp, path)
    loaded = load_checkpoint(path)
    assert loaded.config == cp.config and loaded.iteration == cp.iteration
    assert set(loaded.params) == set(cp.params) and set(loaded.momentum) == set(cp.momentum)
    for k in cp.params:
        assert loaded.params[k].dtype == cp.params[k].dtype
        assert loaded.params[k].shape == cp.params[k].shape
        assert loaded.params[k].tobytes() == cp.params[k].tobytes()
    for k in cp.momentum:
        assert loaded.momentum[k].shape == cp.momentum[k].shape
        assert loaded.momentum[k].tobytes() == cp.momentum[k].tobytes()
    assert dumps_checkpoint(loaded) == path.read_bytes()
    assert path.read_bytes().startswith(MAGIC)


def test_evaluate_after_round_trip(tmp_path, tiny_config, tiny_dataset):
    cp = train(tiny_config, tiny_dataset)
    save_checkpoint(cp, tmp_path / "m.ckpt")
    a = evaluate(cp, tiny_dataset, 1, 3, seed=5)
    b = evaluate(load_checkpoint(tmp_path / "m.ckpt"), tiny_dataset, 1, 3, seed=5)
    assert a.to_json() == b.to_json()


def test_truncated_checkpoint_is_rejected(tmp_path, tiny_config):
    blob = dumps_checkpoint(checkpoint_from_model(CrackNex(tiny_config)))
    for cut in (5, len(blob) // 2, len(blob) - 1):
        (tmp_path / "t.ckpt").write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_corrupt_magic_version_and_payload(tiny_config):
    blob = bytearray(dumps_checkpoint(checkpoint_from_model(CrackNex(tiny_config))))
    with pytest.raises(CheckpointError, match="magic"):
        loads_checkpoint(b"NOTACKPT" + bytes(blob[8:]))
    bad_version = blob[:8] + (99).to_bytes(4, "little") + blob[12:]
    with pytest.raises(CheckpointError, match="version"):
        loads_checkpoint(bytes(bad_version))
    blob[-100] ^= 0xFF
    with pytest.raises(CheckpointError):
        loads_checkpoint(bytes(blob))


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_model_from_checkpoint_restores_predictions(tiny_config, tiny_episode):
    model = CrackNex(tiny_config)
    with torch.no_grad():
        model.pfm.alpha.fill_(0.3)
    restored = model_from_checkpoint(loads_checkpoint(dumps_checkpoint(checkpoint_from_model(model))))
    assert np.array_equal(predict(tiny_episode, model), predict(tiny_episode, restored))


# ---------------------------------------------------------------- ablation


def test_ablation_configs_follow_row_pattern():
    base = TrainConfig()
    cfgs = ablation_configs(base)
    assert [(c.use_reflectance, c.use_pfm, c.use_aspp) for c in cfgs] == [
        (False, False, False), (True, False, False), (True, True, False), (True, True, True)]
    assert cfgs[-1] == base


def test_run_ablation_structure(tiny_config, tiny_dataset):
    cfg = tiny_config.replace(iterations=1, batch_episodes=1)
    rows = run_ablation(cfg, tiny_dataset, tiny_dataset, episode_count=2)
    assert len(rows) == 4
    for row, toggles in zip(rows, ABLATION_ROWS):
        assert (row["reflectance"], row["pfm"], row["aspp"]) == toggles
        assert set(row["reports"]) == {"1-shot", "5-shot"}
        assert row["reports"]["5-shot"]["K"] == 5
    table = format_ablation_table(rows)
    assert "mIoU 1-shot" in table and "mIoU 5-shot" in table
    assert len(table.splitlines()) == 6
