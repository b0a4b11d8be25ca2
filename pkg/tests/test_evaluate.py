import math
from dataclasses import replace

import numpy as np
import pytest

from peftdml.config import MODALITIES, RunConfig
from peftdml.errors import AvailabilityError, ConfigError, ContractError, ManifestError
from peftdml.evaluate import (
    Detection,
    GroundTruth,
    all_subsets,
    ap_from_ranked,
    average_precision,
    class_prototypes,
    composite_score,
    dedup,
    eval_dropout,
    eval_standard,
    eval_weather,
    eval_zero_shot,
    evaluate_frames,
    match_detections,
    predict_frame,
    predict_frames,
    subset_mask,
    tp_error_means,
)
from peftdml.model import build_model
from peftdml.world import build_dataset

from oracles import exact_ap, greedy_match, suppress

rng = np.random.default_rng(8)


def det(c, conf, x, y, size=(1.0, 1.0, 1.0), yaw=0.0, vel=(0.0, 0.0), moving=0.0):
    return Detection(c, conf, (x, y, 0.0, *size, yaw), vel, moving)


def gt(c, x, y, size=(1.0, 1.0, 1.0), yaw=0.0, vel=(0.0, 0.0), moving=False):
    return GroundTruth(c, (x, y, 0.0, *size, yaw), vel, moving)


def random_case(r, n_pred=6, n_gt=4):
    # a coarse grid and few confidence levels make distance and rank ties common
    gts = [gt(int(r.integers(2)), float(r.integers(0, 4)), float(r.integers(0, 4))) for _ in range(int(r.integers(0, n_gt + 1)))]
    preds = [
        det(int(r.integers(2)), float(r.choice([0.2, 0.5, 0.9])), float(r.integers(0, 4)) + r.choice([0, 0.25, 0.5]), float(r.integers(0, 4)))
        for _ in range(int(r.integers(0, n_pred + 1)))
    ]
    return preds, gts


# ------------------------------------------------------------------ inference helpers


def test_dedup_contract_and_oracle():
    close = [det(1, 0.9, 0.0, 0.0), det(1, 0.8, 0.5, 0.0)]
    assert dedup(close) == [close[0]]
    assert len(dedup([det(1, 0.9, 0, 0), det(2, 0.8, 0.5, 0)])) == 2
    for _ in range(200):
        dets = [det(int(rng.integers(2)), float(rng.choice([0.3, 0.6, 0.9])), *rng.uniform(0, 3, 2)) for _ in range(int(rng.integers(0, 8)))]
        assert dedup(dets) == suppress(dets, 1.0)


# ------------------------------------------------------------------ matching


def test_match_identity_and_empty():
    gts = [gt(0, 1, 1), gt(1, 5, 5), gt(0, -3, 2)]
    preds = [det(g.class_id, 1.0, g.box[0], g.box[1]) for g in gts]
    for thr in (0.25, 0.5, 1.0, 2.0):
        r = match_detections(preds, gts, thr)
        assert sorted(r.matches) == [(0, 0), (1, 1), (2, 2)] and not r.false_positives and not r.false_negatives
    r = match_detections([], gts, 1.0)
    assert r.matches == [] and r.false_negatives == [0, 1, 2]


def test_match_against_greedy_oracle():
    r = np.random.default_rng(0)
    for _ in range(200):
        preds, gts = random_case(r)
        for thr in (0.25, 0.5, 1.0, 2.0):
            res = match_detections(preds, gts, thr)
            m, fp, fn = greedy_match(preds, gts, thr)
            assert sorted(res.matches) == sorted(m) and res.false_positives == fp and res.false_negatives == fn
            assert len(res.matches) + len(res.false_negatives) == len(gts)
            assert len(res.matches) + len(res.false_positives) == len(preds)


# ------------------------------------------------------------------ AP


def frame(preds, gts, thresholds=(1.0,)):
    return evaluate_frames([preds], [gts], thresholds)[0]


def test_ap_hand_cases():
    g = [gt(0, 0, 0), gt(0, 5, 5)]
    perfect = frame([det(0, 0.9, 0, 0), det(0, 0.8, 5, 5)], g)
    assert average_precision([perfect], 0, 1.0) == 1.0
    fp_tp = frame([det(0, 0.9, 9, 9), det(0, 0.5, 0, 0)], [gt(0, 0, 0)])
    assert average_precision([fp_tp], 0, 1.0) == 0.5
    trailing = frame([det(0, 0.9, 9, 9), det(0, 0.5, 0, 0), det(0, 0.1, -9, -9)], [gt(0, 0, 0)])
    assert average_precision([trailing], 0, 1.0) == 0.5
    assert average_precision([perfect], 3, 1.0) is None
    assert ap_from_ranked([], [], 3) == 0.0
    with pytest.raises(ContractError):
        ap_from_ranked([0.5], [True], 0)


def test_ap_against_exact_oracle_and_rescaling():
    r = np.random.default_rng(1)
    for _ in range(200):
        frames = [frame(*random_case(r)) for _ in range(int(r.integers(1, 4)))]
        for c in (0, 1):
            got = average_precision(frames, c, 1.0)
            conf = [p.confidence for fe in frames for p in fe.preds if p.class_id == c]
            tps = []
            for fe in frames:
                matched = {i for i, _ in fe.matchings[1.0].matches}
                tps += [i in matched for i, p in enumerate(fe.preds) if p.class_id == c]
            n_gt = sum(g.class_id == c for fe in frames for g in fe.gts)
            if n_gt == 0:
                assert got is None
                continue
            assert got == float(exact_ap(conf, tps, n_gt))
            assert ap_from_ranked([3.7 * x for x in conf], tps, n_gt) == got


# ------------------------------------------------------------------ errors and composite


def test_tp_error_cases():
    g = gt(0, 1, 2, size=(2.0, 4.0, 1.5), yaw=0.3, vel=(1.0, 0.0), moving=True)
    perfect = det(0, 0.9, 1, 2, size=(2.0, 4.0, 1.5), yaw=0.3, vel=(1.0, 0.0), moving=0.9)
    assert tp_error_means([frame([perfect], [g])]).values == {k: 0.0 for k in ("mate", "mase", "maoe", "mave", "maae")}
    wide = det(0, 0.9, 1, 2, size=(4.0, 4.0, 1.5), yaw=0.3, vel=(1.0, 0.0), moving=0.9)
    assert tp_error_means([frame([wide], [g])]).values["mase"] == pytest.approx(0.5)
    turned = det(0, 0.9, 1, 2, size=(2.0, 4.0, 1.5), yaw=0.3 + math.pi / 2, vel=(1.0, 0.0), moving=0.9)
    assert tp_error_means([frame([turned], [g])]).values["maoe"] == pytest.approx(math.pi / 2)
    none = tp_error_means([frame([], [g])])
    assert none.no_matches and set(none.values.values()) == {1.0}


def test_composite_cases():
    zero = dict.fromkeys(("mate", "mase", "maoe", "mave", "maae"), 0.0)
    assert composite_score(1.0, zero) == 1.0
    assert composite_score(0.0, dict.fromkeys(zero, 1.5)) == 0.0
    assert composite_score(0.6, dict.fromkeys(zero, 0.4)) == pytest.approx(0.6)


# ------------------------------------------------------------------ model-level protocols


@pytest.fixture(scope="module")
def tiny():
    cfg = RunConfig(seed=4)
    cfg.world.splits = {"train": 20, "val": 2, "test": 20}
    cfg.model.hidden = 32
    ds = build_dataset(cfg)
    return cfg, ds, build_model(cfg.model, cfg.world.n_classes)


def test_untrained_reports_are_finite_and_deterministic(tiny):
    cfg, ds, model = tiny
    rep = eval_standard(model, cfg, ds["test"]).to_json()
    assert 0.0 <= rep["map"] <= 1.0 and 0.0 <= rep["composite"] <= 1.0
    assert all(rep[k] >= 0 for k in ("mate", "mase", "maoe", "mave", "maae"))
    assert eval_standard(model, cfg, ds["test"]).to_json() == rep
    weather = eval_weather(model, cfg, ds["test"]).per_condition
    assert list(weather) == ["normal", "fog", "rain", "snow", "total"]
    drop = eval_dropout(model, cfg, ds["test"]).per_subset
    assert len(drop) == len(cfg.eval.subsets) and all(0.0 <= v <= 1.0 for v in drop.values())


def test_all_background_gives_no_detections(tiny):
    cfg, ds, model = tiny
    bias = model.params["detect.cls.bias"]
    saved = bias.data.copy()
    bias.data[-1] = 1e3
    try:
        assert predict_frame(model, ds["test"].records[0].frames[0]) == []
    finally:
        bias.data = saved


def test_subset_mask_equals_feature_level_masking(tiny):
    cfg, ds, model = tiny
    frames = [f for r in ds["test"].records[:4] for f in r.frames]
    for subset in all_subsets():
        mask = subset_mask(subset)
        stripped = [
            replace(f, available={m: (f.available[m] if m in subset else np.zeros_like(f.available[m])) for m in MODALITIES})
            for f in frames
        ]
        assert predict_frames(model, frames, mask) == predict_frames(model, stripped)
    with pytest.raises(AvailabilityError):
        predict_frames(model, frames, np.zeros(5, bool))
    with pytest.raises(ConfigError):
        subset_mask(("sonar",))


def test_protocols_reject_foreign_manifest(tiny):
    cfg, ds, model = tiny
    other = RunConfig(seed=5)
    other.world.splits = cfg.world.splits
    with pytest.raises(ManifestError):
        eval_standard(model, other, ds["test"])


def test_zero_shot_prototypes_and_chance_level(tiny):
    cfg, ds, model = tiny
    z = np.array([[0.6, 0.8]])
    np.testing.assert_allclose(class_prototypes({"lidar": (z, np.array([2]))}, 6)[2], z[0])
    acc = eval_zero_shot(model, cfg, ds["train"], ds["test"]).zero_shot_acc
    assert 0.0 <= acc <= 1.0
    no_holdout = replace(ds["train"], holdout=[])
    with pytest.raises(ConfigError):
        eval_zero_shot(model, cfg, no_holdout, ds["test"])


def test_untrained_zero_shot_is_near_chance():
    # full-width default model on the default test split, averaged over three init seeds
    accs = []
    for seed in range(3):
        cfg = RunConfig(seed=seed)
        cfg.world.splits = {"train": 100, "val": 1, "test": 100}
        ds = build_dataset(cfg)
        accs.append(eval_zero_shot(build_model(cfg.model, 6, seed=seed), cfg, ds["train"], ds["test"]).zero_shot_acc)
    assert abs(np.mean(accs) - 1 / 6) <= 0.1
