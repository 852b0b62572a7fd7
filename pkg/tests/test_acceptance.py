"""Acceptance suite: one PASS/FAIL line per criterion, printed in the
terminal summary under "acceptance criteria"."""

import json
import time

import numpy as np

from detensemble.cli import main
from detensemble.dataset import from_xywh, load_bundle
from detensemble.evaluation import average_precision
from detensemble.fusion import Cluster, WeightVector, fuse_cluster
from detensemble.pipeline import (ENSEMBLE_NAME, NMS_NAME, REFINED_NAME, PipelineConfig,
                                  cv_video, run_split)
from detensemble.refine import frames_from_bundle, stage1_fill_gaps, stage2_prune_short_tracks
from detensemble.synthetic import (DetectorProfile, generate, inject_dropouts, make_scene,
                                   make_video)
from detensemble.training import TrainConfig, mse, mse_gradient, train_weights

from conftest import det, gt
from oracles import brute_force_ap, random_ap_instance
from test_refine import recovered, video
from test_training import W_STAR, exact_linear_pairs, lstsq_oracle, random_pairs

# three detectors with distinct localisation noise and score miscalibration
PROFILE_SET = [
    DetectorProfile(jitter_sigma=0.06, miss_prob=0.05, fp_rate=1.5, score_bias=0.05,
                    score_noise_sigma=0.05),
    DetectorProfile(jitter_sigma=0.07, miss_prob=0.05, fp_rate=1.5, score_bias=0.10,
                    score_noise_sigma=0.05),
    DetectorProfile(jitter_sigma=0.08, miss_prob=0.05, fp_rate=1.5, score_bias=-0.05,
                    score_noise_sigma=0.05),
]


def cli(*argv):
    return main([str(a) for a in argv])


def test_criterion_1_external_dump(tmp_path, record_criterion):
    # a dump written by some other tool: plain json, boxes as [x, y, width, height]
    rng = np.random.default_rng(0)
    images, truth, foreign = [], [], []
    for k in range(150):
        image_id = f"voc_{k:04d}"
        images.append({"image_id": image_id, "width": 500, "height": 375, "frame_index": None})
        for _ in range(int(rng.integers(1, 4))):
            x, y = rng.integers(0, 300), rng.integers(0, 200)
            w, h = rng.integers(40, 190), rng.integers(40, 170)
            c = int(rng.integers(0, 2))
            truth.append({"image_id": image_id, "class_id": c,
                          "bbox": [int(x), int(y), int(x + w), int(y + h)]})
            for j in range(2):
                dx, dy = rng.integers(-4, 5, 2)
                foreign.append({"image_id": image_id, "category_id": c, "source": j,
                                "bbox_xywh": [int(x + dx), int(y + dy), int(w), int(h)],
                                "score": round(float(rng.uniform(0.3, 1.0)), 3)})
    detections = []
    for rec in foreign:
        box = from_xywh(*rec["bbox_xywh"])
        detections.append({"image_id": rec["image_id"], "detector_id": rec["source"],
                           "class_id": rec["category_id"], "score": rec["score"],
                           "bbox": list(box.as_tuple())})
    doc = {"detector_names": ["ssd", "yolo"], "class_names": ["person", "car"],
           "images": images, "detections": detections, "ground_truth": truth}
    (tmp_path / "dump.json").write_text(json.dumps(doc))
    gt_doc = {**doc, "detections": []}
    (tmp_path / "gt.json").write_text(json.dumps(gt_doc))
    (tmp_path / "train.json").write_text(json.dumps([im["image_id"] for im in images[:100]]))

    loaded = load_bundle(tmp_path / "dump.json")
    converted_ok = len(loaded.detections) == len(foreign) and all(
        d.box.width == r["bbox_xywh"][2] for d, r in
        zip(sorted(loaded.detections, key=lambda d: (d.image_id, d.detector_id, -d.score)),
            sorted(foreign, key=lambda r: (r["image_id"], r["source"], -r["score"]))))
    codes = [
        cli("fuse-nms", "--in", tmp_path / "dump.json", "--out", tmp_path / "nms.json"),
        cli("train", "--in", tmp_path / "dump.json", "--train-ids", tmp_path / "train.json",
            "--weights-out", tmp_path / "w.json", "--lr", "1e-3"),
        cli("fuse", "--in", tmp_path / "dump.json", "--weights", tmp_path / "w.json",
            "--out", tmp_path / "fused.json"),
        cli("eval", "--in", tmp_path / "fused.json", "--gt", tmp_path / "gt.json",
            "--report", tmp_path / "report.json"),
    ]
    report = json.loads((tmp_path / "report.json").read_text())
    map50 = report["all"]["map"]["0.5"]
    ok = converted_ok and codes == [0, 0, 0, 0] and map50 > 0.9
    record_criterion(1, ok, f"external xywh dump loaded ({len(foreign)} detections), "
                            f"fuse-nms/train/fuse/eval exit codes {codes}, fused MAP@0.5={map50:.4f}")


def test_criterion_2_ordering(record_criterion):
    start = time.perf_counter()
    config = PipelineConfig()
    maps = {t: {m: [] for m in ("best", NMS_NAME, ENSEMBLE_NAME)} for t in (0.75, 0.85)}
    for seed in range(5):
        bundle = generate(make_scene(300, seed=seed), PROFILE_SET, seed=seed)
        ids = [im.image_id for im in bundle.images]
        res = run_split(bundle, ids[:100], ids[100:], config)
        for t in maps:
            singles = [res.reports[n].map[t] for n in bundle.detector_names]
            maps[t]["best"].append(singles)
            maps[t][NMS_NAME].append(res.reports[NMS_NAME].map[t])
            maps[t][ENSEMBLE_NAME].append(res.reports[ENSEMBLE_NAME].map[t])
    elapsed = time.perf_counter() - start
    mean = {}
    for t, by in maps.items():
        best_single = 100 * float(np.max(np.mean(by["best"], axis=0)))
        mean[t] = (best_single, 100 * float(np.mean(by[NMS_NAME])),
                   100 * float(np.mean(by[ENSEMBLE_NAME])))
    ordered = all(e >= n >= b for b, n, e in mean.values())
    margin = mean[0.85][2] - mean[0.85][1]
    ok = ordered and margin >= 1.0 and elapsed < 60
    detail = "; ".join(f"@{t}: ensemble {e:.2f} >= nms {n:.2f} >= best single {b:.2f}"
                       for t, (b, n, e) in mean.items())
    record_criterion(2, ok, f"{detail}; ensemble-nms@0.85 = {margin:+.2f} (need >= +1.0); "
                            f"{elapsed:.1f}s (need < 60s)")


def test_criterion_3_weight_recovery(record_criterion):
    pairs = exact_linear_pairs(500)
    oracle = lstsq_oracle(pairs)
    start = time.perf_counter()
    w, report = train_weights(pairs, TrainConfig(learning_rate=1e-3, prediction_rule="linear"))
    elapsed = time.perf_counter() - start
    err_oracle = float(np.max(np.abs(w.as_array() - oracle)))
    err_star = float(np.max(np.abs(w.as_array() - W_STAR)))
    ok = err_star <= 1e-3 and err_oracle <= 1e-3 and elapsed < 5
    record_criterion(3, ok, f"|w-w*|inf={err_star:.2e}, |w-lstsq|inf={err_oracle:.2e} "
                            f"(need <= 1e-3), {report.epochs} epochs in {elapsed:.2f}s (need < 5s)")


def test_criterion_4_gradient(record_criterion):
    rng = np.random.default_rng(42)
    pairs = random_pairs(100, all_present=False, seed=42)
    h = 1e-6
    worst = {}
    for rule in ("linear", "normalized"):
        errs = []
        for _ in range(10):
            w = rng.uniform(0.2, 1.0, 3)
            analytic = mse_gradient(pairs, w, rule)
            numeric = np.array([(mse(pairs, w + h * e, rule) - mse(pairs, w - h * e, rule)) / (2 * h)
                                for e in np.eye(3)])
            errs.append(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-12)))
        worst[rule] = float(max(errs))
    ok = all(v < 1e-4 for v in worst.values())
    record_criterion(4, ok, ", ".join(f"{r}: max rel err {v:.1e}" for r, v in worst.items())
                     + " (need < 1e-4) on 100 pairs")


def test_criterion_5_ap_oracle(record_criterion):
    hand = [
        average_precision([det(0, 0, 10, 10, 0.9)], [gt(0, 0, 10, 10)]),
        average_precision([det(50, 50, 60, 60, 0.9), det(0, 0, 10, 10, 0.8)], [gt(0, 0, 10, 10)]),
        average_precision([det(0, 0, 10, 10, 0.9)], [gt(0, 0, 10, 10), gt(50, 50, 60, 60)]),
    ]
    hand_ok = hand == [1.0, 0.5, 0.5]
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        dets, gts = random_ap_instance(rng)
        worst = max(worst, abs(average_precision(dets, gts, 0.5) - brute_force_ap(dets, gts, 0.5)))
    ok = hand_ok and worst <= 1e-12
    record_criterion(5, ok, f"hand cases {hand} (expect [1.0, 0.5, 0.5]); "
                            f"max |AP - oracle| = {worst:.1e} over 1000 instances (need <= 1e-12)")


def random_cluster(rng):
    k = int(rng.integers(1, 6))
    D = 5
    ids = rng.choice(D, size=k, replace=False)
    members = {}
    for j in ids:
        x, y = rng.uniform(0, 500, 2)
        w, h = rng.uniform(1, 200, 2)
        members[int(j)] = det(x, y, x + w, y + h, float(rng.uniform(0.05, 1.0)), int(j))
    seed = max(members.values(), key=lambda m: m.score).detector_id
    return Cluster(0, members, seed), rng.uniform(0.1, 3.0, D)


def test_criterion_6_fusion_algebra(record_criterion):
    rng = np.random.default_rng(6)
    failures = {"envelope": 0, "rescaling": 0, "midpoint": 0, "single": 0}
    for _ in range(10_000):
        cluster, w = random_cluster(rng)
        weights = WeightVector(tuple(w))
        out = fuse_cluster(cluster, weights)
        coords = np.array([m.box.as_tuple() for m in cluster.members.values()])
        fused = np.array(out.box.as_tuple())
        if np.any(fused < coords.min(0) - 1e-9) or np.any(fused > coords.max(0) + 1e-9):
            failures["envelope"] += 1
        k = float(rng.uniform(0.01, 100))
        scaled = fuse_cluster(cluster, WeightVector(tuple(k * w)))
        if (np.max(np.abs(np.array(scaled.box.as_tuple()) - fused)) > 1e-9
                or abs(scaled.score - out.score) > 1e-9):
            failures["rescaling"] += 1
        if len(cluster) == 1:
            (m,) = cluster.members.values()
            if np.max(np.abs(fused - np.array(m.box.as_tuple()))) > 1e-9:
                failures["single"] += 1
        a, b = list(cluster.members.values())[:2] if len(cluster) >= 2 else (None, None)
        if a is not None:
            s = a.score
            pair = Cluster(0, {0: det(*a.box.as_tuple(), s, 0), 1: det(*b.box.as_tuple(), s, 1)}, 0)
            mid = fuse_cluster(pair, WeightVector((w[0], w[0])))
            expect = (np.array(a.box.as_tuple()) + np.array(b.box.as_tuple())) / 2
            if np.max(np.abs(np.array(mid.box.as_tuple()) - expect)) > 1e-9:
                failures["midpoint"] += 1
    hand = fuse_cluster(Cluster(0, {0: det(10, 10, 20, 20, 0.8, 0), 1: det(14, 10, 24, 20, 0.5, 1)}, 0),
                        WeightVector((2.0, 1.0)))
    x1 = (0.8 * 2 * 10 + 0.5 * 1 * 14) / (0.8 * 2 + 0.5 * 1)
    hand_ok = abs(hand.box.x1 - x1) <= 1e-9 and abs(hand.score - 0.7) <= 1e-9
    ok = hand_ok and not any(failures.values())
    record_criterion(6, ok, f"violations on 10000 clusters {failures}; hand example "
                            f"x1={hand.box.x1:.7f} (~10.9524), score={hand.score:.9f} (0.7)")


def test_criterion_7_tracking(record_criterion):
    box = (0, 0, 10, 10)
    gap = stage1_fill_gaps(video([[] if f in (5, 6) else [(2 * f, 0, 2 * f + 40, 40)]
                                  for f in range(10)], score=0.7))
    rec = recovered(gap)
    gap_ok = ([k for k, _ in rec] == [5, 6]
              and rec[0][1].box.as_tuple() == (9.875, 0, 49.875, 40)
              and rec[1][1].box.as_tuple() == (11.75, 0, 51.75, 40))
    death_ok = recovered(stage1_fill_gaps(video([[box]] + [[]] * 6 + [[box]]))) == []
    kept = stage2_prune_short_tracks(video([[box]] * 5 + [[]]))
    pruned = stage2_prune_short_tracks(video([[box]] * 4 + [[]]))
    prune_ok = (sum(len(f.detections) for f in kept) == 5
                and sum(len(f.detections) for f in pruned) == 0)

    invariant_ok = True
    for seed in range(100):
        b = generate(make_video(40, seed=seed, n_objects=3),
                     [DetectorProfile(miss_prob=0.2, fp_rate=1.0)], seed=seed)
        frames = frames_from_bundle(b)
        s1 = stage1_fill_gaps(frames)
        s2 = stage2_prune_short_tracks(s1)
        for f, a, c in zip(frames, s1, s2):
            orig = {id(d) for d in f.detections}
            after1 = {id(d) for d in a.detections}
            invariant_ok &= orig <= after1
            invariant_ok &= all(d.recovered for d in a.detections if id(d) not in orig)
            invariant_ok &= {id(d) for d in c.detections} <= after1

    profiles = [DetectorProfile(jitter_sigma=0.04, miss_prob=0.05, fp_rate=0.3),
                DetectorProfile(jitter_sigma=0.06, miss_prob=0.05, fp_rate=0.3, score_bias=0.05)]
    gains = []
    for seed in range(3):
        b = inject_dropouts(generate(make_video(1000, seed=seed), profiles, seed=seed),
                            seed=seed, rate=0.03)
        res = cv_video(b, PipelineConfig(seed=seed))
        gains.append((100 * res.mean[ENSEMBLE_NAME].map[0.5], 100 * res.mean[REFINED_NAME].map[0.5]))
    dropout_ok = all(after >= before for before, after in gains)
    ok = gap_ok and death_ok and prune_ok and invariant_ok and dropout_ok
    record_criterion(7, ok, f"gap fill {gap_ok}, death {death_ok}, 5-kept/4-pruned {prune_ok}, "
                            f"invariants on 100 videos {invariant_ok}, MAP@0.5 before->after "
                            + ", ".join(f"{a:.2f}->{b:.2f}" for a, b in gains))


def run_every_command(out, seed=3):
    """Run each CLI command once, writing everything under ``out``."""
    out.mkdir()
    fast = ["--lr", "0.05", "--max-epochs", "200", "--seed", seed]
    profiles = out / "profiles.json"
    profiles.write_text(json.dumps([p.to_dict() for p in PROFILE_SET]))
    (out / "train.txt").write_text("\n".join(f"img{k:05d}" for k in range(40)))
    steps = [
        ("make-scene", "--images", 120, "--out", out / "scene.json", "--seed", seed),
        ("synth", "--gt", out / "scene.json", "--profiles", profiles, "--out", out / "dets.json",
         "--seed", seed),
        ("fuse-nms", "--in", out / "dets.json", "--out", out / "nms.json", "--threads", 2),
        ("train", "--in", out / "dets.json", "--train-ids", out / "train.txt",
         "--weights-out", out / "w.json", *fast),
        ("fuse", "--in", out / "dets.json", "--weights", out / "w.json", "--out", out / "fused.json",
         "--threads", 2),
        ("eval", "--in", out / "fused.json", "--gt", out / "scene.json", "--report", out / "eval.json"),
        ("cv-image", "--in", out / "dets.json", "--report", out / "cv.json", "--folds", 2,
         "--train-size", 40, *fast),
        ("make-video", "--frames", 150, "--out", out / "video.json", "--seed", seed),
        ("synth", "--gt", out / "video.json", "--profiles", profiles, "--out", out / "vdets.json",
         "--dropout-rate", 0.03, "--seed", seed),
        ("refine", "--in", out / "vdets.json", "--out", out / "refined.json"),
        ("cv-video", "--in", out / "vdets.json", "--report", out / "cvv.json", "--segments", 2,
         "--train-tail", 40, *fast),
    ]
    return [cli(*s) for s in steps]


def test_criterion_8_determinism(tmp_path, record_criterion):
    codes_a = run_every_command(tmp_path / "a")
    codes_b = run_every_command(tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    differ = [n for n in names if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    ok = codes_a == codes_b == [0] * len(codes_a) and not differ and len(names) >= 15
    record_criterion(8, ok, f"{len(codes_a)} commands twice, {len(names)} output files, "
                            f"differing: {differ or 'none'}")
