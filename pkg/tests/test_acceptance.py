"""End-to-end acceptance runs, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(and immediately, uncaptured). The training criteria run the default
configuration and take several minutes each.
"""
import json
import time

import numpy as np
import pytest

from acol import acol_net as net
from acol import audit, cli
from acol import tensor_core as tc
from acol.localization import iou, largest_connected_component
from acol.synthdata import SynthConfig, generate
from acol.trainer import TrainConfig, evaluate_model, train
from conftest import ACCEPTANCE
from oracles import flood_fill_largest, iou_by_enumeration, naive_conv, random_box, random_conv

# every metrics dict produced during the acceptance run, checked by criterion 8
ALL_METRICS: list[dict] = []


def report(n, ok, detail, capsys=None):
    ACCEPTANCE[n] = (bool(ok), detail)
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    assert ok, line


def test_criterion_1_map_equivalence(tmp_path, capsys):
    t = time.perf_counter()
    rc = cli.main(["verify", "--out", str(tmp_path)])
    rows = {r["name"]: r for r in json.loads((tmp_path / "verify.json").read_text())}
    seconds = rows["equivalence_f64"]["seconds"] + rows["equivalence_f32"]["seconds"]
    f64, f32 = rows["equivalence_f64"]["error"], rows["equivalence_f32"]["error"]
    ok = rc == 0 and f64 <= 1e-12 and f32 <= 1e-5 and seconds < 10
    report(
        1,
        ok,
        f"f64 worst {f64:.1e} (<=1e-12), f32 worst {f32:.1e} (<=1e-5), 100 heads each, "
        f"{seconds:.2f}s; verify total {time.perf_counter() - t:.1f}s",
        capsys,
    )


def test_criterion_2_gradient_audit(capsys):
    t = time.perf_counter()
    names = ["conv2d", "relu", "maxpool2", "gap", "softmax_ce", "full_network"]
    checks = audit.run_all(names)
    seconds = time.perf_counter() - t
    worst = max(c.error for c in checks)
    ok = all(c.passed for c in checks) and seconds < 120
    per = ", ".join(f"{c.name} {c.error:.0e}" for c in checks)
    report(2, ok, f"worst rel err {worst:.1e} (<=1e-4), 32 probes/tensor, {seconds:.1f}s (<120s): {per}", capsys)


def test_criterion_3_oracles(capsys):
    rng = np.random.default_rng(2024)
    cc_bad = 0
    for _ in range(1000):
        mask = rng.random((16, 16)) < rng.uniform(0.2, 0.7)
        cc_bad += not np.array_equal(largest_connected_component(mask), flood_fill_largest(mask))
    iou_bad = 0
    for _ in range(1000):
        a, b = random_box(rng), random_box(rng)
        iou_bad += iou(a, b) != float(iou_by_enumeration(a, b))
    conv_bad = 0
    cont_worst = 0.0
    for i in range(100):
        k, pad = ((3, 1), (1, 0))[i % 2]
        stride = 1 + (i % 3 == 2)
        # dyadic values make every partial sum exact, so any summation order gives the same bits
        x, p = random_conv(rng, k=k, pad=pad, stride=stride, h=7, dyadic=True)
        conv_bad += not np.array_equal(tc.conv2d_forward(x, p), naive_conv(x, p.weight, p.bias, stride, pad))
        x, p = random_conv(rng, k=k, pad=pad, stride=stride, h=7)
        cont_worst = max(cont_worst, float(np.abs(tc.conv2d_forward(x, p) - naive_conv(x, p.weight, p.bias, stride, pad)).max()))
    ok = cc_bad == 0 and iou_bad == 0 and conv_bad == 0 and cont_worst <= 1e-12
    report(
        3,
        ok,
        f"components {1000 - cc_bad}/1000, iou {1000 - iou_bad}/1000, conv exact {100 - conv_bad}/100 "
        f"(continuous inputs worst {cont_worst:.1e})",
        capsys,
    )


@pytest.fixture(scope="module")
def default_data():
    return generate(SynthConfig(), seed=7)


def test_criterion_4_erasing_contract(default_data, capsys):
    cfg = TrainConfig(epochs=1, warmup_epochs=0, patience=0)
    stats = {"steps": 0, "erased": 0, "bad_zero": 0, "bad_grad": 0, "bad_nest": 0, "probe_bad": 0}
    rng = np.random.default_rng(0)

    def hook(record, labels, grads, parts):
        stats["steps"] += 1
        m = record.mask
        stats["erased"] += int(m.sum())
        stats["bad_zero"] += int(record.S_erased.transpose(0, 2, 3, 1)[m].any())
        g_b = parts["grad_S_from_b"].transpose(0, 2, 3, 1)
        stats["bad_grad"] += int(g_b[m].any())
        h1 = record.S.shape[2]
        for i, c in enumerate(labels):
            m6 = net.make_erase_mask(record.maps_a[i, c], 0.6, h1)
            m8 = net.make_erase_mask(record.maps_a[i, c], 0.8, h1)
            stats["bad_nest"] += int((m8 & ~m6).any())
            stats["bad_zero"] += int(not np.array_equal(m6, m[i]))
        # probe: perturbing S at an erased cell leaves branch B's input, hence its loss, unchanged
        if m.any():
            n, y, x = np.argwhere(m)[rng.integers(m.sum())]
            s2 = record.S.copy()
            s2[n, :, y, x] += 1.0
            stats["probe_bad"] += int(not np.array_equal(net.erase_features(s2, m), record.S_erased))

    train(default_data[0], cfg, step_hook=hook)
    ok = stats["steps"] > 0 and stats["erased"] > 0 and not any(
        stats[k] for k in ("bad_zero", "bad_grad", "bad_nest", "probe_bad")
    )
    report(
        4,
        ok,
        f"{stats['steps']} steps, {stats['erased']} erased cells; violations: zeroing {stats['bad_zero']}, "
        f"B-gradient {stats['bad_grad']}, nesting {stats['bad_nest']}, probes {stats['probe_bad']}",
        capsys,
    )


@pytest.fixture(scope="module")
def default_runs(default_data, tmp_path_factory):
    root = tmp_path_factory.mktemp("default")
    out = []
    for name in ("a", "b"):
        t = time.perf_counter()
        res = train(default_data[0], TrainConfig(), root / name)
        out.append((res, time.perf_counter() - t, root / name))
    return out


def test_criterion_5_desk_scale_training(default_data, default_runs, capsys):
    (res, secs, dir_a), (_, secs_b, dir_b) = default_runs
    fused, base = evaluate_model(res.params, default_data[1], TrainConfig())
    ALL_METRICS.extend([fused.to_json(), base.to_json()])
    files = sorted(p.name for p in dir_a.iterdir())
    identical = files == sorted(p.name for p in dir_b.iterdir()) and all(
        (dir_a / f).read_bytes() == (dir_b / f).read_bytes() for f in files
    )
    ok = fused.cls_err <= 0.05 and len(res.history) <= 30 and max(secs, secs_b) <= 900 and identical
    report(
        5,
        ok,
        f"cls_err {fused.cls_err:.3f} (<=0.05) after {len(res.history)} epochs, train {secs:.0f}s/{secs_b:.0f}s "
        f"(<=900s), {len(files)} output files bitwise identical: {identical}",
        capsys,
    )


def test_criterion_6_complementarity(capsys):
    rows = []
    for seed in range(1, 6):
        tr_set, te_set, _ = generate(SynthConfig(), seed=seed)
        cfg = TrainConfig(seed=seed)
        res = train(tr_set, cfg)
        fused, base = evaluate_model(res.params, te_set, cfg)
        ALL_METRICS.extend([fused.to_json(), base.to_json()])
        rows.append((seed, fused.gt_known_loc_err, base.gt_known_loc_err))
    wins = [s for s, f, a in rows if a - f >= 0.05]
    detail = "; ".join(f"seed {s}: fused {f:.3f} vs A {a:.3f}" for s, f, a in rows)
    report(6, len(wins) >= 4, f"{len(wins)}/5 seeds with fused >= 5pp better ({detail})", capsys)


def test_criterion_7_delta_sweep(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(data), "--seed", "7", "--num-train", "200", "--num-test", "100"]) == 0
    rc = cli.main([
        "sweep", "--data", str(data), "--out", str(tmp_path / "sweep"), "--seed", "7",
        "--deltas", "0.5,0.6,0.7,0.8,0.9", "--epochs", "2", "--patience", "0", "--warmup-epochs", "0",
    ])
    rows = json.loads((tmp_path / "sweep" / "sweep.json").read_text())
    keys = {"delta", "top1_loc_err", "top5_loc_err", "gt_known_loc_err"}
    complete = [r for r in rows if keys <= set(r)]
    for r in complete:
        ALL_METRICS.append({k: r[k] for k in ("top1_loc_err", "top5_loc_err", "gt_known_loc_err")})
    deltas = [r["delta"] for r in rows]
    ok = rc == 0 and len(complete) == 5 and deltas == [0.5, 0.6, 0.7, 0.8, 0.9]
    report(7, ok, f"{len(complete)}/5 complete rows for deltas {deltas}", capsys)


def test_criterion_8_pipeline_consistency(default_runs, tmp_path, capsys):
    (res, _, run_dir), _ = default_runs
    ckpt = sorted(run_dir.glob("ckpt_ep*.acol"))[-1]
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(data), "--seed", "7"]) == 0
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(tmp_path / "ev")]) == 0
    details = [json.loads(l) for l in (tmp_path / "ev" / "samples.jsonl").read_text().splitlines()]
    for name in ("metrics.json", "metrics_branch_a.json"):
        ALL_METRICS.append(json.loads((tmp_path / "ev" / name).read_text()))
    ids = [0, 1, 57, 99, 100, 150, 199]
    assert cli.main([
        "localize", "--data", str(data), "--ckpt", str(ckpt), "--out", str(tmp_path / "loc"),
        "--ids", ",".join(map(str, ids)),
    ]) == 0
    mismatched = 0
    for i in ids:
        doc = json.loads((tmp_path / "loc" / f"test_{i:06d}.json").read_text())
        mismatched += doc["pred_box"] != details[i]["pred_box"]
        mismatched += doc["gt_known_box"] != details[i]["gt_known_box"]
    bad_metrics = [
        m for m in ALL_METRICS
        if not (m["gt_known_loc_err"] <= m["top1_loc_err"] and m["top5_loc_err"] <= m["top1_loc_err"])
    ]
    ok = mismatched == 0 and not bad_metrics
    report(
        8,
        ok,
        f"{len(ids)} localize/eval box pairs, {mismatched} mismatches; "
        f"{len(ALL_METRICS) - len(bad_metrics)}/{len(ALL_METRICS)} metric reports ordered",
        capsys,
    )
