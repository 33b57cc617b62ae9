"""Acceptance suite: every release criterion at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS/FAIL line
per criterion.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import integrate
from sklearn.metrics import adjusted_rand_score

from emucascade import autodiff as ad
from emucascade.cli import EXIT_OK, main
from emucascade.ewscam import ClusterParams, cluster_probabilities, kruskal_mst
from emucascade.gnn import (
    GraphTensors,
    ModelConfig,
    edgeconv_forward,
    emulsionconv_forward,
    focal_loss,
    graph_loss,
    init_model,
    roc_auc,
)
from emucascade.graphbuild import build_graph, int_dist, pair_energy_likeliness
from emucascade.recon import (
    HuberEnergyRegressor,
    categorize_showers,
    energy_resolution,
)
from emucascade.toygen import ES_MEV, X0_MM, GenConfig, ShowerTruth, gen_brick, sample_scatter
from emucascade.tracks import BaseTrack

from helpers import block_params, chain_track_graph, make_graph, passthrough_block_params


def report(number, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {number:2d} {name}: {status}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {number} ({name}) failed: {detail}"


def trk(tid, x, y, z, tx, ty, shower=-1):
    return BaseTrack(x=x, y=y, z=z, tx=tx, ty=ty, track_id=tid, shower_id=shower)


# ---------------------------------------------------------------------------


def test_criterion_01_integral_distance_quadrature():
    rng = np.random.default_rng(1001)
    t0 = time.time()
    worst = 0.0
    for _ in range(1000):
        a = trk(0, rng.uniform(-60000, 60000), rng.uniform(-45000, 45000),
                1293.0 * rng.integers(0, 58), rng.normal(scale=0.2), rng.normal(scale=0.2))
        b = trk(1, rng.uniform(-60000, 60000), rng.uniform(-45000, 45000),
                1293.0 * rng.integers(0, 58), rng.normal(scale=0.2), rng.normal(scale=0.2))
        closed = int_dist(a, b)
        ka = (a.z, a.x, a.y, a.tx, a.ty)
        kb = (b.z, b.x, b.y, b.tx, b.ty)
        t1, t2 = (a, b) if ka <= kb else (b, a)
        zl, zh = sorted((t1.z, t2.z))
        oracle = 0.0
        for c1, c2, s1, s2 in ((t1.x, t2.x, t1.tx, t2.tx), (t1.y, t2.y, t1.ty, t2.ty)):
            aa = s2 - s1
            bb = c1 - c2 + s2 * (t2.z - t1.z)
            pts = [bb / aa] if aa != 0 and zl < bb / aa < zh else None
            val, _ = integrate.quad(lambda zv: abs(aa * zv - bb), zl, zh,
                                    points=pts, limit=400, epsabs=1e-10, epsrel=1e-12)
            oracle += val
        worst = max(worst, abs(closed - oracle) / max(abs(oracle), 1e-9))
    elapsed = time.time() - t0
    report(1, "integral distance vs quadrature", worst <= 1e-9 and elapsed < 5.0,
           f"worst rel {worst:.2e}, {elapsed:.2f}s")


def test_criterion_02_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(1002)
    edges = [(i, j) for i in range(20) for j in (i + 1, i + 3) if j < 20]
    g = make_graph(20, edges, seed=1002)
    g.labels = rng.integers(0, 2, size=len(g.src)).astype(np.int8)
    cfg = ModelConfig(d_hidden=4, n_emulsion=1, n_edge=1, seed=7)
    model = init_model(cfg, edge_dim=6, train_graphs=[g])
    gt = GraphTensors(g)
    loss, tparams = graph_loss(model, gt, gamma=3.0)
    ad.backward(loss)
    step = 1e-4
    worst = 0.0
    n_checked = 0
    for name, arr in model.params.items():
        analytic = tparams[name].grad
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(graph_loss(model, gt, 3.0)[0].data)
            flat[i] = orig - step
            lo = float(graph_loss(model, gt, 3.0)[0].data)
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            an = analytic.reshape(-1)[i]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
            n_checked += 1
    elapsed = time.time() - t0
    report(2, "finite-difference gradients", worst <= 1e-4 and elapsed < 60.0,
           f"{n_checked} params, worst rel {worst:.2e}, {elapsed:.1f}s")


def test_criterion_03_receptive_field():
    n, d = 58, 4
    rng = np.random.default_rng(1003)
    g = chain_track_graph(n)
    gt = GraphTensors(g)
    h0 = rng.normal(size=(n, d))
    e = ad.const(rng.normal(size=(n - 1, d)))
    bumped = h0.copy()
    bumped[0] += 0.5

    sweep_params = passthrough_block_params(d)
    base = emulsionconv_forward(gt, ad.const(h0), e, sweep_params, "b0_").data
    out = emulsionconv_forward(gt, ad.const(bumped), e, sweep_params, "b0_").data
    emu_response = np.abs(out[57] - base[57]).max()

    local_params = block_params(d, rng)
    base_l = edgeconv_forward(gt, ad.const(h0), e, local_params, "b0_").data
    out_l = edgeconv_forward(gt, ad.const(bumped), e, local_params, "b0_").data
    one_hop = np.abs(out_l[1] - base_l[1]).max()
    beyond = np.abs(out_l[2:] - base_l[2:]).max()

    report(3, "receptive field", emu_response > 1e-12 and one_hop > 0 and beyond <= 1e-12,
           f"sweep response {emu_response:.3g}, local beyond-hop {beyond:.3g}")


def test_criterion_04_focal_loss():
    rng = np.random.default_rng(1004)
    p = rng.uniform(1e-6, 1 - 1e-6, size=10_000)
    y = rng.integers(0, 2, size=10_000)
    got = float(focal_loss(p, y, gamma=0.0).data)
    pc = np.clip(p, 1e-7, 1 - 1e-7)
    ce = float(np.mean(-np.log(np.where(y == 1, pc, 1 - pc))))
    closed = float(focal_loss(np.array([0.5]), np.array([1]), gamma=3.0).data)
    want = 0.5**3 * math.log(2.0)
    ok = abs(got - ce) <= 1e-12 and abs(closed - want) <= 1e-9
    report(4, "focal loss identities", ok, f"ce diff {abs(got - ce):.2e}, closed diff {abs(closed - want):.2e}")


def test_criterion_05_roc_auc_brute_force():
    rng = np.random.default_rng(1005)
    exact = True
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.choice([0.2, 0.4, 0.6, 0.8], size=n) if rng.random() < 0.5 else rng.random(n)
        num, den = 0.0, 0.0
        for i in range(n):
            for j in range(n):
                if labels[i] > labels[j]:
                    den += 1.0
                    if scores[i] > scores[j]:
                        num += 1.0
                    elif scores[i] == scores[j]:
                        num += 0.5
        if roc_auc(scores, labels) != num / den:
            exact = False
            break
    report(5, "ROC-AUC pairwise equality", exact)


def test_criterion_06_mst_weight_equality():
    import heapq

    rng = np.random.default_rng(1006)
    ok = True
    for _ in range(200):
        n = int(rng.integers(2, 501))
        m = int(rng.uniform(0.5, 3.0) * n)
        src = rng.integers(0, n, size=m)
        dst = rng.integers(0, n, size=m)
        keep = src != dst
        src, dst = src[keep], dst[keep]
        w = rng.integers(1, 100, size=len(src)).astype(float)
        kruskal_total = kruskal_mst(n, src, dst, w)[:, 2].sum() if len(src) else 0.0
        adj = [[] for _ in range(n)]
        for u, v, wt in zip(src, dst, w):
            adj[u].append((wt, int(v)))
            adj[v].append((wt, int(u)))
        seen = [False] * n
        prim_total = 0.0
        for s in range(n):
            if seen[s]:
                continue
            seen[s] = True
            heap = list(adj[s])
            heapq.heapify(heap)
            while heap:
                wt, v = heapq.heappop(heap)
                if seen[v]:
                    continue
                seen[v] = True
                prim_total += wt
                for item in adj[v]:
                    heapq.heappush(heap, item)
        if kruskal_total != prim_total:
            ok = False
            break
    report(6, "Kruskal vs Prim forest weight", ok)


def test_criterion_07_planted_partition_recovery():
    rng = np.random.default_rng(1007)
    hits = 0
    for _ in range(50):
        blocks = rng.permutation(np.repeat(np.arange(4), 10))
        src, dst, prob = [], [], []
        for i in range(40):
            for j in range(i + 1, 40):
                same = blocks[i] == blocks[j]
                if rng.random() < (0.9 if same else 0.05):
                    src.append(i)
                    dst.append(j)
                    prob.append(0.9 if same else 0.05)
        labels, _ = cluster_probabilities(40, np.array(src), np.array(dst), np.array(prob),
                                          ClusterParams(4, 0.2))
        if adjusted_rand_score(labels, blocks) == 1.0:
            hits += 1
    report(7, "planted 4-block recovery", hits >= int(0.95 * 50), f"{hits}/50 exact")


def test_criterion_08_shower_categories():
    def truth(n):
        return ShowerTruth(0, 0, 0, 0, 0, 0, 100.0, tuple(range(n)))

    def labels(counts, n):
        mapping = {}
        tid = 0
        for c, k in counts.items():
            for _ in range(k):
                mapping[tid] = c
                tid += 1
        while tid < n:
            mapping[tid] = -1
            tid += 1
        return mapping

    cases = (
        ({7: 95}, 100, "recovered"),
        ({1: 48, 2: 47}, 100, "broken"),
        ({}, 50, "lost"),
        ({3: 9}, 100, "lost"),
        ({1: 60, 2: 30}, 100, "stuck"),
    )
    ok = all(
        categorize_showers([truth(n)], labels(counts, n))[0].category == want
        for counts, n, want in cases
    )
    # partition property on random fixtures
    rng = np.random.default_rng(1008)
    for _ in range(100):
        n = int(rng.integers(1, 60))
        mapping = {i: int(rng.integers(-1, 6)) for i in range(n)}
        outcome = categorize_showers([truth(n)], mapping)
        ok = ok and len(outcome) == 1 and outcome[0].category in ("recovered", "broken", "stuck", "lost")
    report(8, "shower category definitions", ok)


def _pipeline_config(out_dir, max_epochs=120, patience=40, seed=42):
    return f"""
[run]
seed = {seed}
out_dir = {out_dir}

[gen]
n_bricks = 5
n_showers = 8
e_min = 100
e_max = 300
e_cutoff = 5
ionization_mev_per_layer = 4
origin_half_x_um = 45000
origin_half_y_um = 35000
max_slope = 0.2
min_origin_sep_um = 25000

[split]
train = 3
test = 1
val = 1

[model]
d_hidden = 16
n_emulsion = 3
n_edge = 5

[train]
lr = 1e-3
max_epochs = {max_epochs}
patience = {patience}

[cluster]
min_cluster_size = 4
threshold = 0.2

[eval]
bootstrap_resamples = 200
"""


def test_criterion_09_end_to_end_desk_run(tmp_path):
    cfg = tmp_path / "run.ini"
    out = tmp_path / "out"
    cfg.write_text(_pipeline_config(out))
    t0 = time.time()
    rc = main(["pipeline", "--config", str(cfg)])
    elapsed = time.time() - t0
    metrics = json.loads((out / "metrics.json").read_text())
    agg = metrics["aggregate"]
    ok = (
        rc == EXIT_OK
        and agg["val_roc_auc"] >= 0.9
        and agg["recovered_pct"] >= 70.0
        and elapsed <= 600.0
    )
    report(9, "end-to-end desk run",
           ok, f"val AUC {agg['val_roc_auc']:.4f}, recovered {agg['recovered_pct']:.1f}%, {elapsed:.0f}s")


def test_criterion_10_energy_pipeline():
    gen = GenConfig(n_showers=8, e_min=100, e_max=300, e_cutoff=5, ionization_mev_per_layer=4,
                    seed=77, origin_half_x_um=45000, origin_half_y_um=35000, max_slope=0.2,
                    min_origin_sep_um=25000)
    feats, energies = [], []
    from emucascade.ewscam import cluster as run_cluster

    for i in range(5):
        brick, truths = gen_brick(gen, brick_id=i)
        g = build_graph(brick)
        g.probabilities = g.labels.astype(float)
        labels, _ = run_cluster(g, ClusterParams(4, 0.2))
        lbt = {int(t): int(c) for t, c in zip(g.track_ids, labels)}
        outs = categorize_showers(truths, lbt)
        z = g.vertex_feats[:, 2]
        for t, o in zip(truths, outs):
            if o.category == "recovered" and o.matched_cluster_id is not None:
                m = labels == o.matched_cluster_id
                feats.append([float(z[m].max() - z[m].min()), float(z[m].min())])
                energies.append(t.e_true)
    feats = np.array(feats)
    energies = np.array(energies)
    model = HuberEnergyRegressor().fit(feats, energies)
    e_rec = model.predict(feats)
    er_all = energy_resolution(energies, e_rec)
    lo, hi = np.quantile(energies, [1 / 3, 2 / 3])
    mid = (energies >= lo) & (energies <= hi)
    er_mid = energy_resolution(energies[mid], e_rec[mid])
    scale_exact = energy_resolution(1024 * energies, 1024 * e_rec) == er_all
    ok = np.isfinite(er_all) and er_mid <= 1.5 * er_all and scale_exact
    report(10, "energy pipeline", ok, f"ER {er_all:.4f}, mid-bin {er_mid:.4f}, scale-exact {scale_exact}")


def test_criterion_11_pipeline_determinism(tmp_path):
    cfg = tmp_path / "run.ini"
    out = tmp_path / "out"
    cfg.write_text(_pipeline_config(out, max_epochs=8, patience=8, seed=5))
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_OK
    metrics1 = (out / "metrics.json").read_bytes()
    model1 = (out / "model.json").read_bytes()
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_OK
    ok = (out / "metrics.json").read_bytes() == metrics1 and (out / "model.json").read_bytes() == model1
    report(11, "pipeline determinism", ok)


def test_criterion_12_scattering_statistics():
    from scipy import stats

    e, dz = 50.0, 1293.0
    theta2 = (ES_MEV / e) ** 2 * (dz * 1e-3 / X0_MM)
    samples = sample_scatter(e, dz, np.random.default_rng(1012), size=100_000)
    ks = stats.kstest(samples, lambda t: 1.0 - np.exp(-(t**2) / theta2))

    dz_um = X0_MM * 1000.0
    a = trk(0, 0.0, 0.0, 0.0, 0.0, 0.0)
    b = trk(1, 0.0, 0.0, dz_um, 0.021, 0.0)
    e_hat, _ = pair_energy_likeliness(a, b, p_term_only=True)
    analytic = ES_MEV * math.sqrt(dz_um / (X0_MM * 1000.0)) / 0.021
    rel = abs(e_hat - analytic) / analytic
    ok = ks.pvalue > 0.01 and rel <= 0.01
    report(12, "scattering statistics", ok, f"KS p {ks.pvalue:.3f}, MLE rel {rel:.2e}")
