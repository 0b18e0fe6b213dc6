"""Self-check suites: frame geometry, gradient fidelity, metric oracles.

These bundle the oracles behind one command so a fresh build can certify
itself: the frame identity over a dimension grid, finite-difference checks
of every loss, and fast-vs-brute-force agreement for the ranking metrics.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import etf
from . import losses as ls
from . import metrics as mx

GRAD_TOLERANCE = 1e-4
ETF_GRID = ((3, 3), (16, 16), (64, 64), (512, 512), (8, 5), (32, 16))


def etf_suite(grid=ETF_GRID, atol: float = 1e-8) -> tuple[bool, list[str]]:
    lines = []
    ok = True
    for d, K in grid:
        problems = etf.check_geometry(etf.etf_matrix(d, K, seed=d + K), atol=atol)
        for p in problems[:4]:
            lines.append(f"FAIL etf d={d} K={K}: {p}")
        if problems:
            ok = False
        else:
            lines.append(f"PASS etf d={d} K={K}: norms 1, pairwise cosines {-1.0 / (K - 1):.6g}")
    for seed_a, seed_b in ((0, 1), (7, 8)):
        K = 6
        gram_a = np.sort((etf.etf_matrix(12, K, seed_a).T @ etf.etf_matrix(12, K, seed_a)).ravel())
        gram_b = np.sort((etf.etf_matrix(12, K, seed_b).T @ etf.etf_matrix(12, K, seed_b)).ravel())
        if np.abs(gram_a - gram_b).max() < atol:
            lines.append(f"PASS etf rotation invariance seeds {seed_a}/{seed_b}")
        else:
            ok = False
            lines.append(f"FAIL etf rotation invariance seeds {seed_a}/{seed_b}")
    return ok, lines


def _micro_bank(seed=2):
    bank = etf.build_bank(4, 4, seed=seed)
    etf.activate(bank, [0, 1, 2])
    return bank


def _total_loss_fn(snapshot_feats, batch_x, batch_y, virtual_x, virtual_y, config, weights):
    """Full step loss as a pure function of every trainable parameter."""
    old_rows = np.asarray([i for i, y in enumerate(batch_y) if y in (0,)], dtype=np.intp)

    def f(p):
        bank = _micro_bank()
        model_params = {k: p[k] for k in ("w0", "b0", "w1", "b1")}
        feats = bb.forward_features(model_params, config, batch_x)
        vfeats = bb.forward_features(model_params, config, virtual_x)
        eta = p["eta"]
        l_ce = ls.active_cross_entropy(
            feats, batch_y, bank, eta, onbr_shift=weights.onbr_shift, old_rows=old_rows
        )
        vprotos = {0: p["v0"], 1: p["v1"], 2: p["v2"]}
        l_v = ls.virtual_cross_entropy(vfeats, virtual_y, vprotos, eta)
        bound = ls.pnbr_bound(p["raw"]) if weights.use_pnbr else None
        l_vii, _ = ls.interaction_loss(feats, batch_y, vfeats, virtual_y, vprotos, eta, bound)
        l_dis = ls.alignment_distillation(feats, snapshot_feats)
        total, _ = ls.combine(
            weights, task_index=2, new_class_count=2, old_class_count=1,
            l_ce=l_ce, l_v=l_v, l_vii=l_vii, l_dis=l_dis,
        )
        return total

    return f


def gradient_checks(points: int = 10, seed: int = 0):
    """Yield (name, report) for every loss at ``points`` random micro-points."""
    rng = np.random.default_rng(seed)
    bank = _micro_bank()
    labels = [0, 1, 2]

    def sample_features(n=3, d=4):
        return rng.standard_normal((n, d))

    def run_many(name, build_fn, make_point):
        worst = None
        for _ in range(points):
            report = ad.finite_diff_check(build_fn, make_point())
            if worst is None or report.max_rel_error > worst.max_rel_error:
                worst = report
        return name, worst

    yield run_many(
        "l_ce/active",
        lambda p: ls.active_cross_entropy(p["z"], labels, bank, p["eta"]),
        lambda: {"z": sample_features(), "eta": np.asarray(1.0 + 3 * rng.random())},
    )
    yield run_many(
        "l_ce/softmax_all",
        lambda p: ls.active_cross_entropy(p["z"], labels, bank, p["eta"], mode="all"),
        lambda: {"z": sample_features(), "eta": np.asarray(1.0 + 3 * rng.random())},
    )
    yield run_many(
        "l_ce/onbr",
        lambda p: ls.active_cross_entropy(p["z"], labels, bank, p["eta"], onbr_shift=0.3, old_rows=[0, 1]),
        lambda: {"z": sample_features(), "eta": np.asarray(1.0 + 3 * rng.random())},
    )
    yield run_many(
        "l_ce/onbr_angular",
        lambda p: ls.active_cross_entropy(
            p["z"], labels, bank, p["eta"], onbr_shift=0.3, old_rows=[0], onbr_mode="angular"
        ),
        lambda: {"z": sample_features(), "eta": np.asarray(1.0 + 3 * rng.random())},
    )
    yield run_many(
        "l_v",
        lambda p: ls.virtual_cross_entropy(p["z"], [0, 1, 2], {0: p["v0"], 1: p["v1"], 2: p["v2"]}, p["eta"]),
        lambda: {
            "z": sample_features(),
            "v0": rng.standard_normal(4),
            "v1": rng.standard_normal(4),
            "v2": rng.standard_normal(4),
            "eta": np.asarray(1.0 + 3 * rng.random()),
        },
    )

    def vii_fn(with_bound):
        def f(p):
            protos = {0: p["v0"], 1: p["v1"]}
            bound = ls.pnbr_bound(p["raw"]) if with_bound else None
            loss, _ = ls.interaction_loss(p["zt"], [0, 1], p["zv"], [1, 0], protos, p["eta"], bound)
            return loss

        return f

    def vii_point():
        return {
            "zt": sample_features(2),
            "zv": sample_features(2),
            "v0": rng.standard_normal(4),
            "v1": rng.standard_normal(4),
            "eta": np.asarray(1.0 + 2 * rng.random()),
            "raw": np.asarray(rng.normal(-1.0, 0.5)),
        }

    yield run_many("l_vii/plain", vii_fn(False), vii_point)
    yield run_many("l_vii/pnbr", vii_fn(True), vii_point)

    snap = rng.standard_normal((3, 4))
    yield run_many(
        "l_dis",
        lambda p: ls.alignment_distillation(p["z"], snap),
        lambda: {"z": sample_features()},
    )

    # end-to-end total through a 2-hidden-unit micro backbone
    config = bb.BackboneConfig(input_dim=3, hidden=(2,), feature_dim=4, seed=1)
    weights = ls.LossWeights(
        use_virtual_ce=True, use_vii=True, use_pnbr=True, use_onbr=True, use_distill=True
    )
    batch_x = rng.standard_normal((4, 3))
    batch_y = [0, 1, 2, 1]
    synth = ls.synthesize_virtual(batch_x, batch_y, weights.mix)
    virtual_x, virtual_y = synth
    snap_model = bb.Model(bb.BackboneConfig(input_dim=3, hidden=(2,), feature_dim=4, seed=9))
    snapshot_feats = bb.extract_arrays(snap_model, batch_x)
    total_fn = _total_loss_fn(snapshot_feats, batch_x, batch_y, virtual_x, virtual_y, config, weights)

    def total_point():
        return {
            "w0": rng.standard_normal((3, 2)) * 0.8,
            "b0": rng.standard_normal(2) * 0.3,
            "w1": rng.standard_normal((2, 4)) * 0.8,
            "b1": rng.standard_normal(4) * 0.3,
            "eta": np.asarray(1.0 + 2 * rng.random()),
            "raw": np.asarray(rng.normal(-1.0, 0.5)),
            "v0": rng.standard_normal(4),
            "v1": rng.standard_normal(4),
            "v2": rng.standard_normal(4),
        }

    yield run_many("l_total/end_to_end", total_fn, total_point)


def grad_suite(points: int = 10, seed: int = 0) -> tuple[bool, list[str]]:
    ok = True
    lines = []
    for name, report in gradient_checks(points=points, seed=seed):
        passed = report.max_rel_error < GRAD_TOLERANCE
        ok &= passed
        tag = "PASS" if passed else "FAIL"
        extra = f" ({len(report.excluded)} kink points excluded)" if report.excluded else ""
        lines.append(f"{tag} {name}: max relative error {report.max_rel_error:.3e}{extra}")
    return ok, lines


def metrics_suite(trials: int = 50, size: int = 200, seed: int = 0, atol: float = 1e-12) -> tuple[bool, list[str]]:
    rng = np.random.default_rng(seed)
    worst_auroc = worst_oscr = 0.0
    ok = True
    for _ in range(trials):
        n_known = int(rng.integers(size // 4, 3 * size // 4))
        pool = rng.choice(np.linspace(-1, 1, 17), size=size)
        known, unknown = pool[:n_known], pool[n_known:]
        correct = rng.random(n_known) > 0.35
        da = abs(mx.auroc(known, unknown) - mx.auroc_bruteforce(known, unknown))
        do = abs(mx.oscr(correct, known, unknown) - mx.oscr_bruteforce(correct, known, unknown))
        worst_auroc = max(worst_auroc, da)
        worst_oscr = max(worst_oscr, do)
        shifted_k, shifted_u = 2.0 * known + 3.0, 2.0 * unknown + 3.0
        if mx.auroc(shifted_k, shifted_u) != mx.auroc(known, unknown):
            ok = False
        if mx.oscr(correct, shifted_k, shifted_u) != mx.oscr(correct, known, unknown):
            ok = False
    ok &= worst_auroc < atol and worst_oscr < atol
    lines = [
        f"{'PASS' if worst_auroc < atol else 'FAIL'} auroc vs brute force: worst gap {worst_auroc:.3e} over {trials} trials",
        f"{'PASS' if worst_oscr < atol else 'FAIL'} oscr vs brute force: worst gap {worst_oscr:.3e} over {trials} trials",
        f"{'PASS' if ok else 'FAIL'} monotone-transform invariance (exact)",
    ]
    return ok, lines


SUITES = {"etf": etf_suite, "grad": grad_suite, "metrics": metrics_suite}


def run_suite(name: str) -> tuple[bool, list[str]]:
    if name == "all":
        ok = True
        lines = []
        for suite_name, fn in SUITES.items():
            suite_ok, suite_lines = fn()
            ok &= suite_ok
            lines.extend(f"[{suite_name}] {line}" for line in suite_lines)
        return ok, lines
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    return SUITES[name]()
