"""Acceptance criteria 1-12, one test each.

Every criterion records a PASS/FAIL line that the terminal summary prints
(see ``conftest.py``); run this file directly to get the same lines without
pytest. Criteria 9-11 train toynet models and take tens of minutes on one core.
"""

import functools
import itertools
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))

from kinkfree import condition_se_b  # noqa: E402
from multiexit import functional as F  # noqa: E402
from multiexit.blocks import SEBSpec, build_se_b  # noqa: E402
from multiexit.cost import FlopsReport, adaptive_flops, flops_report, module_flops  # noqa: E402
from multiexit.data import generate_synthetic  # noqa: E402
from multiexit.exits import (ExitPolicy, InfeasibleObjective, LogitTrace, Objective,  # noqa: E402
                             calibrate, export_trace, simulate)
from multiexit.formats import (FormatError, load_dataset, load_model, load_trace,  # noqa: E402
                               save_dataset, save_model, save_trace)
from multiexit.gradcheck import grad_check  # noqa: E402
from multiexit.model import build_model, patterns_with_budget  # noqa: E402
from multiexit.nn import Module  # noqa: E402
from multiexit.probe import FitConfig, substitute_accuracy, substitute_eval  # noqa: E402
from multiexit.tensor import (Tensor, add, channel_mul, mul, no_grad, relu, reshape,  # noqa: E402
                              scale, sigmoid, tmean, tsum)
from multiexit.training import (TrainConfig, distill_from_outputs, distill_loss, evaluate,  # noqa: E402
                                joint_loss, joint_loss_from_logits, train, wed_weights)

ARTIFACTS = Path(os.environ.get("MULTIEXIT_ARTIFACTS", Path(__file__).resolve().parent.parent / "artifacts"))

TITLES = {
    1: "FLOPs reproduction",
    2: "Branch-cost reproduction",
    3: "Budget-equality property",
    4: "Adaptive-FLOPs oracle equivalence",
    5: "Threshold boundary cases",
    6: "Calibration optimality",
    7: "Gradient suite",
    8: "Loss identities",
    9: "Desk-scale training",
    10: "Pattern-trend report",
    11: "Consistency-probe self-check",
    12: "Persistence round-trips",
}
RESULTS = {}
EXTRA_REPORTS = []


def criterion(n):
    def wrap(fn):
        @functools.wraps(fn)
        def run():
            t0 = time.perf_counter()
            try:
                detail = fn()
            except AssertionError as exc:
                RESULTS[n] = (False, f"{str(exc).splitlines()[0] if str(exc) else 'assertion failed'}",
                              time.perf_counter() - t0)
                raise
            RESULTS[n] = (True, detail or "", time.perf_counter() - t0)
        return run
    return wrap


def summary_lines():
    lines = []
    for n in sorted(RESULTS):
        ok, detail, secs = RESULTS[n]
        lines.append(f"criterion {n:>2} {'PASS' if ok else 'FAIL'} [{secs:7.1f}s] {TITLES[n]}: {detail}")
    return lines


def rel(a, b):
    return abs(a - b) / abs(b)


def check(cond, message, failures):
    if not cond:
        failures.append(message)


# -- 1-3: static costs --------------------------------------------------------

@criterion(1)
def test_criterion_01_flops_reproduction():
    r18 = flops_report(build_model("resnet18", "", seed=None)).backbone_total
    vgg = flops_report(build_model("vgg16", "", seed=None)).backbone_total
    detail = f"resnet18 {r18 / 1e9:.4f}G ({rel(r18, 1.81e9):+.2%}), vgg16 {vgg / 1e9:.3f}G ({rel(vgg, 15.47e9):+.2%})"
    assert rel(r18, 1.81e9) <= 0.05 and rel(vgg, 15.47e9) <= 0.05, detail
    return detail


@criterion(2)
def test_criterion_02_branch_costs():
    failures, parts = [], []
    rep = flops_report(build_model("resnet18", "1+2+3", seed=None))
    for m, want in enumerate((0.74e9, 1.17e9, 1.62e9)):
        got = rep.classifier_flops[m]
        parts.append(f"f{m + 1} {got / 1e9:.3f}G")
        check(rel(got, want) <= 0.05, f"1+2+3 f{m + 1} {got / 1e9:.3f}G vs {want / 1e9:.2f}G", failures)
    check(rel(rep.total, 2.37e9) <= 0.05, f"1+2+3 total {rep.total / 1e9:.3f}G vs 2.37G", failures)
    parts.append(f"total {rep.total / 1e9:.3f}G")
    t234 = flops_report(build_model("resnet18", "2+3+4", seed=None)).total
    parts.append(f"2+3+4 total {t234 / 1e9:.3f}G ({(t234 - 2.45e9) / 2.45e9:+.2%})")
    check(rel(t234, 2.45e9) <= 0.05, f"2+3+4 total {t234 / 1e9:.3f}G is {(t234 - 2.45e9) / 2.45e9:+.2%} from 2.45G",
          failures)
    seb = module_flops(build_se_b(SEBSpec(512, 512, 1)), (512, 7, 7))
    parts.append(f"SE-B {seb / 1e6:.2f}M")
    check(rel(seb, 13.7e6) <= 0.05, f"SE-B {seb / 1e6:.2f}M vs 13.7M", failures)
    assert not failures, "; ".join(failures) + " | " + ", ".join(parts)
    return ", ".join(parts)


@criterion(3)
def test_criterion_03_budget_equality():
    failures, parts = [], []
    for backbone in ("resnet18", "vgg16", "toynet"):
        branches = len(build_model(backbone, "", seed=None).backbone.attach_points)
        worst_all, worst_pos = 0.0, 0.0
        for budget in range(0, 10):
            for min_level, tag in ((0, "all"), (1, "pos")):
                pats = patterns_with_budget(budget, branches, min_level)
                if len(pats) < 2:
                    continue
                totals = [flops_report(build_model(backbone, p, seed=None)).total for p in pats]
                spread = (max(totals) - min(totals)) / min(totals)
                if tag == "all":
                    worst_all = max(worst_all, spread)
                else:
                    worst_pos = max(worst_pos, spread)
        parts.append(f"{backbone} spread {worst_all:.2%} (levels>=1: {worst_pos:.2%})")
        check(worst_all <= 0.01, f"{backbone}: equal-budget totals spread {worst_all:.2%} > 1% "
              f"once naive branches are included (levels>=1 spread {worst_pos:.2%})", failures)
    assert not failures, "; ".join(failures)
    return ", ".join(parts)


# -- 4-6: adaptive inference -------------------------------------------------

def _random_trace(rng, N, M, K=6):
    return LogitTrace(rng.normal(size=(N, M, K)) * rng.uniform(0.5, 4), rng.integers(0, K, N))


def _random_report(rng, M):
    through = np.sort(rng.integers(10_000, 1_000_000, M)).tolist()
    branch = rng.integers(100, 50_000, M).tolist()
    cls = [t + b for t, b in zip(through, branch)]
    return FlopsReport(cls, branch, through, cls[-1], sum(branch[:-1]))


def _per_sample(trace, gammas, report):
    """Independent reference: walk each sample through the exits in plain Python."""
    exits, correct, cost = [], 0, 0
    for logits, label in zip(trace.logits.tolist(), trace.labels.tolist()):
        for m, row in enumerate(logits):
            top = max(row)
            conf = 1.0 / sum(math.exp(v - top) for v in row)
            if m == len(logits) - 1 or conf >= gammas[m]:
                exits.append(m)
                correct += row.index(top) == label
                cost += report.classifier_flops[m] + sum(report.branch_only_flops[:m])
                break
    return exits, correct, cost


@criterion(4)
def test_criterion_04_adaptive_flops_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(50):
        M = (2, 3, 4)[i % 3]
        trace, report = _random_trace(rng, int(rng.integers(10, 80)), M), _random_report(rng, M)
        gammas = tuple(rng.uniform(0.1, 1.0, M - 1))
        res = simulate(trace, ExitPolicy(gammas), report)
        exits, correct, cost = _per_sample(trace, gammas, report)
        want_af = cost / trace.N
        assert (res.exits - 1).tolist() == exits, f"instance {i}: exit assignment differs"
        assert res.adaptive_accuracy == correct / trace.N, f"instance {i}: accuracy differs"
        counts = np.bincount(exits, minlength=M)
        direct = adaptive_flops(report, counts / trace.N)
        err = max(rel(res.af, want_af), rel(direct, want_af))
        worst = max(worst, err)
        assert err <= 1e-9, f"instance {i}: AF relative error {err:.2e}"
    return f"50 instances, max relative AF error {worst:.1e}"


@criterion(5)
def test_criterion_05_threshold_boundaries():
    rng = np.random.default_rng(5)
    report = flops_report(build_model("resnet18", "4+3+2", seed=None))
    trace = _random_trace(rng, 200, 4, K=10)
    low = simulate(trace, ExitPolicy((0, 0, 0)), report)
    high = simulate(trace, ExitPolicy((1.0001,) * 3), report)
    assert low.exit_rates == [1, 0, 0, 0] and low.af == report.classifier_flops[0], "gamma=0 case"
    assert high.exit_rates == [0, 0, 0, 1], "gamma>1 rates"
    assert high.adaptive_accuracy == trace.exit_accuracy()[-1], "gamma>1 accuracy"
    return (f"gamma=0: r={low.exit_rates}, AF={low.af / 1e9:.3f}G; gamma>1: r={high.exit_rates}, "
            f"acc={high.adaptive_accuracy:.3f}")


def _enumerate_best(trace, report, objective, step):
    grid = [i * step for i in range(int(round(1 / step)) + 1)]
    best = None
    for combo in itertools.product(grid, repeat=trace.M - 1):
        _, correct, cost = _per_sample(trace, combo, report)
        if objective.kind == "min_flops":
            if correct < objective.target * trace.N - 1e-9:
                continue
            key = (cost, combo)
        else:
            if cost > objective.target * trace.N * (1 + 1e-12):
                continue
            key = (-correct, cost, combo)
        best = key if best is None or key < best else best
    return None if best is None else best[-1]


@criterion(6)
def test_criterion_06_calibration_optimality():
    rng = np.random.default_rng(6)
    checked = 0
    for i in range(20):
        M = (2, 3, 4)[i % 3]
        trace, report = _random_trace(rng, int(rng.integers(10, 51)), M), _random_report(rng, M)
        accs = trace.exit_accuracy()
        paths = report.path_costs()
        objectives = [Objective.min_flops(float(rng.uniform(min(accs), max(accs)))),
                      Objective.max_accuracy(float(rng.uniform(paths[0], paths[-1])))]
        for obj in objectives:
            want = _enumerate_best(trace, report, obj, 0.25)
            try:
                got = calibrate(trace, report, obj, step=0.25).gammas
            except InfeasibleObjective:
                got = None
            assert got == want, f"instance {i} {obj.kind}: calibrate {got} vs enumeration {want}"
            checked += 1
    return f"{checked} (instance, objective) pairs agree with exhaustive enumeration"


# -- 7-8: numerics -------------------------------------------------------------

def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


@criterion(7)
def test_criterion_07_gradient_suite():
    rng = np.random.default_rng(7)
    errs = {}
    a, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 4, 4)
    g = Tensor(rng.normal(size=(2, 3, 4, 4)))
    gate = _leaf(rng, 2, 3)
    away = Tensor(np.sign(rng.normal(size=(2, 3, 4, 4))) * rng.uniform(0.1, 1, (2, 3, 4, 4)), requires_grad=True)
    errs["add"] = grad_check(lambda: tsum(mul(add(a, b), g)), [a, b])
    errs["mul"] = grad_check(lambda: tsum(mul(mul(a, b), g)), [a, b])
    errs["scale"] = grad_check(lambda: tsum(mul(scale(a, -1.7), g)), [a])
    errs["sigmoid"] = grad_check(lambda: tsum(mul(sigmoid(a), g)), [a])
    errs["relu"] = grad_check(lambda: tsum(mul(relu(away), g)), [away])
    errs["channel_mul"] = grad_check(lambda: tsum(mul(channel_mul(a, gate), g)), [a, gate])
    errs["reshape/mean"] = grad_check(lambda: tmean(mul(reshape(a, (6, 16)), reshape(b, (6, 16)))), [a, b])
    pool_x = Tensor(rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.1, requires_grad=True)
    gp = Tensor(rng.normal(size=(2, 3, 3, 3)))
    errs["maxpool2d"] = grad_check(lambda: tsum(mul(F.maxpool2d(pool_x, 3, 2, 1), gp)), [pool_x])
    errs["global_avg_pool"] = grad_check(lambda: tsum(mul(F.global_avg_pool(a), gate)), [a])
    lx, lw, lb = _leaf(rng, 4, 5), _leaf(rng, 3, 5), _leaf(rng, 3)
    gl = Tensor(rng.normal(size=(4, 3)))
    errs["linear"] = grad_check(lambda: tsum(mul(F.linear(lx, lw, lb), gl)), [lx, lw, lb])
    cx, cw, cb = _leaf(rng, 2, 3, 7, 7), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    gc = Tensor(rng.normal(size=(2, 4, 4, 4)))
    errs["conv2d"] = grad_check(lambda: tsum(mul(F.conv2d(cx, cw, cb, 2, 1), gc)), [cx, cw, cb])
    bx, bg, bb = _leaf(rng, 4, 3, 3, 3), _leaf(rng, 3), _leaf(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    gb = Tensor(rng.normal(size=(4, 3, 3, 3)))
    errs["batchnorm2d"] = grad_check(lambda: tsum(mul(F.batchnorm2d(bx, bg, bb, rm.copy(), rv.copy(), True), gb)),
                                     [bx, bg, bb])
    z, t = _leaf(rng, 5, 6), _leaf(rng, 5, 6)
    labels = rng.integers(0, 6, 5)
    errs["softmax+cross_entropy"] = grad_check(lambda: F.cross_entropy(z, labels), [z])
    errs["kl_divergence"] = grad_check(lambda: F.kl_divergence(t, z, 2.0), [t, z])
    q = _leaf(rng, 10)
    errs["quadratic"] = grad_check(lambda: tsum(mul(q, q)), [q])

    # conv + relu + GAP + linear, analytic pass in 32-bit; ReLU kinks kept clear of the step
    x32 = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32), requires_grad=True)
    w32 = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
    with no_grad():
        pre = F.conv2d(x32, w32, None, 1, 1).data
    b32 = Tensor(np.array([-0.5 * sum(np.sort(pre[:, c].ravel())[i:i + 2])
                           for c in range(4) for i in [int(np.argmax(np.diff(np.sort(pre[:, c].ravel()))))]],
                          dtype=np.float32), requires_grad=True)
    lw32 = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
    chain = lambda: tsum(F.linear(F.global_avg_pool(relu(F.conv2d(x32, w32, b32, 1, 1))), lw32))
    errs["conv+relu+GAP+linear (32-bit)"] = grad_check(chain, [x32, w32, b32, lw32], analytic_dtype=np.float32)

    blk = build_se_b(SEBSpec(16, 32, 2)).materialize(np.random.default_rng(0))
    sx = Tensor(np.random.default_rng(0).normal(size=(2, 16, 6, 6)).astype(np.float32), requires_grad=True)
    condition_se_b(blk, sx, weight_scale=10.0)
    sx.data *= 10.0
    with no_grad():
        sw = Tensor(rng.normal(size=blk(sx).shape).astype(np.float32))
    se_fn = lambda: tsum(mul(blk(sx), sw))
    errs["SE-B (64-bit)"] = grad_check(se_fn, [sx] + blk.parameters(), step=1e-3)
    errs["SE-B (32-bit)"] = grad_check(se_fn, [sx] + blk.parameters(), step=1e-3, analytic_dtype=np.float32)

    limits = {"batchnorm2d": 1e-3, "softmax+cross_entropy": 1e-4, "kl_divergence": 1e-4, "quadratic": 1e-6,
              "conv+relu+GAP+linear (32-bit)": 1e-3, "SE-B (64-bit)": 1e-4, "SE-B (32-bit)": 1e-2}
    bad = [f"{k} {v:.1e} >= {limits.get(k, 1e-4):.0e}" for k, v in errs.items() if not v < limits.get(k, 1e-4)]
    assert not bad, "; ".join(bad)
    return (f"{len(errs)} checks; SE-B {errs['SE-B (64-bit)']:.1e} (64-bit) / {errs['SE-B (32-bit)']:.1e} "
            f"(32-bit), chain {errs['conv+relu+GAP+linear (32-bit)']:.1e}")


@criterion(8)
def test_criterion_08_loss_identities():
    rng = np.random.default_rng(8)
    ds = generate_synthetic(10, 2, 16, seed=8)
    model = build_model("toynet", "1+1", input_size=16, seed=8).eval()
    from multiexit.data import to_float

    x, y = to_float(ds.images), ds.labels
    with no_grad():
        d = distill_loss(model, x, y, TrainConfig(teacher="wed", lam=1.0)).item()
        j = joint_loss(model, x, y).item()
    assert d == j, f"distill(lam=1) {d} != joint {j}"
    base = rng.normal(size=(6, 10)).astype(np.float32)
    outs = [Tensor(base.copy()) for _ in range(3)]
    labels = rng.integers(0, 10, 6)
    lam = 0.7
    got = distill_from_outputs(outs, labels, base, lam, 2.0).item()
    want = lam * joint_loss_from_logits(outs, labels).item()
    assert abs(got - want) <= 1e-6 * abs(want), f"matching teacher: {got} vs {want}"
    kl = F.kl_divergence(Tensor(base), Tensor(base), 1.0).item()
    assert kl == 0.0, f"KL(z, z) = {kl}"
    w = wed_weights(4)
    assert np.allclose(w, [0.1, 0.2, 0.3, 0.4], atol=1e-12), f"WED weights {w}"
    return f"distill(lam=1) == joint ({j:.4f}); KL(z,z) = 0; WED(M=4) = ({', '.join(f'{v:g}' for v in w)})"


# -- 9-11: training runs -------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _datasets():
    return (generate_synthetic(10, 200, 32, seed=0, difficulty=0.5, split="train"),
            generate_synthetic(10, 50, 32, seed=0, difficulty=0.5, split="val"),
            generate_synthetic(10, 50, 32, seed=0, difficulty=0.5, split="test"))


@functools.lru_cache(maxsize=None)
def _trained(pattern, seed):
    train_ds, val_ds, test_ds = _datasets()
    model = build_model("toynet", pattern, seed=seed)
    cfg = TrainConfig(epochs=30, batch_size=64, lr_initial=0.01, seed=seed)
    history = train(model, train_ds, cfg).history
    return model, history


@criterion(9)
def test_criterion_09_desk_scale_training():
    model, history = _trained("2+1", 0)
    test = _datasets()[2]
    accs = evaluate(model, test)
    first, last = history[0]["loss"], history[-1]["loss"]
    detail = (f"held-out exit accuracy {', '.join(f'{a:.3f}' for a in accs)}; "
              f"loss {first:.3f} -> {last:.3f} ({last / first:.1%})")
    assert min(accs) >= 0.60 and min(accs) >= 5 * 0.1, detail
    assert last < 0.5 * first, detail
    return detail


@criterion(10)
def test_criterion_10_pattern_trend():
    val, test = _datasets()[1], _datasets()[2]
    rows = []
    for seed in range(5):
        per = {}
        for pattern in ("2+1", "1+2"):
            model, _ = _trained(pattern, seed)
            per[pattern] = (model, export_trace(model, val), export_trace(model, test), flops_report(model))
        target = 0.99 * min(v[1].exit_accuracy()[-1] for v in per.values())
        for pattern, (model, vtr, ttr, rep) in per.items():
            row = {"pattern": pattern, "seed": seed, "exit1_acc": ttr.exit_accuracy()[0],
                   "final_acc": ttr.exit_accuracy()[-1], "target_val_acc": target}
            try:
                policy = calibrate(vtr, rep, Objective.min_flops(target))
                res = simulate(ttr, policy, rep)
                row.update(gammas=str(policy), adaptive_acc=res.adaptive_accuracy, af_mflops=res.af / 1e6)
            except InfeasibleObjective:
                row.update(gammas="infeasible", adaptive_acc=float("nan"), af_mflops=float("nan"))
            rows.append(row)
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    from multiexit.formats import write_csv

    write_csv(rows, str(ARTIFACTS / "pattern_trend.csv"))
    table = ["pattern seed exit1_acc final_acc adaptive_acc AF(MFLOPs) gammas"]
    table += [f"{r['pattern']:>7} {r['seed']:>4} {r['exit1_acc']:>9.3f} {r['final_acc']:>9.3f} "
              f"{r['adaptive_acc']:>12.3f} {r['af_mflops']:>10.2f} {r['gammas']}" for r in rows]
    means = {}
    for pattern in ("2+1", "1+2"):
        sel = [r for r in rows if r["pattern"] == pattern]
        means[pattern] = (np.mean([r["exit1_acc"] for r in sel]), np.nanmean([r["af_mflops"] for r in sel]))
        table.append(f"mean {pattern}: exit1_acc {means[pattern][0]:.4f}, AF {means[pattern][1]:.2f} MFLOPs")
    EXTRA_REPORTS.append(("pattern trend (criterion 10)", table))
    detail = (f"mean exit-1 acc 2+1 {means['2+1'][0]:.3f} vs 1+2 {means['1+2'][0]:.3f}; "
              f"AF {means['2+1'][1]:.2f} vs {means['1+2'][1]:.2f} MFLOPs")
    assert means["2+1"][0] >= means["1+2"][0] - 0.01, detail + "\n" + "\n".join(table)
    return detail


class _Zeros(Module):
    def forward(self, x):
        return mul(x, 0.0)


@criterion(11)
def test_criterion_11_probe_self_check():
    train_ds, _, test = _datasets()
    base, _ = _trained("", 0)
    base_acc = evaluate(base, test)[-1]
    parts, failures = [], []
    for stage in (1, 2, 3):
        res = substitute_eval(base, base, stage, 0, train_ds, test, repeats=3, config=FitConfig(), seed=stage)
        zero = substitute_accuracy(base, base, stage, _Zeros(), test)
        parts.append(f"stage {stage}: {res.accuracy_mean:.3f}+-{res.accuracy_std:.3f}, zeros {zero:.3f}")
        check(abs(res.accuracy_mean - base_acc) <= 0.01,
              f"stage {stage} substitution {res.accuracy_mean:.3f} vs baseline {base_acc:.3f}", failures)
        check(zero <= 2 * 0.1 * 1.5, f"stage {stage} zero-feature accuracy {zero:.3f}", failures)
    detail = f"baseline {base_acc:.3f}; " + "; ".join(parts)
    assert not failures, "; ".join(failures) + " | " + detail
    return detail


# -- 12: persistence -------------------------------------------------------------

@criterion(12)
def test_criterion_12_persistence():
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        ds = generate_synthetic(5, 4, 16, seed=12, split="test")
        save_dataset(ds, str(d / "x.mxds"))
        back = load_dataset(str(d / "x.mxds"))
        assert back.images.tobytes() == ds.images.tobytes() and np.array_equal(back.labels, ds.labels), "dataset"
        model = build_model("toynet", "2+n", num_classes=5, input_size=16, seed=12)
        save_model(model, str(d / "m.mxck"), epoch=1)
        loaded, _ = load_model(str(d / "m.mxck"))
        for (n1, p1), (n2, p2) in zip(model.params, loaded.params):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes(), f"checkpoint tensor {n1}"
        for k, v in model.buffers().items():
            assert v.tobytes() == loaded.buffers()[k].tobytes(), f"checkpoint buffer {k}"
        trace = export_trace(loaded, ds)
        save_trace(trace, str(d / "t.mxtr"))
        tb = load_trace(str(d / "t.mxtr"))
        assert tb.logits.tobytes() == trace.logits.tobytes() and np.array_equal(tb.labels, trace.labels), "trace"
        rejected = 0
        for name, loader in (("x.mxds", load_trace), ("t.mxtr", load_model), ("m.mxck", load_dataset)):
            try:
                loader(str(d / name))
            except FormatError as exc:
                rejected += "bad magic" in str(exc)
        assert rejected == 3, f"wrong magic rejected {rejected}/3"
    return "dataset, checkpoint and trace bit-exact; 3/3 wrong-magic loads rejected"


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    for fn in tests:
        try:
            fn()
        except AssertionError:
            pass
    for title, table in EXTRA_REPORTS:
        print(f"== {title}")
        print("\n".join(table))
    print("\n".join(summary_lines()))
    sys.exit(0 if all(ok for ok, _, _ in RESULTS.values()) else 1)
