"""Acceptance criteria 1-10, one PASS/FAIL line per criterion.

Criteria 5, 7 and 8 share one desk-scale pipeline run (``--preset desk``),
driven through the CLI. Set ``TOPNAV_ACCEPTANCE_DIR`` to keep its artifacts;
an existing complete run there is reused.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from topnav import agents as ag
from topnav import pipeline as pl
from topnav.cggn import CggnConfig, CggnModel, mode_of_samples, train_cggn
from topnav.cli import main
from topnav.config import load_config
from topnav.evaluation import (
    EpisodeResult, eval_graph_prediction, oracle_success_rate, per_class_topk, spl, success_rate,
)
from topnav.mapping import OracleLocalizer, SceneGraph, fuse_room_probs
from topnav.numerics import (
    GRUCell, LSTMCell, MLP, ParamSet, Tensor, bce_with_logits, cross_entropy, focal_loss, gradcheck,
    log_softmax, mixture_bernoulli_nll, mixture_bernoulli_nll_logits, sigmoid, softmax, tsum,
)
from topnav.perception import LocalizerConfig, LocalizerModel, Observer, ObserverConfig
from topnav.worldgen import NUM_CLASSES, Room, RoomGraph, generate_environments, sample_cggn_example


@pytest.fixture
def verdict(capsys):
    def emit(n: int, name: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {name}  {detail}")
        assert ok, f"criterion {n} ({name}) failed: {detail}"
    return emit


# -- 1 -------------------------------------------------------------------------

def _blocks(seed):
    """(name, loss builder, tensors) for every trainable block.

    Parameters are redrawn at random so that no ReLU sits exactly on its kink
    (zero-initialized biases behind a dead layer would). The policies get a
    wider draw: at 0.3 their attention gradients shrink towards the
    finite-difference noise floor.
    """
    out = _raw_blocks(seed)
    rng = np.random.default_rng(10_000 + seed)
    for name, _, tensors in out:
        scale = 0.5 if name.startswith("policy") else 0.3
        for t in tensors:
            t.data = rng.normal(scale=scale, size=t.data.shape)
    return out


def _raw_blocks(seed):
    rng = np.random.default_rng(seed)
    out = []

    ps = ParamSet()
    mlp = MLP(ps, "mlp", [5, 7, 3], rng)
    x, w = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
    out.append(("mlp", lambda: tsum(mlp(Tensor(x)) * Tensor(w)), [t for _, t in ps.items()]))

    ps = ParamSet()
    lstm = LSTMCell(ps, "lstm", 4, 3, rng)
    xl, hl, cl, wl = rng.normal(size=4), rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)

    def lstm_loss():
        h1, c1 = lstm(Tensor(xl), Tensor(hl), Tensor(cl))
        h2, c2 = lstm(Tensor(xl), h1, c1)
        return tsum(h2 * Tensor(wl)) + tsum(c2)
    out.append(("lstm", lstm_loss, [t for _, t in ps.items()]))

    ps = ParamSet()
    gru = GRUCell(ps, "gru", 4, 3, rng)
    xg, hg, wg = rng.normal(size=(2, 4)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    out.append(("gru", lambda: tsum(gru(Tensor(xg), Tensor(hg)) * Tensor(wg)), [t for _, t in ps.items()]))

    z = Tensor(rng.normal(size=6), trainable=True)
    th = Tensor(rng.normal(size=(3, 5)), trainable=True)
    a = Tensor(rng.normal(size=3), trainable=True)
    lab = rng.integers(0, 2, size=5)
    out.append(("cross_entropy", lambda: cross_entropy(z, 2), [z]))
    out.append(("focal", lambda: focal_loss(softmax(z), 4, 0.5), [z]))
    out.append(("mixture_bernoulli", lambda: mixture_bernoulli_nll(softmax(a), sigmoid(th), lab), [a, th]))
    out.append(("mixture_bernoulli_logits", lambda: mixture_bernoulli_nll_logits(log_softmax(a), th, lab), [a, th]))
    out.append(("bce", lambda: bce_with_logits(th, lab[None, :].repeat(3, 0)), [th]))

    loc = LocalizerModel(LocalizerConfig(hidden=(6, 4), feature_dim=3, fourier_length=2), rng)
    xp = loc.pair_inputs(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)),
                         rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    yp = np.array([1.0, 0.0, 1.0])
    out.append(("localizer", lambda: bce_with_logits(loc.logits(xp), yp), [t for _, t in loc.params.items()]))

    cfg = CggnConfig(hidden=5, gnn_layers=2, node_mlp_hidden=4, B=2, max_obs=12, K=2)
    m = CggnModel(cfg, rng)
    batch = _GRAD_CORPUS[seed % len(_GRAD_CORPUS)]

    def cggn_loss():
        e, n = m.losses(batch)
        return e + n
    out.append(("cggn", cggn_loss, [t for _, t in m.params.items()]))

    for kind in ("baseline", "full"):
        pm = ag.PolicyModel(kind, 4, rng)
        d = np.eye(NUM_CLASSES)[int(rng.integers(NUM_CLASSES))]
        u = rng.dirichlet(np.ones(NUM_CLASSES), size=3)
        # distinct one-hot nodes keep the attention weights away from a flat point
        picks = rng.choice(NUM_CLASSES, size=3, replace=False)
        nodes = np.concatenate([np.eye(NUM_CLASSES)[picks], [[0, 1], [1, 0], [0, 1]]], axis=1)
        sgoal = rng.dirichlet(np.ones(NUM_CLASSES))

        def policy_loss(pm=pm, d=d, u=u, nodes=nodes, sgoal=sgoal, kind=kind):
            h, c = ag.encode_instruction(pm, d)
            st = ag.AgentState(h, c, np.zeros(NUM_CLASSES), 0)
            total = None
            for target in (1, 0):
                logit = ag.step_policy(pm, st, u, u[0], nodes if kind == "full" else None,
                                       sgoal if kind == "full" else None)
                ce = cross_entropy(logit, target)
                total = ce if total is None else total + ce
            return total
        out.append((f"policy_{kind}", policy_loss, [t for _, t in pm.params.items()]))
    return out


def _grad_corpus():
    envs = generate_environments(8, 11)
    rng = np.random.default_rng(3)
    return [[sample_cggn_example(envs[(2 * i + j) % 8], rng, B=2) for j in range(2)] for i in range(5)]


_GRAD_CORPUS = _grad_corpus()


def test_criterion_1_gradient_suite(verdict):
    t0 = time.time()
    worst, where = 0.0, ""
    for seed in range(20):
        for name, fn, tensors in _blocks(seed):
            err = gradcheck(fn, tensors, h=1e-5, max_coords=3, rng=seed)
            if err > worst:
                worst, where = err, f"{name}/seed{seed}"
    elapsed = time.time() - t0
    verdict(1, "gradient suite", worst < 1e-4 and elapsed < 60,
            f"worst rel err {worst:.2e} ({where}), {elapsed:.1f}s")


# -- 2 -------------------------------------------------------------------------

def test_criterion_2_fusion(verdict):
    rng = np.random.default_rng(0)
    u = np.full(NUM_CLASSES, 1 / NUM_CLASSES)
    ok = True
    for _ in range(50):
        p, q = rng.dirichlet(np.ones(NUM_CLASSES), size=2)
        ok &= np.allclose(fuse_room_probs(u, p), p, atol=1e-12)
        f = fuse_room_probs(p, q)
        ok &= abs(f.sum() - 1) <= 1e-9 and np.allclose(f, fuse_room_probs(q, p), atol=1e-12)
    one = np.eye(NUM_CLASSES)[4]
    ok &= np.array_equal(fuse_room_probs(one, one), one)
    hand = fuse_room_probs([0.8, 0.2], [0.8, 0.2])
    ok &= np.allclose(hand, [0.9412, 0.0588], atol=1e-4)
    verdict(2, "fusion", bool(ok), f"hand case {np.round(hand, 4).tolist()}")


# -- 3 -------------------------------------------------------------------------

def test_criterion_3_no_infinite_chain(verdict):
    g = RoomGraph("ring", [Room(i, i, (5 * np.cos(i), 5 * np.sin(i), 0.0)) for i in range(6)],
                  [(i, (i + 1) % 6) for i in range(6)])
    ob = Observer(ObserverConfig(perfect=True))
    rng = np.random.default_rng(0)
    sg, prev = SceneGraph(), None
    for k in range(100):
        cam = sg.insert_camera(ob.observe(g, k % 6, rng), prev)
        sg.localize_camera(cam, OracleLocalizer())
        prev = cam
    verdict(3, "no infinite chain", len(sg.rooms) == 6, f"{len(sg.rooms)} room nodes after 100 steps")


# -- 4 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_cggn_overfit(verdict):
    t0 = time.time()
    envs = generate_environments(20, 1)
    rng = np.random.default_rng(0)
    corpus = [sample_cggn_example(envs[i % 20], rng) for i in range(50)]
    byid = {g.env_id: g for g in envs}
    cfg = CggnConfig(hidden=64, node_mlp_hidden=64, batch_size=20, seed=0)
    model, adam, done, m = None, None, 0, {}
    from topnav.numerics import AdamState
    adam = AdamState(lr=cfg.lr)
    while done < 2000:
        model, _ = train_cggn(corpus, cfg, iterations=done + 200, model=model, adam=adam, start=done)
        done += 200
        m = eval_graph_prediction(model, corpus, byid, seed=0, n_samples=100, best_of=False)
        if m["node_top1"] >= 0.9 and m["edge_recall"] >= 0.9:
            break
    # masking: arbitrary padded targets leave loss and gradients bit-identical
    padded = [s for s in corpus if s.valid_count < s.B]
    mask_ok = _masking_bit_exact(model, padded)
    elapsed = time.time() - t0
    ok = m["node_top1"] >= 0.9 and m["edge_recall"] >= 0.9 and done <= 2000 and elapsed < 600 and mask_ok
    verdict(4, "CGGN overfit + masking", ok,
            f"top1 {m['node_top1']:.3f} recall {m['edge_recall']:.3f} at {done} it, {elapsed:.0f}s, "
            f"masking bit-exact on {len(padded)} padded samples: {mask_ok}")


def _masking_bit_exact(model, samples) -> bool:
    from topnav.numerics import backward
    from topnav.worldgen import CggnSample

    class Garbage(CggnSample):
        def __init__(self, base, rng):
            super().__init__(**base.__dict__)
            self._pad = rng.integers(NUM_CLASSES, size=self.B)
            self.target_rows = list(base.target_rows) + [
                rng.integers(0, 2, size=base.n_obs + t).astype(np.int8) for t in range(self.valid_count, self.B)]

        def padded_targets(self):
            out = self._pad.copy()
            out[:self.valid_count] = self.target_classes
            return out

    def grads(batch):
        model.params.zero_grad()
        e, n = model.losses(batch)
        backward(e + n)
        return e.item(), n.item(), {k: v.grad.copy() for k, v in model.params.items()}

    e0, n0, g0 = grads(samples)
    e1, n1, g1 = grads([Garbage(s, np.random.default_rng(i)) for i, s in enumerate(samples)])
    model.params.zero_grad()
    return bool(samples) and e0 == e1 and n0 == n1 and all(np.array_equal(g0[k], g1[k]) for k in g0)


# -- 6 -------------------------------------------------------------------------

def test_criterion_6_mode_and_k1(verdict):
    hits = sum(mode_of_samples([1.0], [[0.99, 0.01]], 100, np.random.default_rng(s)).tolist() == [1, 0]
               for s in range(100))
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 12))
        theta = rng.uniform(0.01, 0.99, size=(1, n))
        y = rng.integers(0, 2, size=n)
        a = mixture_bernoulli_nll(Tensor(np.ones(1)), theta, y).item()
        b = -float(np.sum(y * np.log(theta[0]) + (1 - y) * np.log(1 - theta[0])))
        z = np.log(theta / (1 - theta))
        c = mixture_bernoulli_nll_logits(Tensor(np.zeros(1)), z, y).item()
        d = bce_with_logits(Tensor(z[0]), y).item()
        worst = max(worst, abs(a - b), abs(c - d))
    verdict(6, "mode of 100 samples + K=1 reduction", hits >= 99 and worst < 1e-9,
            f"{hits}/100 mode matches, max |NLL - sum BCE| {worst:.1e}")


# -- 9 -------------------------------------------------------------------------

def _ep(ok, l_s, moves):
    return EpisodeResult("e", 0, 1, list(range(moves + 1)), True, ok, moves + 1, l_s, ok)


def _report_bounds_ok(paths) -> tuple[bool, int]:
    rows = 0
    for p in paths:
        for r in json.loads(Path(p).read_text())["rows"]:
            if "SR" in r:
                rows += 1
                if not (r["SPL"] <= r["SR"] <= r["OSR"]):
                    return False, rows
    return True, rows


@pytest.fixture(scope="module")
def smoke_pair(tmp_path_factory):
    """Two independent gen -> train -> eval runs under one seed (fixed iteration counts)."""
    outs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(f"smoke_{name}")
        assert main(["run-all", "--preset", "smoke", "--out", str(out), "--quiet"]) == 0
        outs.append(out)
    return outs


def test_criterion_9_metrics(verdict, smoke_pair):
    hand = [spl([_ep(True, 4, 4)]), spl([_ep(True, 3, 5)]), spl([_ep(False, None, 5)])]
    labels = np.array([0] * 99 + [1])
    skew = per_class_topk(np.tile([1.0, 0.0], (100, 1)), labels, 1)
    rng = np.random.default_rng(0)
    rand_ok = True
    for _ in range(100):
        res = []
        for _ in range(20):
            moves = int(rng.integers(1, 10))
            ok = bool(rng.random() < 0.5)
            res.append(_ep(ok, int(rng.integers(1, moves + 1)) if ok else None, moves))
        rand_ok &= spl(res) <= success_rate(res) <= oracle_success_rate(res)
    bounds_ok, n_rows = _report_bounds_ok(sorted((smoke_pair[0] / "reports").glob("*.json")))
    ok = hand == [1.0, 0.6, 0.0] and skew == 0.5 and rand_ok and bounds_ok and n_rows > 0
    verdict(9, "metric correctness", ok,
            f"SPL hand cases {hand}, 99/1 top-1 {skew}, SPL<=SR<=OSR on {n_rows} report rows")


# -- 10 ------------------------------------------------------------------------

def test_criterion_10_determinism(verdict, smoke_pair):
    a, b = ({p.name: p.read_bytes() for p in sorted((d / "reports").glob("*.json"))} for d in smoke_pair)
    same = a == b and sorted(a) == ["ablation.json", "agent.json", "cggn.json"]
    verdict(10, "end-to-end determinism", same, f"byte-identical reports: {sorted(a)}")


# -- desk-scale pipeline: 5, 7, 8 -----------------------------------------------

DESK_STAGES = [["gen-envs"], ["train", "localizer"], ["train", "cggn"], ["eval", "cggn"],
               ["train", "agent"], ["eval", "agent", "--dump-traces"]]


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    out = Path(os.environ.get("TOPNAV_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("desk"))
    cfg = load_config(preset="desk")
    marker = out / "acceptance_done.json"
    if marker.exists() and json.loads(marker.read_text()).get("config") == cfg.content_hash():
        return out
    t0 = time.time()
    for stage in DESK_STAGES:
        code = main([*stage, "--preset", "desk", "--out", str(out), "--quiet"])
        assert code == 0, f"stage {stage} exited {code}"
    marker.write_text(json.dumps({"config": cfg.content_hash(), "seconds": time.time() - t0}))
    return out


def _rows(run, name):
    return {r["label"]: r for r in json.loads((run / "reports" / f"{name}.json").read_text())["rows"]}


@pytest.mark.slow
def test_criterion_5_cggn_generalization(verdict, desk_run):
    rows = _rows(desk_run, "cggn")
    own = rows["CGGN (own target)"]["node_top5"]
    best = rows["CGGN (best-of ground truths)"]["node_top5"]
    side = json.loads((desk_run / "checkpoints/cggn.json").read_text())
    ok = own >= 2 * 5 / 30 and side["iterations_done"] >= 10_000
    verdict(5, "CGGN held-out node top-5", ok,
            f"own target {own:.3f}, best-of {best:.3f} (threshold {2 * 5 / 30:.3f}) "
            f"after {side['iterations_done']} it")


def _gate_violations(trace: dict) -> list[str]:
    bad = []
    for s in trace["steps"]:
        if s["action"] is None:
            continue
        if s["use_map"] and not all(s["visited"][1:]) and s["action"] > 0 and s["visited"][s["action"]]:
            bad.append("revisit while unvisited neighbor exists")
        if s["perfect"] and s["use_perception_gate"] and not s["goal_in_topk"] and s["action"] == 0:
            bad.append("stop with goal outside top-k")
    return bad


def _tree_bound_ok(result: dict, n_rooms: int) -> bool:
    visited = len(set(result["trajectory"]))
    return result["steps"] <= 2 * (visited - 1) + n_rooms


@pytest.mark.slow
def test_criterion_7_gates_on_eval_traces(verdict, desk_run):
    cfg = load_config(preset="desk")
    data = pl.Dataset(cfg, desk_run)
    files = sorted((desk_run / "reports/traces/agent").glob("Full*.jsonl"))
    n_traces, bad = 0, []
    for f in files:
        for line in f.read_text().splitlines():
            tr = json.loads(line)
            n_traces += 1
            bad += _gate_violations(tr)
            if not _tree_bound_ok(tr["result"], data.by_id[tr["env_id"]].n):
                bad.append("termination bound")
    # (c) with the step cap removed, M alone must still bound every episode
    loc, cg = pl.load_localizer(cfg, data), pl.load_cggn(cfg, data)
    pairs = data.nav_pairs["test_unseen"][:100]
    n_free = 0
    for variant in ("full", "full_star"):
        agent = ag.with_informed(pl.load_agent(cfg, data, variant, 0, loc, cg),
                                 use_perception_gate=True, use_map=True, max_steps=None)
        traces = []
        res = ag.evaluate_agent(agent, pairs, data.by_id, cfg.seed, traces=traces)
        for tr, r in zip(traces, res):
            n_free += 1
            bad += _gate_violations(tr)
            if not _tree_bound_ok(r.to_json(), data.by_id[r.env_id].n):
                bad.append("termination bound (uncapped)")
    verdict(7, "hard navigation gates", n_traces >= 1000 and not bad,
            f"{n_traces} eval traces + {n_free} uncapped episodes, {len(bad)} violations")


@pytest.mark.slow
def test_criterion_8_ordering(verdict, desk_run):
    rows = _rows(desk_run, "agent")
    sr = [rows[k]["SR"] for k in ("RANDOM", "Baseline", "Full [G,P,M]", "Full* [G,P*,M]")]
    seeds = [k for k in rows["Baseline"] if k.startswith("SR_s")]
    episodes = rows["Baseline"]["episodes"]
    gaps = np.diff(sr)
    wall = sum(json.loads(p.read_text())["wall_clock_seconds"] for p in (desk_run / "manifests").glob("*.json"))
    ok = bool(np.all(gaps >= 0.02)) and episodes >= 500 and len(seeds) == 3 and wall < 7200
    verdict(8, "SR ordering RANDOM < Baseline < Full < Full*", ok,
            f"SR {[round(s, 3) for s in sr]}, gaps {[round(g, 3) for g in gaps]}, "
            f"{episodes} episodes x {len(seeds)} seeds, pipeline {wall / 60:.1f} min")
