"""Dataset generation, training and evaluation stages behind the CLI.

Directory layout under the output root (names configurable in ``paths``)::

    envs/env_XXX.json, envs/splits.json
    checkpoints/<name>.ckpt + <name>.json (sidecar) + <name>.curve.json
    reports/<name>.json + .csv, reports/traces/*.jsonl
    manifests/<command>.json

Every sidecar records the environment-set hash it was trained against; a
stage that loads a checkpoint from a different environment set refuses.
Reports carry the content hash of their inputs (config, environments and
checkpoints), which is also stored in the run manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import agents as ag
from .cggn import CggnModel, train_cggn
from .config import RunConfig
from .evaluation import MetricReport, eval_graph_prediction, nav_metrics
from .mapping import OracleLocalizer
from .numerics import AdamState, adam_from_arrays, adam_to_arrays, load_checkpoint, no_grad, save_checkpoint
from .perception import LocalizerModel, Observer, make_pair_dataset, train_localizer
from .rng import derive_rng
from .worldgen import (
    RoomGraph, generate_environments, load_environment, sample_cggn_example, sample_nav_pairs,
    save_environment, split_environments,
)

SPLIT_FILE = "splits.json"
AGENT_VARIANTS = ("baseline", "baseline_star", "full", "full_star")


class PipelineError(RuntimeError):
    exit_code = 1


class DatasetMissing(PipelineError):
    exit_code = 3


class CheckpointMismatch(PipelineError):
    exit_code = 5


# -- io helpers ----------------------------------------------------------------

def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json(path, doc) -> None:
    write_atomic(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def combine_hashes(*parts: str) -> str:
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


class Workspace:
    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.root = Path(out)
        self.env_dir = self.root / cfg.paths.env_dir
        self.ckpt_dir = self.root / cfg.paths.checkpoint_dir
        self.report_dir = self.root / cfg.paths.report_dir
        self.manifest_dir = self.root / cfg.paths.manifest_dir

    def ckpt(self, name: str) -> Path:
        return self.ckpt_dir / f"{name}.ckpt"

    def sidecar(self, name: str) -> Path:
        return self.ckpt_dir / f"{name}.json"


# -- datasets ------------------------------------------------------------------

def gen_envs(cfg: RunConfig, out) -> dict:
    ws = Workspace(cfg, out)
    ws.env_dir.mkdir(parents=True, exist_ok=True)
    envs = generate_environments(cfg.worldgen.n_envs, cfg.seed, cfg.worldgen.world)
    splits = split_environments(envs, cfg.worldgen.split_ratios, derive_rng(cfg.seed, "env-split"))
    for g in envs:
        save_environment(g, ws.env_dir / f"{g.env_id}.json")
    doc = {"seed": cfg.seed,
           "splits": {name: [f"{g.env_id}.json" for g in gs] for name, gs in splits.items()}}
    write_json(ws.env_dir / SPLIT_FILE, doc)
    return {"n_envs": len(envs), **{f"n_{k}": len(v) for k, v in splits.items()},
            "env_hash": env_hash(ws)}


def env_hash(ws: Workspace) -> str:
    split_path = ws.env_dir / SPLIT_FILE
    if not split_path.exists():
        raise DatasetMissing(f"no environment dataset at {ws.env_dir} (run gen-envs first)")
    doc = json.loads(split_path.read_text())
    parts = [file_hash(split_path)]
    for name in sorted(f for files in doc["splits"].values() for f in files):
        p = ws.env_dir / name
        if not p.exists():
            raise DatasetMissing(f"environment file {p} listed in {SPLIT_FILE} is missing")
        parts.append(f"{name}:{file_hash(p)}")
    return combine_hashes(*parts)


class Dataset:
    """Environments, splits and every derived sample set."""

    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.ws = Workspace(cfg, out)
        self.hash = env_hash(self.ws)
        doc = json.loads((self.ws.env_dir / SPLIT_FILE).read_text())
        self.splits = {name: [load_environment(self.ws.env_dir / f) for f in files]
                       for name, files in doc["splits"].items()}
        self.by_id: dict[str, RoomGraph] = {g.env_id: g for gs in self.splits.values() for g in gs}
        self._pairs = None

    @property
    def nav_pairs(self):
        if self._pairs is None:
            self._pairs = sample_nav_pairs(self.splits, self.cfg.data.nav_counts,
                                           derive_rng(self.cfg.seed, "nav-pairs"))
        return self._pairs

    def cggn_samples(self, split: str, count: int):
        envs = self.splits[split]
        if not envs:
            raise DatasetMissing(f"split {split!r} has no environments")
        rng = derive_rng(self.cfg.seed, "cggn-samples", split)
        return [sample_cggn_example(envs[i % len(envs)], rng, B=self.cfg.cggn.B) for i in range(count)]

    def localizer_pairs(self):
        return make_pair_dataset(self.splits["train"], derive_rng(self.cfg.seed, "localizer-pairs"),
                                 self.cfg.data.localizer_pairs, Observer(self.cfg.observer))


# -- checkpoints ---------------------------------------------------------------

def _save(ws: Workspace, name: str, arrays: dict, meta: dict) -> None:
    ws.ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ws.ckpt(name), arrays)
    write_json(ws.sidecar(name), {**meta, "checkpoint_sha256": file_hash(ws.ckpt(name))})


def _load(ws: Workspace, name: str, data_hash: str) -> tuple[dict, dict]:
    p, side = ws.ckpt(name), ws.sidecar(name)
    if not p.exists() or not side.exists():
        raise CheckpointMismatch(f"missing checkpoint {p} (train it first)")
    meta = json.loads(side.read_text())
    if meta.get("env_hash") != data_hash:
        raise CheckpointMismatch(f"{p} was trained on environment set {meta.get('env_hash')}, "
                                 f"current set is {data_hash}")
    if meta.get("checkpoint_sha256") != file_hash(p):
        raise CheckpointMismatch(f"{p} does not match its sidecar hash")
    return load_checkpoint(p), meta


def _split_state(arrays: dict) -> tuple[dict, dict]:
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    adam = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return params, adam


def _restore(params, state: dict, where: str) -> None:
    try:
        params.load_state(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"{where}: checkpoint does not fit the configured model ({exc})") from exc


def load_localizer(cfg: RunConfig, data: Dataset) -> LocalizerModel:
    arrays, meta = _load(data.ws, "localizer", data.hash)
    m = LocalizerModel(cfg.localizer, zero_init=True)
    _restore(m.params, _split_state(arrays)[0], "localizer")
    m.heldout_accuracy = meta.get("heldout_accuracy")
    return m


def load_cggn(cfg: RunConfig, data: Dataset) -> CggnModel:
    arrays, meta = _load(data.ws, "cggn", data.hash)
    if not meta.get("complete"):
        raise CheckpointMismatch("cggn checkpoint is partial; rerun `train cggn --resume`")
    m = CggnModel(cfg.cggn, rng=0)
    _restore(m.params, _split_state(arrays)[0], "cggn")
    return m


# -- training ------------------------------------------------------------------

def train_localizer_stage(cfg: RunConfig, out, log=None, resume: bool = False) -> dict:
    data = Dataset(cfg, out)
    if resume and _complete(data, "localizer"):
        return {"skipped": True}
    model = train_localizer(data.localizer_pairs(), cfg.localizer, log=log)
    meta = {"kind": "localizer", "config": asdict(cfg.localizer), "env_hash": data.hash, "complete": True,
            "heldout_accuracy": model.heldout_accuracy}
    _save(data.ws, "localizer", model.params.state(), meta)
    return {"heldout_accuracy": model.heldout_accuracy}


def _complete(data: Dataset, name: str) -> bool:
    side = data.ws.sidecar(name)
    if not side.exists() or not data.ws.ckpt(name).exists():
        return False
    meta = json.loads(side.read_text())
    return bool(meta.get("complete")) and meta.get("env_hash") == data.hash


def train_cggn_stage(cfg: RunConfig, out, iterations: int | None = None, log=None, resume: bool = False,
                     checkpoint_every: int = 500) -> dict:
    data = Dataset(cfg, out)
    ccfg = cfg.cggn if iterations is None else replace(cfg.cggn, iterations=iterations)
    model, adam, start = None, None, 0
    if resume and data.ws.ckpt("cggn").exists():
        arrays, meta = _load(data.ws, "cggn", data.hash)
        if not _same_config(meta["config"], asdict(ccfg), "iterations"):
            raise CheckpointMismatch("cggn checkpoint was written under a different configuration")
        params, adam_arr = _split_state(arrays)
        model = CggnModel(ccfg, rng=0)
        _restore(model.params, params, "cggn")
        adam = adam_from_arrays(adam_arr, ccfg.lr)
        start = meta["iterations_done"]
    samples = data.cggn_samples("train", cfg.data.cggn_train_samples)

    def save(m, a, done):
        meta = {"kind": "cggn", "config": asdict(ccfg), "env_hash": data.hash,
                "iterations_done": done, "complete": done >= ccfg.iterations}
        _save(data.ws, "cggn", {**m.params.state(), **adam_to_arrays(a)}, meta)

    if start >= ccfg.iterations:
        return {"skipped": True}
    adam = adam or AdamState(lr=ccfg.lr)
    model, curve = train_cggn(samples, ccfg, model=model, adam=adam, start=start, log=log,
                              on_checkpoint=save, checkpoint_every=checkpoint_every)
    save(model, adam, ccfg.iterations)
    write_json(data.ws.ckpt_dir / "cggn.curve.json", _merge_curve(data.ws, "cggn", curve, start))
    return {"iterations": ccfg.iterations, "final": curve[-1] if curve else None}


def _same_config(saved: dict, current: dict, length_key: str) -> bool:
    """Equal up to the training length, which a resumed run may extend."""
    drop = lambda d: {k: v for k, v in d.items() if k != length_key}
    return json.loads(json.dumps(drop(saved))) == json.loads(json.dumps(drop(current)))


def _merge_curve(ws: Workspace, name: str, curve: list[dict], start: int) -> list[dict]:
    p = ws.ckpt_dir / f"{name}.curve.json"
    old = json.loads(p.read_text()) if (start and p.exists()) else []
    key = "iteration" if name == "cggn" else "update"
    return [c for c in old if c[key] < start] + curve


def build_agent(cfg: RunConfig, variant: str, seed: int, localizer, cggn) -> ag.Agent:
    acfg = cfg.agent
    perfect = variant.endswith("_star")
    kind = "baseline" if variant.startswith("baseline") else "full"
    observer = Observer(replace(cfg.observer, perfect=True)) if perfect else Observer(cfg.observer)
    loc = OracleLocalizer() if perfect else localizer
    informed = ag.InformedConfig(use_subgoal=kind == "full", max_steps=acfg.max_steps)
    model = ag.PolicyModel(kind, acfg.hidden, derive_rng(seed, "policy-init", variant))
    label = {"baseline": "Baseline", "baseline_star": "Baseline*", "full": "Full", "full_star": "Full*"}[variant]
    return ag.Agent(kind, informed, model, observer, loc, cggn if kind == "full" else None,
                    acfg.cggn_samples, label)


def agent_name(variant: str, seed: int) -> str:
    return f"agent_{variant}_s{seed}"


def train_agents_stage(cfg: RunConfig, out, variants=AGENT_VARIANTS, seeds=None, log=None,
                       resume: bool = False, iterations: int | None = None, checkpoint_every: int = 50) -> dict:
    data = Dataset(cfg, out)
    localizer = load_localizer(cfg, data)
    cggn = load_cggn(cfg, data)
    pairs = data.nav_pairs["train"]
    summary = {}
    acfg_base = cfg.agent if iterations is None else replace(cfg.agent, episodes=iterations * cfg.agent.batch_episodes)
    for seed in (cfg.eval.train_seeds if seeds is None else seeds):
        acfg = replace(acfg_base, seed=seed)
        for variant in variants:
            name = agent_name(variant, seed)
            agent = build_agent(cfg, variant, seed, localizer, cggn)
            adam, start = None, 0
            if resume and data.ws.ckpt(name).exists():
                arrays, meta = _load(data.ws, name, data.hash)
                if not _same_config(meta["config"], asdict(acfg), "episodes"):
                    raise CheckpointMismatch(f"{name} was written under a different configuration")
                params, adam_arr = _split_state(arrays)
                _restore(agent.model.params, params, name)
                adam, start = adam_from_arrays(adam_arr, acfg.lr), meta["updates_done"]
            n_updates = max(1, acfg.episodes // acfg.batch_episodes)
            if start >= n_updates:
                summary[name] = "skipped"
                continue
            adam = adam or AdamState(lr=acfg.lr)

            def save(model, a, done, name=name, acfg=acfg, n_updates=n_updates):
                meta = {"kind": "agent", "variant": name, "config": asdict(acfg), "env_hash": data.hash,
                        "updates_done": done, "complete": done >= n_updates}
                _save(data.ws, name, {**model.params.state(), **adam_to_arrays(a)}, meta)

            curve = ag.train_student_forcing(pairs, data.by_id, agent, acfg, log=log, adam=adam,
                                             start_update=start, on_checkpoint=save,
                                             checkpoint_every=checkpoint_every)
            save(agent.model, adam, n_updates)
            write_json(data.ws.ckpt_dir / f"{name}.curve.json", _merge_curve(data.ws, name, curve, start))
            summary[name] = curve[-1]["ce"] if curve else None
    return summary


def load_agent(cfg: RunConfig, data: Dataset, variant: str, seed: int, localizer, cggn) -> ag.Agent:
    name = agent_name(variant, seed)
    arrays, meta = _load(data.ws, name, data.hash)
    if not meta.get("complete"):
        raise CheckpointMismatch(f"{name} checkpoint is partial")
    agent = build_agent(cfg, variant, seed, localizer, cggn)
    _restore(agent.model.params, _split_state(arrays)[0], name)
    return agent


# -- evaluation ----------------------------------------------------------------

def _eval_chunk(args):
    agent, pairs, envs, seed, split, start, want_traces = args
    traces = [] if want_traces else None
    res = ag.evaluate_agent(agent, pairs, envs, seed, split, traces, start_index=start)
    return res, traces


def evaluate_parallel(agent: ag.Agent, pairs, envs, seed: int, split: str, workers: int = 1,
                      traces: list | None = None):
    """Episode-level fan out; each episode owns its derived stream, so results do not depend on ``workers``."""
    if workers <= 1 or len(pairs) < 2 * workers:
        return ag.evaluate_agent(agent, pairs, envs, seed, split, traces)
    bounds = np.linspace(0, len(pairs), workers + 1).astype(int)
    jobs = [(agent, pairs[a:b], envs, seed, split, int(a), traces is not None)
            for a, b in zip(bounds[:-1], bounds[1:])]
    results = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for res, tr in pool.map(_eval_chunk, jobs):
            results += res
            if traces is not None:
                traces += tr
    return results


NAV_ROWS = [
    # label, variant, informed overrides
    ("RANDOM", "random", {}),
    ("Baseline", "baseline", {}),
    ("Full [G,P,M]", "full", {"use_perception_gate": True, "use_map": True}),
    ("Full* [G,P*,M]", "full_star", {"use_perception_gate": True, "use_map": True}),
]

ABLATION_ROWS = [
    ("RANDOM", "random", {}),
    ("Baseline", "baseline", {}),
    ("Baseline +50steps", "baseline", {"max_steps": 50}),
    ("[G]", "full", {}),
    ("[G,P]", "full", {"use_perception_gate": True}),
    ("[G,M]", "full", {"use_map": True}),
    ("[G,P,M]", "full", {"use_perception_gate": True, "use_map": True}),
    ("[G,P,M] +50steps", "full", {"use_perception_gate": True, "use_map": True, "max_steps": 50}),
    ("[G,P*,M]", "full_star", {"use_perception_gate": True, "use_map": True}),
    ("[G,P*,M] +50steps", "full_star", {"use_perception_gate": True, "use_map": True, "max_steps": 50}),
    ("Baseline*", "baseline_star", {}),
]


def _input_hash(cfg: RunConfig, data: Dataset, names: list[str]) -> str:
    parts = [cfg.content_hash(), data.hash]
    parts += [f"{n}:{file_hash(data.ws.ckpt(n))}" for n in sorted(names) if data.ws.ckpt(n).exists()]
    return combine_hashes(*parts)


def eval_cggn_stage(cfg: RunConfig, out) -> MetricReport:
    data = Dataset(cfg, out)
    model = load_cggn(cfg, data)
    samples = data.cggn_samples("test", cfg.data.cggn_test_samples)
    rep = MetricReport(manifest_hash=_input_hash(cfg, data, ["cggn"]))
    for best_of, label in ((False, "CGGN (own target)"), (True, "CGGN (best-of ground truths)")):
        m = eval_graph_prediction(model, samples, data.by_id, seed=cfg.seed,
                                  n_samples=cfg.eval.cggn_samples, best_of=best_of)
        rep.add_row(label, {"best_of": best_of}, "test", m)
    rep.extra["chance_node_top5"] = 5 / 30
    rep.check()
    return rep


def eval_agents_stage(cfg: RunConfig, out, rows=NAV_ROWS, traces_dir=None, scene_graph_dir=None) -> MetricReport:
    data = Dataset(cfg, out)
    localizer = load_localizer(cfg, data)
    cggn = load_cggn(cfg, data)
    pairs = data.nav_pairs["test_unseen"]
    if cfg.eval.test_episodes is not None:
        pairs = pairs[:cfg.eval.test_episodes]
    if not pairs:
        raise DatasetMissing("no test_unseen navigation pairs (check data.nav_counts)")
    seeds = list(cfg.eval.train_seeds)
    names = ["localizer", "cggn"] + [agent_name(v, s) for _, v, _ in rows if v != "random" for s in seeds]
    rep = MetricReport(manifest_hash=_input_hash(cfg, data, names))
    loaded: dict[tuple[str, int], ag.Agent] = {}
    for label, variant, flags in rows:
        per_seed = []
        for s in seeds:
            if variant == "random":
                agent = ag.random_agent(Observer(cfg.observer), cfg.agent.max_steps)
            else:
                if (variant, s) not in loaded:
                    loaded[(variant, s)] = load_agent(cfg, data, variant, s, localizer, cggn)
                agent = loaded[(variant, s)]
            agent = ag.with_informed(agent, **{"max_steps": cfg.agent.max_steps, **flags})
            traces = [] if traces_dir is not None else None
            res = evaluate_parallel(agent, pairs, data.by_id, cfg.seed, "test_unseen", cfg.eval.workers, traces)
            per_seed.append(nav_metrics(res))
            if traces is not None:
                ag.dump_traces_jsonl(traces, Path(traces_dir) / f"{_slug(label)}_s{s}.jsonl")
            if scene_graph_dir is not None and variant != "random":
                _dump_scene_graphs(agent, pairs, data, cfg, Path(scene_graph_dir) / f"{_slug(label)}_s{s}.jsonl")
        inf = ag.with_informed(ag.Agent("random"), **{"max_steps": cfg.agent.max_steps, **flags}).informed
        row_flags = {"G": variant.startswith("full"), "P": inf.use_perception_gate, "M": inf.use_map,
                     "perfect": variant.endswith("_star"), "max_steps": inf.max_steps}
        metrics = {k: float(np.mean([m[k] for m in per_seed])) for k in ("SR", "SPL", "OSR")}
        for i, s in enumerate(seeds):
            metrics.update({f"SR_s{s}": per_seed[i]["SR"], f"SPL_s{s}": per_seed[i]["SPL"]})
        metrics["episodes"] = len(pairs)
        rep.add_row(label, row_flags, "test_unseen", metrics)
    rep.check()
    return rep


def _slug(label: str) -> str:
    keep = [c if c.isalnum() else "_" for c in label.replace("*", "star").replace("+", "plus")]
    return "".join(keep).strip("_").replace("__", "_")


def _dump_scene_graphs(agent, pairs, data, cfg, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for i, p in enumerate(pairs):
            with no_grad():
                _, _, sg = ag.run_episode(agent, data.by_id[p.env_id], p.start_room, p.goal_class,
                                          ag.episode_rng(cfg.seed, "test_unseen", i), "greedy")
            f.write(json.dumps({"episode": i, "env_id": p.env_id, "scene_graph": sg.to_json()},
                               sort_keys=True) + "\n")


def write_report(cfg: RunConfig, out, name: str, rep: MetricReport) -> Path:
    ws = Workspace(cfg, out)
    path = ws.report_dir / f"{name}.json"
    write_atomic(path, rep.dumps() + "\n")
    write_atomic(ws.report_dir / f"{name}.csv", rep.to_csv())
    return path


def write_manifest(cfg: RunConfig, out, command: str, started: float, summary: dict,
                   input_hash: str = "") -> Path:
    ws = Workspace(cfg, out)
    doc = {"command": command, "config": cfg.to_dict(), "input_hash": input_hash,
           "wall_clock_seconds": round(time.time() - started, 3), "summary": summary}
    path = ws.manifest_dir / f"{command.replace(' ', '_')}.json"
    write_json(path, doc)
    return path
