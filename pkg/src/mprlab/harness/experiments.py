"""End-to-end pipelines behind the CLI subcommands.

Every step reads its inputs from and writes its outputs to one workspace
directory, and records a manifest with content hashes of both.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from mprlab.errors import ConfigError, NumericError
from mprlab.harness.aggregate import (
    ExperimentReport, aggregate, reward_curve_rows, summarize, write_reward_curves,
)
from mprlab.harness.config import RunConfig, component_seed
from mprlab.predictor import MotionPredictor, split_by_episode, zero_motion_mse
from mprlab.reward import (
    MPRProvider, TemporalValueRegressor, label_episode, make_provider, value_targets,
    write_reward_csv,
)
from mprlab.rl import (
    BCPolicy, SACAgent, SACConfig, act, evaluate, obs_dim, pretrain_critic, relabel_offline,
    train_online, write_metrics,
)
from mprlab.tracks import prepare_items
from mprlab.worldsim import (
    CorpusSpec, EpisodeRecord, generate_corpus, generate_episode, load_corpus, make_env,
    save_corpus, scripted_failure, scripted_success,
)

PROVIDERS = ("mpr", "temporal_distance", "sparse", "privileged_dense")
NOMASK = "mpr_nomask"


def file_hash(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Artifact layout under one output directory."""

    def __init__(self, root):
        self.root = Path(root)

    corpus = property(lambda self: self.root / "corpus" / "human_corpus.jsonl")
    demos = property(lambda self: self.root / "corpus" / "robot_demos.jsonl")
    predictor = property(lambda self: self.root / "models" / "predictor.ckpt")
    predictor_metrics = property(lambda self: self.root / "models" / "predictor_metrics.csv")
    predictor_nomask = property(lambda self: self.root / "models" / "predictor_nomask.ckpt")
    bc = property(lambda self: self.root / "models" / "bc.ckpt")
    value = property(lambda self: self.root / "models" / "value.ckpt")

    def run_dir(self, provider: str, seed_index: int) -> Path:
        return self.root / "runs" / provider / f"seed{seed_index}"

    def require(self, *paths) -> None:
        for p in paths:
            if not Path(p).exists():
                raise ConfigError(f"missing upstream artifact: {p}")

    def manifest(self, name: str, cfg: RunConfig, inputs, outputs, started: float,
                 extra: dict | None = None) -> Path:
        path = self.root / "manifests" / f"{name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "command": name, "seed": cfg.seed, "config": cfg.to_dict(),
            "inputs": {str(p): file_hash(p) for p in inputs},
            "outputs": {str(p): file_hash(p) for p in outputs},
            "wall_time_s": round(time.time() - started, 3),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        if extra:
            doc.update(extra)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# --- data -------------------------------------------------------------------------

def corpus_spec(cfg: RunConfig, **overrides) -> CorpusSpec:
    c = cfg.corpus
    base = dict(env_id=cfg.env.env_id, n_episodes=c.n_episodes, hesitation_prob=c.hesitation_prob,
                pause_min=c.pause_min, pause_max=c.pause_max,
                camera_jitter_std=c.camera_jitter_std, expert_noise_std=c.expert_noise_std,
                embodiment="human", seed=component_seed(cfg.seed, "corpus"),
                horizon=cfg.env.horizon)
    base.update(overrides)
    return CorpusSpec(**base)


def robot_demos(cfg: RunConfig, noise_std: float, n_demos: int | None = None) -> list[EpisodeRecord]:
    """First ``n_demos`` successful noisy robot-expert episodes (teleop stand-ins)."""
    n = cfg.rl.n_demos if n_demos is None else n_demos
    spec = CorpusSpec(env_id=cfg.env.env_id, n_episodes=max(n, 1), hesitation_prob=0.0,
                      camera_jitter_std=0.0, expert_noise_std=noise_std, embodiment="robot",
                      seed=component_seed(cfg.seed, "demos"), horizon=cfg.env.horizon)
    demos, index = [], 0
    while len(demos) < n:
        rec = generate_episode(spec, index)
        index += 1
        if rec.success:
            demos.append(rec)
        if index >= 20 and len(demos) < 0.05 * index:
            raise ConfigError(f"demo expert with noise {noise_std} almost never succeeds")
    return demos


def gen_demos(cfg: RunConfig, ws: Workspace) -> dict:
    started = time.time()
    spec = corpus_spec(cfg)
    records, stats = generate_corpus(spec)
    save_corpus(ws.corpus, records, spec, stats)
    demos = robot_demos(cfg, cfg.rl.demo_noise_std)
    save_corpus(ws.demos, demos)
    ws.manifest("gen-demos", cfg, [], [ws.corpus, ws.demos], started,
                {"n_success": stats["n_success"], "n_generated": stats["n_generated"]})
    return {"corpus": ws.corpus, "demos": ws.demos, **stats}


# --- models -----------------------------------------------------------------------

def make_predictor(cfg: RunConfig, use_masks: bool = True) -> MotionPredictor:
    p = cfg.predictor
    return MotionPredictor(arch=p.arch, d_model=p.d_model, n_heads=p.n_heads,
                           n_blocks=p.n_blocks, mlp_ratio=p.mlp_ratio,
                           context_width=p.context_width, epochs=p.epochs,
                           batch_size=p.batch_size, lr=p.lr, val_ratio=p.val_ratio,
                           seed=component_seed(cfg.seed, "predictor"),
                           patience=p.patience or None, time_budget_s=p.time_budget_s or None)


def predictor_items(cfg: RunConfig, records, use_masks: bool = True):
    rng = np.random.default_rng(component_seed(cfg.seed, "mixture"))
    return prepare_items([(r.episode_id, r.tracks) for r in records], rng, use_masks)


def train_predictor(cfg: RunConfig, ws: Workspace, use_masks: bool = True) -> dict:
    """Fit on the human corpus.  ``use_masks=False`` trains the ablation model on every point."""
    started = time.time()
    ws.require(ws.corpus)
    ckpt = ws.predictor if use_masks else ws.predictor_nomask
    metrics = ws.predictor_metrics if use_masks else ws.root / "models" / "predictor_nomask_metrics.csv"
    items = predictor_items(cfg, load_corpus(ws.corpus), use_masks)
    model = make_predictor(cfg).fit(items, metrics_path=metrics)
    model.save(ckpt)
    _, val = split_by_episode(items, model.val_ratio, np.random.default_rng(model.seed))
    zero = zero_motion_mse(val)
    result = {"val_mse": model.best_val_loss_, "zero_motion_mse": zero,
              "ratio": model.best_val_loss_ / zero, "epochs_run": model.epochs_run_,
              "stop_reason": model.stop_reason_, "wall_time_s": time.time() - started}
    name = "train-predictor" if use_masks else "train-predictor-nomask"
    ws.manifest(name, cfg, [ws.corpus], [ckpt, metrics], started, {"result": result})
    return result


def fit_bc(cfg: RunConfig, demos) -> BCPolicy:
    return BCPolicy(epochs=cfg.rl.bc_epochs, seed=component_seed(cfg.seed, "bc")).fit_demos(
        demos, cfg.rl.n_demos)


def base_success(cfg: RunConfig, bc: BCPolicy) -> float:
    env = make_env(cfg.env.env_id, "robot", cfg.env.horizon)
    return evaluate(env, bc.act, cfg.eval.episodes, cfg.eval.seed)


def train_bc(cfg: RunConfig, ws: Workspace) -> dict:
    started = time.time()
    ws.require(ws.demos)
    bc = fit_bc(cfg, load_corpus(ws.demos))
    bc.save(ws.bc)
    rate = base_success(cfg, bc)
    ws.manifest("train-bc", cfg, [ws.demos], [ws.bc], started, {"base_success": round(rate, 2)})
    return {"base_success": rate}


def calibrate_base(cfg: RunConfig, ws: Workspace, ladder, band=(0.3, 0.6)) -> dict:
    """Raise the demo noise along ``ladder`` until the BC success falls inside ``band``."""
    started = time.time()
    tried = []
    for sigma in ladder:
        demos = robot_demos(cfg, sigma)
        bc = fit_bc(cfg, demos)
        rate = base_success(cfg, bc)
        tried.append({"demo_noise_std": sigma, "base_success": rate})
        if band[0] <= rate <= band[1]:
            cfg.rl.demo_noise_std = sigma
            save_corpus(ws.demos, demos)
            bc.save(ws.bc)
            ws.manifest("calibrate-base", cfg, [], [ws.demos, ws.bc], started, {"tried": tried})
            return {"demo_noise_std": sigma, "base_success": rate, "tried": tried}
    raise ConfigError(f"no demo noise level put the base policy in {band}: {tried}")


def train_value(cfg: RunConfig, ws: Workspace, records=None, save: bool = True) -> TemporalValueRegressor:
    """Frames-to-go regressor on the human corpus (the temporal-distance baseline)."""
    started = time.time()
    if records is None:
        ws.require(ws.corpus)
        records = load_corpus(ws.corpus)
    net = TemporalValueRegressor(epochs=cfg.reward.value_epochs,
                                 seed=component_seed(cfg.seed, "value")).fit_episodes(records)
    if save:
        net.save(ws.value)
        ws.manifest("train-value", cfg, [ws.corpus], [ws.value], started)
    return net


def build_provider(cfg: RunConfig, ws: Workspace, kind: str):
    use_masks = cfg.reward.use_masks
    if kind == NOMASK:
        kind, use_masks = "mpr", False
    predictor = value = None
    inputs = []
    if kind == "mpr":
        path = ws.predictor if use_masks else ws.predictor_nomask
        ws.require(path)
        predictor = MotionPredictor.load(path)
        inputs.append(path)
    elif kind == "temporal_distance":
        if not ws.value.exists():
            train_value(cfg, ws)
        value = TemporalValueRegressor.load(ws.value)
        inputs.append(ws.value)
    provider = make_provider(kind, cfg.env.env_id, predictor=predictor, value_net=value,
                             use_masks=use_masks, horizon=cfg.env.horizon)
    if isinstance(provider, MPRProvider):
        provider.seed = component_seed(cfg.seed, "mpr-inference")
    return provider, inputs


def label(cfg: RunConfig, ws: Workspace, kind: str, episodes_path=None) -> Path:
    started = time.time()
    src = Path(episodes_path) if episodes_path else ws.demos
    ws.require(src)
    provider, inputs = build_provider(cfg, ws, kind)
    out_dir = ws.root / "rewards" / kind
    outputs = []
    for ep in load_corpus(src):
        outputs.append(write_reward_csv(out_dir / f"{ep.episode_id}.csv", label_episode(provider, ep)))
    ws.manifest(f"label-{kind}", cfg, [src, *inputs], outputs, started)
    return out_dir


# --- reinforcement learning -------------------------------------------------------

def sac_config(cfg: RunConfig) -> SACConfig:
    r = cfg.rl
    return SACConfig(hidden=tuple(r.hidden), gamma=r.gamma, polyak=r.polyak, lr=r.lr,
                     batch_size=r.batch_size, learning_starts=r.learning_starts, utd=r.utd,
                     residual_scale=r.residual_scale, target_entropy=r.target_entropy,
                     init_alpha=r.init_alpha, offline_ratio=r.offline_ratio)


def train_rl(cfg: RunConfig, ws: Workspace, kind: str, seed_index: int = 0) -> dict:
    started = time.time()
    if kind not in (*PROVIDERS, NOMASK):
        raise ConfigError(f"unknown reward provider '{kind}'")
    ws.require(ws.demos, ws.bc)
    provider, inputs = build_provider(cfg, ws, kind)
    env = make_env(cfg.env.env_id, "robot", cfg.env.horizon)
    base = BCPolicy.load(ws.bc)
    demos = load_corpus(ws.demos)[:cfg.rl.n_demos]
    seed = component_seed(cfg.seed, "rl", seed_index)
    agent = SACAgent(obs_dim(env), config=sac_config(cfg), seed=seed)
    rng = np.random.default_rng(seed)
    offline = relabel_offline(demos, env, base, cfg.rl.residual_scale, provider)
    pretrain_critic(agent, offline, cfg.rl.pretrain_steps, rng)
    run = ws.run_dir(kind, seed_index)
    evals = []
    try:
        result = train_online(env, agent, base, provider, offline, cfg.rl.n_episodes, rng,
                              eval_interval=cfg.eval.interval, eval_episodes=cfg.eval.episodes,
                              eval_seed=cfg.eval.seed, on_eval=lambda ep, r: evals.append([ep, r]))
    except NumericError as exc:
        _dump_diagnostics(run / "diagnostic.json", exc, agent, evals)
        raise
    metrics = write_metrics(run / "metrics.csv", result.rows)
    ckpt = _save_agent(agent, run / "agent_final.ckpt", kind)
    summary = {"provider": kind, "seed_index": seed_index, "base_success": result.base_success,
               "final_success": result.final_success, "best_success": result.best_success,
               "skipped_updates": result.skipped_updates, "n_updates": agent.n_updates}
    ws.manifest(f"train-rl-{kind}-seed{seed_index}", cfg, [ws.demos, ws.bc, *inputs],
                [metrics, ckpt], started, {"result": summary})
    return {**summary, "metrics": metrics, "checkpoint": ckpt}


def _dump_diagnostics(path: Path, exc: Exception, agent: SACAgent, evals) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    norms = {k: float(np.linalg.norm(v)) if np.all(np.isfinite(v)) else None
             for k, v in agent.state_dict().items()}
    doc = {"error": str(exc), "n_updates": agent.n_updates, "evaluations": evals,
           "param_norms": norms}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _save_agent(agent: SACAgent, path: Path, kind: str) -> Path:
    from mprlab import numcore as nc
    path = nc.save_checkpoint(path, agent.state_dict())
    nc.write_sidecar(path, {"kind": "sac_agent", "provider": kind, "obs_dim": agent.obs_dim,
                            "config": {k: list(v) if isinstance(v, tuple) else v
                                       for k, v in asdict(agent.cfg).items()}})
    return path


def load_agent(path) -> SACAgent:
    from mprlab import numcore as nc
    meta = nc.read_sidecar(path)
    conf = dict(meta["config"])
    conf["hidden"] = tuple(conf["hidden"])
    agent = SACAgent(meta["obs_dim"], config=SACConfig(**conf))
    agent.load_state_dict(nc.load_checkpoint(path))
    return agent


def evaluate_checkpoint(cfg: RunConfig, ws: Workspace, checkpoint: str, episodes: int,
                        provider: str = "mpr", seed_index: int = 0) -> dict:
    """``checkpoint`` is ``base``, ``final`` (of the named run) or a path."""
    started = time.time()
    ws.require(ws.bc)
    base = BCPolicy.load(ws.bc)
    env = make_env(cfg.env.env_id, "robot", cfg.env.horizon)
    if checkpoint == "base":
        rate, inputs = evaluate(env, base.act, episodes, cfg.eval.seed), [ws.bc]
    else:
        path = ws.run_dir(provider, seed_index) / "agent_final.ckpt" if checkpoint == "final" \
            else Path(checkpoint)
        ws.require(path)
        agent = load_agent(path)
        rate = evaluate(env, lambda o: act(agent, base, o, "eval")[0], episodes, cfg.eval.seed)
        inputs = [ws.bc, path]
    result = {"checkpoint": checkpoint, "episodes": episodes, "success_rate": round(rate, 2)}
    ws.manifest("evaluate", cfg, inputs, [], started, {"result": result})
    return result


def compare(cfg: RunConfig, ws: Workspace, providers, n_seeds: int, tag: str = "compare") -> list[ExperimentReport]:
    started = time.time()
    reports = []
    for kind in providers:
        runs = [train_rl(cfg, ws, kind, k) for k in range(n_seeds)]
        reports.append(summarize(ExperimentReport(
            kind, runs[0]["base_success"], [str(r["metrics"]) for r in runs])))
    out = aggregate(reports, ws.root / "reports" / f"{tag}.csv")
    report_json = ws.root / "reports" / f"{tag}.json"
    report_json.write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n",
                           encoding="utf-8")
    ws.manifest(tag, cfg, [Path(p) for r in reports for p in r.metrics_paths],
                [out, report_json], started)
    return reports


# --- studies ----------------------------------------------------------------------

def reward_spread(provider, episodes) -> float:
    """Std of per-step rewards pooled over the episodes."""
    return float(np.concatenate([label_episode(provider, ep).rewards for ep in episodes]).std())


def success_episodes(cfg: RunConfig, n: int, name: str = "success-episodes"):
    rng = np.random.default_rng(component_seed(cfg.seed, name))
    return [scripted_success(cfg.env.env_id, rng, f"success-{i:03d}", noise_std=0.1,
                             horizon=cfg.env.horizon) for i in range(n)]


def failure_episodes(cfg: RunConfig, n: int, mode: str = "miss_handle"):
    rng = np.random.default_rng(component_seed(cfg.seed, mode))
    return [scripted_failure(cfg.env.env_id, mode, rng, f"{mode}-{i:03d}", cfg.env.horizon)
            for i in range(n)]


def ablate_nomask(cfg: RunConfig, ws: Workspace, n_seeds: int, n_episodes: int = 50,
                  train: bool = True) -> dict:
    started = time.time()
    ws.require(ws.predictor)
    if not ws.predictor_nomask.exists():
        train_predictor(cfg, ws, use_masks=False)
    eps = success_episodes(cfg, n_episodes)
    masked = MPRProvider(MotionPredictor.load(ws.predictor), cfg.env.env_id, use_masks=True,
                         horizon=cfg.env.horizon)
    unmasked = MPRProvider(MotionPredictor.load(ws.predictor_nomask), cfg.env.env_id,
                           use_masks=False, horizon=cfg.env.horizon)
    result = {"std_masked": reward_spread(masked, eps), "std_unmasked": reward_spread(unmasked, eps)}
    curves = []
    for name, prov in (("mpr", masked), (NOMASK, unmasked)):
        curves += reward_curve_rows(name, [label_episode(prov, e).rewards for e in eps])
    out = write_reward_curves(ws.root / "reports" / "nomask_reward_curves.csv", curves)
    outputs = [out]
    if train:
        reports = compare(cfg, ws, ["mpr", NOMASK], n_seeds, tag="ablate-nomask")
        result.update({r.provider + "_median_final": r.median_final for r in reports})
    ws.manifest("ablate-nomask", cfg, [ws.predictor, ws.predictor_nomask], outputs, started, {"result": result})
    return result


def paired_hesitation_episodes(cfg: RunConfig, n: int, p_h: float = 0.1,
                               pause_range=(15, 30)) -> list[tuple[EpisodeRecord, EpisodeRecord]]:
    """(control, paused) pairs sharing reset, expert-noise and jitter streams."""
    paused_spec = corpus_spec(cfg, hesitation_prob=p_h, pause_min=pause_range[0],
                              pause_max=pause_range[1], seed=component_seed(cfg.seed, "hesitation"))
    control_spec = corpus_spec(cfg, hesitation_prob=0.0, seed=paused_spec.seed)
    pairs, index = [], 0
    while len(pairs) < n:
        ctrl, paused = generate_episode(control_spec, index), generate_episode(paused_spec, index)
        index += 1
        if ctrl.success and paused.success and paused.pauses:
            pairs.append((ctrl, paused))
        if index > 20 * n:
            raise ConfigError("could not collect paired hesitation episodes")
    return pairs


def hesitation_study(cfg: RunConfig, ws: Workspace, n_pairs: int = 100,
                     p_h: float = 0.1, pause_range=(15, 30)) -> dict:
    """Value bias on pre-pause frames versus MPR invariance on the shared transitions."""
    started = time.time()
    pairs = paired_hesitation_episodes(cfg, n_pairs, p_h, pause_range)
    control = [c for c, _ in pairs]
    paused = [p for _, p in pairs]
    v_control = train_value(cfg, ws, control, save=False)
    v_paused = train_value(cfg, ws, paused, save=False)
    pre_frames = [f for _, p in pairs for f in p.tracks.frames[:p.pauses[0][0] + 1]]
    gap = float(np.mean(v_control.values(pre_frames) - v_paused.values(pre_frames)))
    # the same gap measured on the regression targets themselves
    label_gaps = [value_targets(len(c.tracks.frames))[:p.pauses[0][0] + 1]
                  - value_targets(len(p.tracks.frames))[:p.pauses[0][0] + 1] for c, p in pairs]
    result = {"value_gap_pre_pause": gap, "label_gap_pre_pause": float(np.concatenate(label_gaps).mean()),
              "n_pre_pause_frames": len(pre_frames)}
    if ws.predictor.exists():
        provider = MPRProvider(MotionPredictor.load(ws.predictor), cfg.env.env_id,
                               horizon=cfg.env.horizon)
        diffs = []
        for c, p in pairs:
            start = p.pauses[0][0]
            rc = label_episode(provider, c).rewards[:start]
            rp = label_episode(provider, p).rewards[:start]
            diffs.append(np.abs(rc - rp))
        shared = np.concatenate(diffs)
        result.update({"mpr_max_abs_diff": float(shared.max()) if len(shared) else 0.0,
                       "n_shared_transitions": int(len(shared))})
    out = ws.root / "reports" / "hesitation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ws.manifest("hesitation-study", cfg, [ws.predictor] if ws.predictor.exists() else [],
                [out], started, {"result": result})
    return result
