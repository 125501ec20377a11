"""End-to-end pipeline: synth -> render -> fit -> ground -> bench ->
train-rel -> eval, with content-hashed stage skipping.

Every stage writes a manifest keyed by the hash of its config section plus
its upstream hashes; reruns with unchanged inputs do no work.
"""

import hashlib
import json
import os

import numpy as np

from . import rng
from .benchgen import (
    QARecord, SceneGraphEnv, generate, load_dataset, save_dataset, split, stats,
)
from .evalreport import evaluate
from .executor import FieldEnv
from .field import FieldModel, OptimConfig, fit_features, fit_radiance
from .ground import ConceptVocabulary, embed_concepts, segment
from .qlang import TemplateSet
from .relations import GeometricEvaluator
from .relnet import (
    LearnedEvaluator, RelationNet, TrainConfig, build_tuple_dataset, train_relations,
)
from .render import render_view, save_view, load_view, CameraPose
from .scene import (
    DEFAULT_CONCEPTS, GroundTruthGrids, SceneConfig, SceneGraph,
    SceneInfeasibleError, rasterize, sample_trajectory, synth_scene,
)

STAGES = ["synth", "render", "fit", "ground", "bench", "train_rel", "eval"]

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "out",
    "scenes": {
        "count": 10, "rooms": [2, 4], "objects_per_room": [2, 5],
        "resolution": 64, "min_gap": 0.3, "stack_prob": 0.35, "concepts": None,
        "palette_size": 8,
    },
    "render": {
        "width": 64, "height": 64, "focal_px": 55.0, "waypoints": 8,
        "samples_per_ray": 128, "noise_std": 0.05, "feature_dim": 16,
        "sigma_scale": 8.0,
    },
    "fit": {
        "iterations": 3000, "feature_iterations": 1000, "rays_per_batch": 2048,
        "step_size": 0.1, "feature_step_size": 0.01, "betas": [0.9, 0.99],
        "samples_per_ray": 128, "infill": True,
    },
    "ground": {"threshold": 0.5},
    "bench": {
        "questions": 200, "flatness_delta": 2, "split": [7, 1, 2],
        "train_questions": 400,
    },
    "relnet": {
        "epochs": 20, "batch_size": 16, "lr": 0.001,
        "crop_resolution": 16, "max_negative_ratio": 3.0,
    },
    "eval": {"evaluator": "learned", "threshold": 0.5},
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def load_config(path):
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}")
    return merge_config(raw, where=path)


def merge_config(raw, where="config"):
    """Defaults overlaid with raw; unknown keys are errors (typo guard)."""
    def merge(defaults, given, path):
        out = {}
        for k, v in given.items():
            if k not in defaults:
                raise ConfigError(f"{where}: unknown key {path}{k}")
            if isinstance(defaults[k], dict) and defaults[k]:
                if not isinstance(v, dict):
                    raise ConfigError(f"{where}: {path}{k} must be an object")
                out[k] = merge(defaults[k], v, f"{path}{k}.")
            else:
                out[k] = v
        for k, v in defaults.items():
            if k not in out:
                out[k] = json.loads(json.dumps(v)) if isinstance(v, dict) else v
        return out

    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: top level must be an object")
    return merge(DEFAULT_CONFIG, raw, "")


def _hash_obj(obj, extra=""):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")) + extra
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class Workspace:
    """Artifact directory with per-stage manifests."""

    def __init__(self, out_dir):
        self.out = out_dir
        os.makedirs(out_dir, exist_ok=True)

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def manifest_path(self, stage):
        return self.path("manifests", stage + ".json")

    def stage_hash(self, stage):
        mp = self.manifest_path(stage)
        if not os.path.exists(mp):
            return None
        with open(mp) as f:
            return json.load(f).get("hash")

    def is_done(self, stage, want_hash):
        mp = self.manifest_path(stage)
        if not os.path.exists(mp):
            return False
        with open(mp) as f:
            m = json.load(f)
        if m.get("hash") != want_hash:
            return False
        return all(os.path.exists(os.path.join(self.out, p)) for p in m.get("outputs", []))

    def write_manifest(self, stage, want_hash, outputs):
        with open(self.manifest_path(stage), "w") as f:
            json.dump({"stage": stage, "hash": want_hash,
                       "outputs": sorted(outputs)}, f, indent=1)


def _scene_paths(ws, i):
    return ws.path("scenes", f"scene_{i:04d}.json"), ws.path("grids", f"scene_{i:04d}.vxg")


def _load_scenes(ws, n):
    out = []
    for i in range(n):
        sp, gp = _scene_paths(ws, i)
        scene = SceneGraph.load(sp)
        out.append((scene, GroundTruthGrids.load(gp, scene)))
    return out


def _vocab(config) -> ConceptVocabulary:
    concepts = config["scenes"]["concepts"] or DEFAULT_CONCEPTS
    return embed_concepts(concepts, config["render"]["feature_dim"], config["seed"])


def stage_synth(config, ws, log):
    cfg = config["scenes"]
    sc = SceneConfig(
        rooms=tuple(cfg["rooms"]) if isinstance(cfg["rooms"], list) else cfg["rooms"],
        objects_per_room=tuple(cfg["objects_per_room"]),
        concepts=list(cfg["concepts"] or DEFAULT_CONCEPTS),
        min_gap=cfg["min_gap"], stack_prob=cfg["stack_prob"],
        resolution=cfg["resolution"], palette_size=cfg["palette_size"],
    )
    outputs = []
    for i in range(cfg["count"]):
        scene = None
        for retry in range(20):
            seed = rng.key_of(config["seed"], 1, i, retry) & 0x7FFFFFFF
            try:
                scene = synth_scene(sc, seed)
                break
            except SceneInfeasibleError:
                continue
        if scene is None:
            raise SceneInfeasibleError(f"scene {i}: infeasible after 20 seeds")
        grids = rasterize(scene, cfg["resolution"])
        sp, gp = _scene_paths(ws, i)
        scene.save(sp)
        grids.save(gp)
        outputs += [os.path.relpath(sp, ws.out), os.path.relpath(gp, ws.out)]
        log(f"  scene {i}: {len(scene.rooms)} rooms, {len(scene.objects)} objects, "
            f"{int(grids.occupancy.sum())} occupied voxels")
    vocab = _vocab(config)
    vp = ws.path("vocab.json")
    vocab.save(vp)
    outputs.append(os.path.relpath(vp, ws.out))
    return outputs


def stage_render(config, ws, log):
    rc = config["render"]
    vocab = ConceptVocabulary.load(ws.path("vocab.json"))
    outputs = []
    for i in range(config["scenes"]["count"]):
        sp, gp = _scene_paths(ws, i)
        scene = SceneGraph.load(sp)
        grids = GroundTruthGrids.load(gp, scene)
        poses = sample_trajectory(
            scene, rc["waypoints"], rng.key_of(config["seed"], 2, i) & 0x7FFFFFFF,
            grids=grids, width=rc["width"], height=rc["height"], focal_px=rc["focal_px"],
        )
        src = grids.radiance_source(sigma_scale=rc["sigma_scale"])
        vdir = f"views/scene_{i:04d}"
        pose_list = []
        for j, pose in enumerate(poses):
            view = render_view(
                src, pose, k=rc["samples_per_ray"],
                seed=rng.key_of(config["seed"], 3, i, j) & 0x7FFFFFFF,
                grids=grids, vocab=vocab, noise_std=rc["noise_std"],
            )
            base = ws.path(vdir, f"view_{j:03d}")
            save_view(view, base)
            pose_list.append(pose.to_json())
            outputs += [os.path.relpath(base + ext, ws.out) for ext in (".ppm", ".vxg")]
        pp = ws.path(vdir, "poses.json")
        with open(pp, "w") as f:
            json.dump(pose_list, f)
        outputs.append(os.path.relpath(pp, ws.out))
        log(f"  scene {i}: {len(poses)} views")
    return outputs


def _load_views(ws, i):
    vdir = f"views/scene_{i:04d}"
    with open(ws.path(vdir, "poses.json")) as f:
        pose_list = json.load(f)
    views = []
    for j, pj in enumerate(pose_list):
        views.append(load_view(ws.path(vdir, f"view_{j:03d}"), CameraPose.from_json(pj)))
    return views


def stage_fit(config, ws, log):
    fc = config["fit"]
    outputs = []
    for i in range(config["scenes"]["count"]):
        sp, gp = _scene_paths(ws, i)
        scene = SceneGraph.load(sp)
        grids = GroundTruthGrids.load(gp, scene)
        views = _load_views(ws, i)
        photo = OptimConfig(
            step_size=fc["step_size"], iterations=fc["iterations"],
            rays_per_batch=fc["rays_per_batch"],
            seed=rng.key_of(config["seed"], 4, i) & 0x7FFFFFFF,
            betas=tuple(fc["betas"]), samples_per_ray=fc["samples_per_ray"],
        )
        model = fit_radiance(
            views, photo, dims=grids.dims, origin=grids.origin,
            voxel_size=grids.voxel_size, feature_dim=config["render"]["feature_dim"],
        )
        feat = OptimConfig(
            step_size=fc["feature_step_size"], iterations=fc["feature_iterations"],
            rays_per_batch=fc["rays_per_batch"],
            seed=rng.key_of(config["seed"], 5, i) & 0x7FFFFFFF,
            betas=tuple(fc["betas"]), samples_per_ray=fc["samples_per_ray"],
        )
        fit_features(model, views, feat, infill=fc["infill"])
        mdir = ws.path("models", f"scene_{i:04d}", "model.json")
        model.save(os.path.dirname(mdir))
        rel = os.path.relpath(os.path.dirname(mdir), ws.out)
        outputs += [f"{rel}/{n}" for n in ("density.vxg", "color.vxg", "feature.vxg", "model.json")]
        log(f"  scene {i}: photometric loss {model.loss_trace[-1]:.2e}, "
            f"alignment loss {model.feature_loss_trace[-1]:.3f}")
    return outputs


def stage_ground(config, ws, log):
    vocab = ConceptVocabulary.load(ws.path("vocab.json"))
    outputs = []
    for i in range(config["scenes"]["count"]):
        model = FieldModel.load(ws.path("models", f"scene_{i:04d}"))
        field = segment(model, vocab, config["ground"]["threshold"])
        out = ws.path("ground", f"scene_{i:04d}.jsonl")
        field.export_jsonl(out)
        outputs.append(os.path.relpath(out, ws.out))
        log(f"  scene {i}: {len(field)} occupied voxels grounded")
    return outputs


def stage_bench(config, ws, log):
    bc = config["bench"]
    n = config["scenes"]["count"]
    pairs = _load_scenes(ws, n)
    scenes = [s for s, _ in pairs]
    envs = {s.scene_id: SceneGraphEnv(s, grids=g) for s, g in pairs}
    concepts = config["scenes"]["concepts"] or DEFAULT_CONCEPTS
    templates = TemplateSet.load(concepts)
    records, state = generate(scenes, templates, bc["questions"],
                              flatness_delta=bc["flatness_delta"],
                              seed=rng.key_of(config["seed"], 6) & 0x7FFFFFFF,
                              envs=envs, warn=lambda m: log(f"  warning: {m}"))
    save_dataset(records, ws.path("bench", "dataset.jsonl"))
    tr, va, te = split(records, tuple(bc["split"]),
                       seed=rng.key_of(config["seed"], 7) & 0x7FFFFFFF)
    save_dataset(tr, ws.path("bench", "train.jsonl"))
    save_dataset(va, ws.path("bench", "val.jsonl"))
    save_dataset(te, ws.path("bench", "test.jsonl"))
    # dedicated one-hop yes/no set over train scenes for relation training
    train_sids = {r.scene_id for r in tr}
    onehop_templates = TemplateSet(
        [t for t in templates.templates if t.id in ("relation_exist", "relation_the")],
        concepts)
    oh_records, _ = generate(
        [s for s in scenes if s.scene_id in train_sids], onehop_templates,
        bc["train_questions"], flatness_delta=bc["flatness_delta"],
        seed=rng.key_of(config["seed"], 8) & 0x7FFFFFFF,
        envs=envs, warn=lambda m: log(f"  warning (one-hop): {m}"))
    save_dataset(oh_records, ws.path("bench", "onehop.jsonl"))
    with open(ws.path("bench", "stats.json"), "w") as f:
        json.dump(stats(records), f, indent=1)
    log(f"  {len(records)} questions ({len(tr)}/{len(va)}/{len(te)} split), "
        f"{len(oh_records)} one-hop training questions")
    return [f"bench/{n}" for n in
            ("dataset.jsonl", "train.jsonl", "val.jsonl", "test.jsonl",
             "onehop.jsonl", "stats.json")]


def _field_env(config, ws, i, vocab, nets=None):
    model = FieldModel.load(ws.path("models", f"scene_{i:04d}"))
    field = segment(model, vocab, config["ground"]["threshold"])
    env = FieldEnv(field)
    if nets is not None:
        env.evaluator = LearnedEvaluator(nets, env.evaluator,
                                         config["relnet"]["crop_resolution"])
    return env


def _scene_index_map(config, ws):
    out = {}
    for i in range(config["scenes"]["count"]):
        sp, _ = _scene_paths(ws, i)
        out[SceneGraph.load(sp).scene_id] = i
    return out


def stage_train_rel(config, ws, log):
    vocab = ConceptVocabulary.load(ws.path("vocab.json"))
    concepts = config["scenes"]["concepts"] or DEFAULT_CONCEPTS
    templates = TemplateSet.load(concepts)
    oh = load_dataset(ws.path("bench", "onehop.jsonl"))
    sid_to_idx = _scene_index_map(config, ws)
    envs = {}
    for rec in oh:
        if rec.scene_id not in envs:
            envs[rec.scene_id] = _field_env(config, ws, sid_to_idx[rec.scene_id], vocab)
    tuples = build_tuple_dataset(oh, envs, templates,
                                 crop_resolution=config["relnet"]["crop_resolution"],
                                 max_negative_ratio=config["relnet"]["max_negative_ratio"],
                                 seed=config["seed"])
    tc = TrainConfig(lr=config["relnet"]["lr"], batch_size=config["relnet"]["batch_size"],
                     epochs=config["relnet"]["epochs"], seed=config["seed"])
    nets, skipped = train_relations(tuples, tc, strict=False)
    outputs = []
    ndir = ws.path("relnets", "trained.json")
    for rel, net in nets.items():
        net.save(os.path.dirname(ndir))
        base = f"relnets/{rel.replace(' ', '_')}"
        outputs += [base + ".vxg", base + ".json"]
        log(f"  {rel}: val accuracy {net.metrics['val_accuracy']:.2f} "
            f"({net.metrics['n_train']} train tuples)")
    for rel, why in skipped.items():
        log(f"  {rel}: skipped ({why})")
    with open(ndir, "w") as f:
        json.dump({"trained": sorted(nets), "skipped": skipped}, f, indent=1)
    outputs.append("relnets/trained.json")
    return outputs


def _load_nets(ws):
    ndir = os.path.dirname(ws.path("relnets", "trained.json"))
    with open(os.path.join(ndir, "trained.json")) as f:
        trained = json.load(f)["trained"]
    return {rel: RelationNet.load(ndir, rel) for rel in trained}


def stage_eval(config, ws, log):
    vocab = ConceptVocabulary.load(ws.path("vocab.json"))
    te = load_dataset(ws.path("bench", "test.jsonl"))
    sid_to_idx = _scene_index_map(config, ws)
    use_learned = config["eval"]["evaluator"] == "learned"
    nets = _load_nets(ws) if use_learned else None
    envs = {}
    meters = {}
    for rec in te:
        if rec.scene_id in envs:
            continue
        i = sid_to_idx[rec.scene_id]
        envs[rec.scene_id] = _field_env(config, ws, i, vocab, nets=nets)
        if use_learned:
            geo = _field_env(config, ws, i, vocab).evaluator
            meters[rec.scene_id] = geo
    report = evaluate(te, envs, meter_geometric=meters if use_learned else None)
    report.save(ws.path("eval", "report.json"), ws.path("eval", "report.txt"))
    log("  " + report.format_table().replace("\n", "\n  "))
    return ["eval/report.json", "eval/report.txt"]


_STAGE_FNS = {
    "synth": (stage_synth, ["scenes"]),
    "render": (stage_render, ["render"]),
    "fit": (stage_fit, ["fit", "render"]),
    "ground": (stage_ground, ["ground"]),
    "bench": (stage_bench, ["bench", "scenes"]),
    "train_rel": (stage_train_rel, ["relnet", "bench"]),
    "eval": (stage_eval, ["eval"]),
}

_STAGE_DEPS = {
    "synth": [],
    "render": ["synth"],
    "fit": ["render"],
    "ground": ["fit"],
    "bench": ["synth"],
    "train_rel": ["ground", "bench"],
    "eval": ["train_rel", "ground", "bench"],
}


def run_pipeline(config, out_dir=None, log=print, only=None):
    """Run all stages (or one) with content-hash skipping; returns hashes."""
    ws = Workspace(out_dir or config["out_dir"])
    hashes = {}
    todo = STAGES if only is None else _with_deps(only)
    for stage in STAGES:
        fn, cfg_keys = _STAGE_FNS[stage]
        upstream = [hashes.get(d) or ws.stage_hash(d) for d in _STAGE_DEPS[stage]]
        want = _hash_obj({k: config[k] for k in cfg_keys},
                         extra=f"seed={config['seed']};up={upstream}")
        if stage not in todo:
            hashes[stage] = ws.stage_hash(stage)
            continue
        if None in upstream:
            missing = [d for d, h in zip(_STAGE_DEPS[stage], upstream) if h is None]
            raise StageError(stage, f"missing upstream stage(s) {missing}")
        if ws.is_done(stage, want):
            log(f"[{stage}] up to date (hash {want})")
            hashes[stage] = want
            continue
        log(f"[{stage}] running")
        try:
            outputs = fn(config, ws, log)
        except (ConfigError, StageError):
            raise
        except Exception as e:
            raise StageError(stage, e) from e
        ws.write_manifest(stage, want, outputs)
        hashes[stage] = want
    return hashes


def _with_deps(stage):
    seen = []

    def add(s):
        for d in _STAGE_DEPS[s]:
            add(d)
        if s not in seen:
            seen.append(s)

    add(stage)
    return seen


def ask(config, out_dir, text, evaluator="geometric", scene_index=0):
    """Answer a natural-language question or a program against one scene."""
    ws = Workspace(out_dir or config["out_dir"])
    vocab = ConceptVocabulary.load(ws.path("vocab.json"))
    nets = None
    if evaluator == "learned":
        nets = _load_nets(ws)
    env = _field_env(config, ws, scene_index, vocab, nets=nets)
    concepts = config["scenes"]["concepts"] or DEFAULT_CONCEPTS
    templates = TemplateSet.load(concepts)
    from .executor import answer_string, execute
    from .qlang import parse_program

    if text.strip().startswith("("):
        program = parse_program(text)
        question = text
    else:
        tid, bindings = templates.match_question(text)
        question, program = templates.instantiate(tid, bindings)
    return question, answer_string(execute(program, env))
