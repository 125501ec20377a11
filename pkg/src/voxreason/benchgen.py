"""Benchmark generation with bias control.

Questions are generated by a depth-first search over (scene, binding)
choices for the currently least-used template; a candidate is rejected when
accepting it would skew the per-template answer distribution (max-min over
answers achievable in the scene pool beyond delta), the per-template
concept distribution, or the per-(relation, concept-set) tuple counts.
Answers come from a symbolic oracle that executes the same program AST over
scene-graph objects directly, bypassing voxels-derived instances.
"""

import json
from dataclasses import dataclass, field as dfield

import numpy as np

from .executor import ExecutionError, Value, VoxelSet, answer_string, execute
from .ground import BACKGROUND
from .qlang import TemplateSet, parse_program
from .relations import BINARY_RELATIONS
from .scene import (
    GroundTruthGrids, SceneGraph, object_point_sets, rasterize, scene_evaluator,
)

MAX_COUNT_ANSWER = 10


def vocab_order(concepts):
    """Concept ordering shared with ground.embed_concepts: background first,
    wall last."""
    names = list(concepts)
    if BACKGROUND not in names:
        names = [BACKGROUND] + names
    if "wall" not in names:
        names = names + ["wall"]
    return names


@dataclass
class _Room:
    id: int


class SceneGraphEnv:
    """Executor environment over ground-truth scene-graph objects.

    Instances are the scene's objects (their rasterized voxel sets); rooms
    come from RoomSpec; relations use the same geometric evaluator as the
    voxel path.
    """

    def __init__(self, scene: SceneGraph, grids: GroundTruthGrids = None, resolution=64):
        if grids is None:
            grids = rasterize(scene, resolution)
        self.scene = scene
        self.grids = grids
        self.order = vocab_order(scene.concept_vocabulary)
        self._cindex = {c: i for i, c in enumerate(self.order)}
        self.evaluator = scene_evaluator(scene, grids)
        pts = object_point_sets(scene, grids)
        dims = grids.dims
        self._obj_sets = {}
        for obj in scene.objects:
            p = pts[obj.id]
            if p.count == 0:
                continue
            ci = np.full(p.count, self._cindex[obj.concept], dtype=np.int64)
            vs = VoxelSet(p.indices.astype(np.int64), p.positions, p.voxel_size, dims, ci)
            vs.object_ids = {obj.id}
            self._obj_sets[obj.id] = vs
        wp = pts[scene.wall_id]
        if wp.count:
            wvs = VoxelSet(wp.indices.astype(np.int64), wp.positions, wp.voxel_size, dims,
                           np.full(wp.count, self._cindex["wall"], dtype=np.int64))
            wvs.object_ids = {scene.wall_id}
            self._wall_set = wvs
        else:
            self._wall_set = None
        self._room_of = {}
        for obj in scene.objects:
            for room in scene.rooms:
                if room.floor_box.contains_box(obj.world_bbox(), tol=1e-6):
                    self._room_of[obj.id] = room.id
                    break
        # instance counts per concept (voxel-backed objects only)
        self.concept_counts = {}
        for obj in scene.objects:
            if obj.id in self._obj_sets:
                self.concept_counts[obj.concept] = self.concept_counts.get(obj.concept, 0) + 1
        self._filter_cache = {}
        self._instance_cache = {}

    def _empty(self):
        vs = VoxelSet(np.zeros((0, 3)), np.zeros((0, 3)), self.grids.voxel_size,
                      self.grids.dims, np.zeros(0, dtype=np.int64))
        vs.object_ids = set()
        return vs

    def filter(self, concept):
        cached = self._filter_cache.get(concept)
        if cached is not None:
            return cached
        sets = [vs for oid, vs in self._obj_sets.items()
                if self.scene.objects[oid].concept == concept]
        if concept == "wall" and self._wall_set is not None:
            sets = [self._wall_set]
        if not sets:
            out = self._empty()
        else:
            out = VoxelSet(
                np.concatenate([v.indices for v in sets]),
                np.concatenate([v.positions for v in sets]),
                self.grids.voxel_size, self.grids.dims,
                np.concatenate([v.concept_idx for v in sets]),
            )
            out.object_ids = set().union(*(v.object_ids for v in sets))
        self._filter_cache[concept] = out
        return out

    def get_instance(self, vs):
        """Ground-truth instances: one per member object, ordered like the
        voxel path (concept index, then first voxel in linear order)."""
        ids = getattr(vs, "object_ids", None)
        if ids is None:
            raise ExecutionError("scene-graph environment needs object-backed sets")
        cached = self._instance_cache.get(vs.uid)
        if cached is not None:
            return cached

        def sort_key(oid):
            s = self._obj_sets[oid] if oid != self.scene.wall_id else self._wall_set
            return (int(s.concept_idx[0]), int(s.lin[0]))

        out = []
        for oid in sorted((i for i in ids if i != self.scene.wall_id), key=sort_key):
            out.append(self._obj_sets[oid])
        if self.scene.wall_id in ids and self._wall_set is not None:
            out.append(self._wall_set)
            out.sort(key=lambda s: (int(s.concept_idx[0]), int(s.lin[0])))
        self._instance_cache[vs.uid] = out
        return out

    def rooms(self):
        return [_Room(r.id) for r in self.scene.rooms]

    def room_intersects(self, room, vs):
        ids = getattr(vs, "object_ids", set())
        return any(self._room_of.get(oid) == room.id for oid in ids)

    def concept_name(self, concept_index):
        return self.order[int(concept_index)]


def symbolic_answer(program, scene: SceneGraph, env: SceneGraphEnv = None, resolution=64) -> str:
    """Ground-truth answer of a program executed on the scene graph."""
    if env is None:
        env = SceneGraphEnv(scene, resolution=resolution)
    if isinstance(program, str):
        program = parse_program(program)
    return answer_string(execute(program, env))


# ---------------------------------------------------------------------------
# generation


@dataclass
class QARecord:
    scene_id: str
    question: str
    program: str
    answer: str
    qtype: str
    hops: int
    template: str

    def to_json(self):
        return {
            "scene_id": self.scene_id,
            "question": self.question,
            "program": self.program,
            "answer": self.answer,
            "qtype": self.qtype,
            "hops": self.hops,
            "template": self.template,
        }

    @staticmethod
    def from_json(d):
        return QARecord(d["scene_id"], d["question"], d["program"], d["answer"],
                        d["qtype"], d["hops"], d["template"])


@dataclass
class GenState:
    template_counts: dict = dfield(default_factory=dict)
    answer_counts: dict = dfield(default_factory=dict)  # (template, answer)
    concept_counts: dict = dfield(default_factory=dict)  # (template, concept)
    tuple_counts: dict = dfield(default_factory=dict)  # (relation, frozen concepts)
    achievable_answers: dict = dfield(default_factory=dict)  # template -> set
    achievable_concepts: dict = dfield(default_factory=dict)
    concept_weights: dict = dfield(default_factory=dict)  # template -> {concept: share}

    @staticmethod
    def recount(records, templates: TemplateSet):
        st = GenState()
        for rec in records:
            t = templates.by_id[rec.template]
            _, bindings = templates.match_question(rec.question)
            st.template_counts[rec.template] = st.template_counts.get(rec.template, 0) + 1
            st.answer_counts[(rec.template, rec.answer)] = \
                st.answer_counts.get((rec.template, rec.answer), 0) + 1
            for s in t.concept_slots():
                key = (rec.template, bindings[s])
                st.concept_counts[key] = st.concept_counts.get(key, 0) + 1
            key = _tuple_key(t, bindings)
            if key is not None:
                st.tuple_counts[key] = st.tuple_counts.get(key, 0) + 1
        return st


def _tuple_key(template, bindings):
    """(relation, concept set) key controlled by the tuple-count rule."""
    rel = None
    for s in template.relation_slots():
        rel = bindings[s]
    if rel is None and template.id == "between_exist":
        rel = "between"
    if rel is None:
        return None
    concepts = frozenset(bindings[s] for s in template.concept_slots())
    return (rel, concepts)


def _valid_bindings(template, env: SceneGraphEnv, concepts):
    """All slot assignments valid for this template in this scene."""
    present = [c for c in concepts if env.concept_counts.get(c, 0) >= 1]
    unique = [c for c in concepts if env.concept_counts.get(c, 0) == 1]
    cslots = template.concept_slots()
    rslots = template.relation_slots()

    pools = []
    for s in cslots:
        if s in template.require_unique:
            pools.append(unique)
        elif s in template.require_present:
            pools.append(present)
        else:
            pools.append(concepts)

    out = []

    def rec(i, acc):
        if i == len(cslots):
            if rslots:
                for rel in BINARY_RELATIONS:
                    out.append({**acc, rslots[0]: rel})
            else:
                out.append(dict(acc))
            return
        for v in pools[i]:
            if v in acc.values():
                continue
            acc[cslots[i]] = v
            rec(i + 1, acc)
            del acc[cslots[i]]

    rec(0, {})
    return out


class _Candidates:
    """Lazy per-(template, scene) candidate bindings with cached answers."""

    def __init__(self, templates: TemplateSet, scenes, envs):
        self.templates = templates
        self.scenes = scenes
        self.envs = envs
        self.bindings = {}
        self.answers = {}

    def get_bindings(self, tid, scene_id):
        key = (tid, scene_id)
        if key not in self.bindings:
            t = self.templates.by_id[tid]
            self.bindings[key] = _valid_bindings(t, self.envs[scene_id], self.templates.concepts)
        return self.bindings[key]

    def answer(self, tid, scene_id, binding):
        bkey = (tid, scene_id, tuple(sorted(binding.items())))
        if bkey not in self.answers:
            prog = self.templates.skeleton_program(tid)
            try:
                ans = answer_string(execute(prog, self.envs[scene_id],
                                            literals=self.templates.literal_map(binding)))
            except ExecutionError:
                ans = None
            self.answers[bkey] = ans
        return self.answers[bkey]


def _achievable_sweep(templates, scenes, cands, gen, min_support=3):
    """Per-template achievable answers and concepts over the scene pool.

    An answer (or concept) counts as achievable when a seeded sampling sweep
    sees it at least min_support times: vanishingly-supplied answers would
    otherwise pin the flatness minimum at zero and starve generation.
    yes/no templates short-circuit once both answers are well supported.
    """
    achievable_answers = {}
    achievable_concepts = {}
    concept_weights = {}
    scene_ids = [s.scene_id for s in scenes]
    budget_per_template = 6000
    for t in templates.templates:
        ans_seen = {}
        con_seen = {}
        budget = budget_per_template
        done = False
        for sid in gen.permutation(scene_ids):
            sid = str(sid)
            blist = cands.get_bindings(t.id, sid)
            for binding in blist:
                for s in t.concept_slots():
                    con_seen[binding[s]] = con_seen.get(binding[s], 0) + 1
            if done or budget <= 0:
                continue
            for bi in gen.permutation(len(blist)):
                if budget <= 0:
                    break
                budget -= 1
                ans = cands.answer(t.id, sid, blist[bi])
                if ans is None:
                    continue
                if t.answer_space == "count" and int(ans) > MAX_COUNT_ANSWER:
                    continue
                ans_seen[ans] = ans_seen.get(ans, 0) + 1
                if t.answer_space == "yesno" and min(ans_seen.get("yes", 0),
                                                     ans_seen.get("no", 0)) >= min_support:
                    done = True
                    break
        evals = sum(ans_seen.values())
        support = max(min_support, int(0.01 * evals)) if evals >= min_support else 1
        achievable_answers[t.id] = {a for a, n in ans_seen.items() if n >= support} \
            or set(ans_seen)
        achievable_concepts[t.id] = {c for c, n in con_seen.items() if n >= min_support} \
            or set(con_seen)
        total_con = sum(con_seen.get(c, 0) for c in achievable_concepts[t.id])
        concept_weights[t.id] = {
            c: con_seen.get(c, 0) / total_con if total_con else 0.0
            for c in achievable_concepts[t.id]
        }
    return achievable_answers, achievable_concepts, concept_weights


class GenerationWarning(UserWarning):
    pass


def generate(scenes, templates: TemplateSet, target_count, flatness_delta=2, seed=0,
             envs=None, warn=None):
    """Generate QARecords with template/answer/concept bias control.

    Returns (records, GenState). If the search exhausts before reaching
    target_count a warning callback receives per-template shortfalls.
    """
    if target_count < len(templates.templates):
        raise ValueError("target_count must be at least the number of templates")
    gen = np.random.default_rng(np.uint64(seed))
    if envs is None:
        envs = {s.scene_id: SceneGraphEnv(s) for s in scenes}
    cands = _Candidates(templates, scenes, envs)
    ach_ans, ach_con, con_w = _achievable_sweep(templates, scenes, cands, gen)
    state = GenState(achievable_answers={k: set(v) for k, v in ach_ans.items()},
                     achievable_concepts={k: set(v) for k, v in ach_con.items()},
                     concept_weights=con_w)
    tids = [t.id for t in templates.templates]
    for tid in tids:
        state.template_counts[tid] = 0
    exhausted = set()
    used = set()
    records = []
    scene_ids = [s.scene_id for s in scenes]

    def answer_ok(tid, ans):
        achievable = state.achievable_answers[tid]
        if ans not in achievable:
            # unseen in the achievability sweep: treated as out of
            # distribution so the flatness bound stays well-defined
            return False
        counts = {a: state.answer_counts.get((tid, a), 0) for a in achievable}
        counts[ans] += 1
        return max(counts.values()) - min(counts.values()) <= flatness_delta

    def concepts_ok(tid, binding, t):
        # flat concept distribution: no concept may exceed its fair share of
        # the template's concept uses by more than delta, where the share is
        # proportional to how often the concept is bindable at all
        # (unique-slot pools are much smaller than the vocabulary)
        cs = [binding[s] for s in t.concept_slots()]
        if not cs:
            return True
        weights = state.concept_weights[tid]
        counts = {c: state.concept_counts.get((tid, c), 0) for c in weights}
        for c in cs:
            if c not in counts:
                return False
            counts[c] += 1
        total = sum(counts.values())
        floor_share = 1.0 / max(4 * len(weights), 1)
        for c, n in counts.items():
            cap = int(np.ceil(total * max(weights[c], floor_share))) + flatness_delta
            if n > cap:
                return False
        return True

    def tuple_ok(t, binding):
        key = _tuple_key(t, binding)
        if key is None:
            return True
        return state.tuple_counts.get(key, 0) + 1 <= flatness_delta

    while len(records) < target_count:
        live = [tid for tid in tids if tid not in exhausted]
        if not live:
            break
        tid = min(live, key=lambda x: (state.template_counts[x], tids.index(x)))
        t = templates.by_id[tid]
        accepted = False
        for sid in gen.permutation(scene_ids):
            sid = str(sid)
            blist = cands.get_bindings(tid, sid)
            if not blist:
                continue
            for bi in gen.permutation(len(blist)):
                binding = blist[bi]
                ukey = (tid, sid, tuple(sorted(binding.items())))
                if ukey in used:
                    continue
                ans = cands.answer(tid, sid, binding)
                if ans is None:
                    continue
                if t.answer_space == "count" and int(ans) > MAX_COUNT_ANSWER:
                    continue
                if not (answer_ok(tid, ans) and concepts_ok(tid, binding, t) and tuple_ok(t, binding)):
                    continue
                used.add(ukey)
                question, prog = templates.instantiate(t, binding)
                records.append(QARecord(sid, question,
                                        program=_canonical(prog), answer=ans,
                                        qtype=t.qtype, hops=t.hops, template=tid))
                state.template_counts[tid] += 1
                state.answer_counts[(tid, ans)] = state.answer_counts.get((tid, ans), 0) + 1
                for s in t.concept_slots():
                    k = (tid, binding[s])
                    state.concept_counts[k] = state.concept_counts.get(k, 0) + 1
                key = _tuple_key(t, binding)
                if key is not None:
                    state.tuple_counts[key] = state.tuple_counts.get(key, 0) + 1
                accepted = True
                break
            if accepted:
                break
        if not accepted:
            exhausted.add(tid)
    if len(records) < target_count and warn is not None:
        per = {tid: state.template_counts[tid] for tid in exhausted}
        warn(f"generation exhausted at {len(records)}/{target_count}; "
             f"exhausted templates: {per}")
    return records, state


def _canonical(prog):
    from .qlang import format_program

    return format_program(prog)


def save_dataset(records, path):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


def load_dataset(path):
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(QARecord.from_json(json.loads(line)))
    return out


def split(records, ratios=(7, 1, 2), seed=0):
    """Split by scene (no scene crosses splits), proportions within one scene."""
    if any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive")
    scene_ids = sorted({r.scene_id for r in records})
    if len(scene_ids) < len(ratios):
        raise ValueError(f"need at least {len(ratios)} scenes, got {len(scene_ids)}")
    gen = np.random.default_rng(np.uint64(seed))
    order = list(gen.permutation(scene_ids))
    total = sum(ratios)
    n = len(order)
    # largest-remainder allocation, every split non-empty
    exact = [n * r / total for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    rem = n - sum(counts)
    by_frac = sorted(range(len(ratios)), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in range(rem):
        counts[by_frac[i % len(ratios)]] += 1
    for i in range(len(ratios)):
        if counts[i] == 0:
            j = int(np.argmax(counts))
            counts[j] -= 1
            counts[i] += 1
    groups = []
    at = 0
    for c in counts:
        groups.append(set(order[at:at + c]))
        at += c
    return tuple([r for r in records if r.scene_id in g] for g in groups)


def stats(records):
    """Histogram report; totals always equal the record count."""
    qtype_hist = {}
    answer_hist = {}
    concept_hist = {}
    wordlen_hist = {}
    for rec in records:
        qtype_hist[rec.qtype] = qtype_hist.get(rec.qtype, 0) + 1
        answer_hist.setdefault(rec.template, {})
        answer_hist[rec.template][rec.answer] = answer_hist[rec.template].get(rec.answer, 0) + 1
        n = len(rec.question.split())
        wordlen_hist[n] = wordlen_hist.get(n, 0) + 1
    for rec in records:
        for tok in rec.program.split('"')[1::2]:
            concept_hist[tok] = concept_hist.get(tok, 0) + 1
    return {
        "total": len(records),
        "qtype": qtype_hist,
        "answers_per_template": answer_hist,
        "concept_mentions": concept_hist,
        "word_length": {str(k): v for k, v in sorted(wordlen_hist.items())},
    }
