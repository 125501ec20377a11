import numpy as np
import pytest

from voxreason.geometry import Box
from voxreason.scene import ObjectSpec, RoomSpec, SceneGraph


def make_scene(objects, bounds=((0, 0, 0), (4, 4, 3)), walls=(), concepts=None,
               rooms=None, scene_id="test", seed=0):
    """Hand-built scene graph: objects = [(concept, position, size[, shape])]."""
    objs = []
    for i, spec in enumerate(objects):
        concept, position, size = spec[:3]
        shape = spec[3] if len(spec) > 3 else "box"
        objs.append(ObjectSpec(i, concept, shape, np.array(position, dtype=float),
                               0.0, tuple(size), (0.5, 0.5, 0.5)))
    b = Box(*bounds)
    if rooms is None:
        rooms = [RoomSpec(0, b, [Box(*w) for w in walls])]
    if concepts is None:
        concepts = sorted({o.concept for o in objs}) or ["chair"]
        while len(concepts) < 12:
            concepts = concepts + [f"pad{len(concepts)}"]
    return SceneGraph(scene_id=scene_id, bounds=b, rooms=rooms, objects=objs,
                      relations=set(), rng_seed=seed, concept_vocabulary=concepts)


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / scale)


@pytest.fixture(scope="session")
def small_catalogue_concepts():
    from voxreason.scene import DEFAULT_CONCEPTS

    return list(DEFAULT_CONCEPTS)
