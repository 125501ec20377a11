"""Concept vocabulary with deterministic embeddings and 3D semantic grounding.

Embeddings stand in for a pretrained text encoder: unit vectors drawn from a
counter-based RNG keyed by (name, seed), resampled until all pairwise dot
products stay below the separation bound. Grounding assigns each occupied
voxel the concept whose embedding has the highest dot product with the
voxel's feature ("background" is reserved for empty space and never wins).
"""

import json
from dataclasses import dataclass

import numpy as np

from . import rng
from .field import FieldModel, OccupiedSet, extract_occupied

SEPARATION_BOUND = 0.7
BACKGROUND = "background"


class EmbeddingError(RuntimeError):
    pass


@dataclass
class ConceptVocabulary:
    concepts: list  # includes "background" and "wall"
    embeddings: np.ndarray  # (V, D) unit rows
    seed: int

    def __post_init__(self):
        self._index = {c: i for i, c in enumerate(self.concepts)}

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def index(self, concept: str) -> int:
        return self._index[concept]

    def __contains__(self, concept):
        return concept in self._index

    def embedding(self, concept: str) -> np.ndarray:
        return self.embeddings[self._index[concept]]

    @property
    def background_index(self):
        return self._index[BACKGROUND]

    def object_concepts(self):
        return [c for c in self.concepts if c not in (BACKGROUND, "wall")]

    def to_json(self):
        return {
            "concepts": list(self.concepts),
            "seed": int(self.seed),
            "dim": int(self.dim),
            "embeddings": [[float(v) for v in row] for row in self.embeddings],
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @staticmethod
    def load(path):
        with open(path) as f:
            d = json.load(f)
        return ConceptVocabulary(d["concepts"], np.array(d["embeddings"]), d["seed"])


def embed_concepts(names, dim, seed) -> ConceptVocabulary:
    """Deterministic unit embeddings with pairwise dot <= 0.7.

    "background" gets the first basis vector (the reserved direction rays
    that hit nothing are mapped to); everything else is resampled RNG draws.
    """
    if dim < 8:
        raise ValueError("embedding dim must be >= 8")
    names = list(names)
    if len(set(names)) != len(names):
        raise ValueError("concept names must be unique")
    if BACKGROUND not in names:
        names = [BACKGROUND] + names
    if "wall" not in names:
        names = names + ["wall"]
    rows = []
    for name in names:
        if name == BACKGROUND:
            v = np.zeros(dim)
            v[0] = 1.0
            rows.append(v)
            continue
        base = rng.key_of(rng.name_key(name), seed)
        for retry in range(1000):
            v = rng.gaussians(rng.key_of(base, retry), dim)
            n = np.linalg.norm(v)
            if n < 1e-12:
                continue
            v = v / n
            if all(float(np.dot(v, u)) <= SEPARATION_BOUND for u in rows):
                rows.append(v)
                break
        else:
            raise EmbeddingError(
                f"no embedding for {name!r} within separation {SEPARATION_BOUND}; increase dim"
            )
    return ConceptVocabulary(names, np.stack(rows), seed)


def attention_scores(feature, vocab: ConceptVocabulary) -> np.ndarray:
    """Dot-product attention of one feature against every concept embedding."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape[-1] != vocab.dim:
        raise ValueError("feature dim does not match vocabulary")
    return vocab.embeddings @ f


@dataclass
class SemanticField:
    """Per-occupied-voxel concept assignment with full score vectors."""

    indices: np.ndarray  # (N, 3)
    positions: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, D)
    scores: np.ndarray  # (N, V)
    concept_idx: np.ndarray  # (N,) argmax over non-background concepts
    vocab: ConceptVocabulary
    origin: np.ndarray
    voxel_size: float
    dims: tuple

    def __len__(self):
        return self.indices.shape[0]

    def concept_names(self):
        return [self.vocab.concepts[i] for i in self.concept_idx]

    def export_jsonl(self, path):
        names = self.vocab.concepts
        with open(path, "w") as f:
            for n in range(len(self)):
                order = np.argsort(-self.scores[n])[:3]
                rec = {
                    "voxel": [int(v) for v in self.indices[n]],
                    "concept": names[int(self.concept_idx[n])],
                    "top3": [[names[int(i)], float(self.scores[n, i])] for i in order],
                }
                f.write(json.dumps(rec) + "\n")


def _assign(occ: OccupiedSet, vocab: ConceptVocabulary) -> SemanticField:
    scores = occ.features @ vocab.embeddings.T
    masked = scores.copy()
    masked[:, vocab.background_index] = -np.inf
    concept_idx = np.argmax(masked, axis=1) if len(scores) else np.zeros(0, dtype=np.int64)
    return SemanticField(
        indices=occ.indices,
        positions=occ.positions,
        features=occ.features,
        scores=scores,
        concept_idx=np.asarray(concept_idx, dtype=np.int64),
        vocab=vocab,
        origin=occ.origin,
        voxel_size=occ.voxel_size,
        dims=occ.dims,
    )


def segment(model: FieldModel, vocab: ConceptVocabulary, threshold=0.5) -> SemanticField:
    """Semantic segmentation of the occupied voxels of a fitted model."""
    return _assign(extract_occupied(model, threshold), vocab)


def ground_truth_field(grids, vocab: ConceptVocabulary) -> SemanticField:
    """SemanticField built directly from ground-truth grids (oracle path)."""
    ids = grids.semantic_ids
    idx = np.argwhere(ids >= 0)
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    idx = idx[order]
    concepts = [grids.id_to_concept[i] for i in ids[idx[:, 0], idx[:, 1], idx[:, 2]]]
    feats = np.stack([vocab.embedding(c) for c in concepts]) if len(concepts) else np.zeros((0, vocab.dim))
    occ = OccupiedSet(
        indices=idx,
        positions=grids.density.centers(idx),
        features=feats,
        origin=np.asarray(grids.origin, dtype=np.float64),
        voxel_size=float(grids.voxel_size),
        dims=grids.dims,
    )
    return _assign(occ, vocab)
