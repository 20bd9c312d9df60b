"""Differentiable program execution over scene encodings.

Selections are soft masks over slots. Every mask-producing op is mediated by
the objectness score: a slot can only be selected to the extent the decoder
believes it holds a single object.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .encoding import SceneEncoding
from .programs import MASK_OPS, Program, ProgramError
from .scene import ConceptVocabulary, N_MAX_COUNT

COUNT_SIGMA = 0.25  # near-hard integer bins with live gradients
QUERY_EPS = 1e-8


class VocabularyError(KeyError):
    pass


def answer_key(answer: Any) -> tuple[str, Any]:
    """Hashable key distinguishing bools from ints in the flat answer space."""
    if isinstance(answer, bool):
        return ("bool", answer)
    if isinstance(answer, (int,)):
        return ("int", int(answer))
    return ("word", str(answer))


@dataclass
class AnswerDistribution:
    probs: Tensor  # (V,), sums to 1
    vocab: list  # flat answer vocabulary

    @property
    def argmax_answer(self) -> Any:
        return self.vocab[int(torch.argmax(self.probs))]

    def prob_of(self, answer: Any) -> Tensor:
        keys = [answer_key(a) for a in self.vocab]
        return self.probs[keys.index(answer_key(answer))]


class ConceptSpace(nn.Module):
    """Concept embeddings, per-attribute projections, and relation scorers."""

    def __init__(
        self,
        vocab: ConceptVocabulary,
        slot_dim: int,
        concept_dim: int = 64,
        gamma: float = 0.2,
        tau: float = 0.1,
        tau_query: float = 0.25,
        relation_hidden: int = 32,
    ):
        super().__init__()
        self.vocab = vocab
        self.gamma = gamma
        self.tau = tau
        self.tau_query = tau_query
        self.concept_index = {c: i for i, c in enumerate(vocab.all_concepts)}
        self.embeddings = nn.Parameter(
            F.normalize(torch.randn(len(self.concept_index), concept_dim), dim=1)
        )
        self.projections = nn.ModuleDict(
            {a: nn.Linear(slot_dim, concept_dim, bias=False) for a in vocab.attributes}
        )
        self.relations = nn.ModuleDict(
            {
                r: nn.Sequential(
                    nn.Linear(2 * slot_dim + 2, relation_hidden),
                    nn.ReLU(),
                    nn.Linear(relation_hidden, 1),
                )
                for r in vocab.relations
            }
        )

    def cosine_to_concept(self, z: Tensor, concept: str) -> Tensor:
        """cos(P_attr z, e_c); z is (d,) or (K, d)."""
        if concept not in self.concept_index:
            raise VocabularyError(f"unknown concept '{concept}'")
        attr = self.vocab.attribute_of(concept)
        projected = self.projections[attr](z)
        e = self.embeddings[self.concept_index[concept]]
        return F.cosine_similarity(projected, e.expand_as(projected), dim=-1)

    def concept_prob(self, z: Tensor, concept: str) -> Tensor:
        cos = self.cosine_to_concept(z, concept)
        return torch.sigmoid((cos - self.gamma) / self.tau)

    def query_logits(self, z: Tensor, attribute: str) -> Tensor:
        """Cosine logits over the attribute's concepts for a (d,) latent."""
        if attribute not in self.vocab.attributes:
            raise VocabularyError(f"unknown attribute '{attribute}'")
        projected = self.projections[attribute](z)
        idx = [self.concept_index[c] for c in self.vocab.attributes[attribute]]
        e = self.embeddings[idx]
        cos = F.cosine_similarity(e, projected.unsqueeze(0).expand_as(e), dim=-1)
        return cos / self.tau_query

    def relation_prob(self, enc: SceneEncoding, relation: str) -> Tensor:
        """(K, K) matrix; entry [j, i] is the probability that slot i stands
        in `relation` to slot j."""
        if relation not in self.relations:
            raise VocabularyError(f"unknown relation '{relation}'")
        centroids = slot_centroids(enc.m)
        K = enc.num_slots
        zi = enc.z.unsqueeze(0).expand(K, K, -1)  # subject i varies along dim 1
        zj = enc.z.unsqueeze(1).expand(K, K, -1)  # anchor j varies along dim 0
        delta = centroids.unsqueeze(0) - centroids.unsqueeze(1)  # c_i - c_j
        features = torch.cat([zj, zi, delta], dim=-1)
        return torch.sigmoid(self.relations[relation](features)[..., 0])

    def positive_concepts(self, z: Tensor) -> list[str]:
        """Concepts whose cosine similarity to the latent is positive."""
        out = []
        with torch.no_grad():
            for c in self.concept_index:
                if float(self.cosine_to_concept(z, c)) > 0.0:
                    out.append(c)
        return out


def slot_centroids(masks: Tensor) -> Tensor:
    """(K, H, W) soft masks -> (K, 2) normalized (row, col) centroids."""
    K, H, W = masks.shape
    rows = torch.linspace(0.0, 1.0, H, device=masks.device, dtype=masks.dtype)
    cols = torch.linspace(0.0, 1.0, W, device=masks.device, dtype=masks.dtype)
    total = masks.sum(dim=(1, 2)).clamp_min(QUERY_EPS)
    r = (masks.sum(dim=2) * rows).sum(dim=1) / total
    c = (masks.sum(dim=1) * cols).sum(dim=1) / total
    return torch.stack([r, c], dim=1)


def _harden(p: Tensor) -> Tensor:
    return (p > 0.5).to(p.dtype)


def exec_scene(enc: SceneEncoding) -> Tensor:
    return enc.s


def exec_filter(
    mask: Tensor, concept: str, enc: SceneEncoding, space: ConceptSpace,
    hard: bool = False,
) -> Tensor:
    p = space.concept_prob(enc.z, concept)
    if hard:
        p = _harden(p)
    return torch.minimum(torch.minimum(mask, enc.s), p)


def exec_relate(
    mask: Tensor, relation: str, enc: SceneEncoding, space: ConceptSpace,
    hard: bool = False,
) -> Tensor:
    rp = space.relation_prob(enc, relation)  # rp[j, i]
    if hard:
        rp = _harden(rp)
    K = mask.shape[0]
    candidates = torch.minimum(mask.unsqueeze(1).expand(K, K), rp)
    candidates = candidates * (1.0 - torch.eye(K, device=mask.device, dtype=mask.dtype))
    scores = candidates.max(dim=0).values  # max over anchors j, per subject i
    return torch.minimum(enc.s, scores)


def exec_exist(mask: Tensor) -> Tensor:
    return mask.max()


def exec_count(mask: Tensor) -> tuple[Tensor, Tensor]:
    """Expected count and a near-hard distribution over 0..N_MAX."""
    c = mask.sum()
    bins = torch.arange(N_MAX_COUNT + 1, device=mask.device, dtype=mask.dtype)
    logits = -((c - bins) ** 2) / (2.0 * COUNT_SIGMA**2)
    return c, F.softmax(logits, dim=0)


def exec_query(
    mask: Tensor, attribute: str, enc: SceneEncoding, space: ConceptSpace
) -> Tensor:
    """Distribution over the attribute's concepts for the attended latent."""
    weights = mask / torch.clamp(mask.sum(), min=QUERY_EPS)
    attended = (weights.unsqueeze(1) * enc.z).sum(dim=0)
    return F.softmax(space.query_logits(attended, attribute), dim=0)


def exec_equal(value: tuple, literal: Any) -> Tensor:
    kind = value[0]
    if kind == "query":
        _, attribute, dist, concepts = value
        if not isinstance(literal, str):
            raise ProgramError("equal after query expects a word literal")
        if literal not in concepts:
            raise VocabularyError(
                f"literal '{literal}' is not a '{attribute}' concept"
            )
        return dist[concepts.index(literal)]
    if kind == "count":
        _, _, dist = value
        if not isinstance(literal, int) or isinstance(literal, bool):
            raise ProgramError("equal after count expects an integer literal")
        return dist[literal]
    if kind == "exist":
        _, p = value
        if not isinstance(literal, bool):
            raise ProgramError("equal after exist expects a boolean literal")
        return p if literal else 1.0 - p
    raise ProgramError(f"equal cannot follow '{kind}'")


def execute_chain(
    program: Program, enc: SceneEncoding, space: ConceptSpace, hard: bool = False
) -> Tensor:
    """Run a filter/relate chain and return the final slot mask."""
    mask: Optional[Tensor] = None
    for op in program:
        if op.op == "scene":
            mask = exec_scene(enc)
        elif op.op in ("filter", "relate"):
            if mask is None:
                raise ProgramError("chain must start with Scene")
            if op.op == "filter":
                mask = exec_filter(mask, op.arg, enc, space, hard)
            else:
                mask = exec_relate(mask, op.arg, enc, space, hard)
        else:
            raise ProgramError(f"'{op.op}' not allowed in a selection chain")
    if mask is None:
        raise ProgramError("chain must start with Scene")
    return mask


def execute(
    program: Program,
    enc: SceneEncoding,
    space: ConceptSpace,
    hard: bool = False,
    trace: Optional[list] = None,
) -> AnswerDistribution:
    """Fold the program left-to-right into a flat answer distribution."""
    answer_vocab = space.vocab.answer_vocabulary()
    keys = [answer_key(a) for a in answer_vocab]
    mask: Optional[Tensor] = None
    value: Optional[tuple] = None
    s = enc.s
    if hard:
        s = _harden(s)
        enc = SceneEncoding(z=enc.z, x=enc.x, m=enc.m, s=s, model_tag=enc.model_tag)
    for op in program:
        if op.op == "scene":
            mask = exec_scene(enc)
        elif op.op == "filter":
            mask = exec_filter(mask, op.arg, enc, space, hard)
        elif op.op == "relate":
            mask = exec_relate(mask, op.arg, enc, space, hard)
        elif op.op == "exist":
            value = ("exist", exec_exist(mask))
        elif op.op == "count":
            c, dist = exec_count(mask)
            value = ("count", c, dist)
        elif op.op == "query":
            concepts = space.vocab.attributes[op.arg]
            value = ("query", op.arg, exec_query(mask, op.arg, enc, space), concepts)
        elif op.op == "equal":
            value = ("exist", exec_equal(value, op.arg))
        else:
            raise ProgramError(f"unknown op '{op.op}'")
        if trace is not None:
            trace.append(
                {"op": op.op, "arg": op.arg,
                 "mask": None if op.op not in MASK_OPS else [float(v) for v in mask]}
            )

    probs = torch.zeros(len(answer_vocab), device=enc.z.device, dtype=enc.z.dtype)
    if value is None:
        raise ProgramError("program has no terminal op")
    if value[0] == "exist":
        p = value[1]
        probs[keys.index(("bool", True))] = p
        probs[keys.index(("bool", False))] = 1.0 - p
    elif value[0] == "count":
        dist = value[2]
        for i in range(N_MAX_COUNT + 1):
            probs[keys.index(("int", i))] = dist[i]
    elif value[0] == "query":
        _, _, dist, concepts = value
        for i, c in enumerate(concepts):
            probs[keys.index(("word", c))] = dist[i]
    return AnswerDistribution(probs=probs, vocab=answer_vocab)


# ---------------------------------------------------------------------------
# Oracle substrate for tests and acceptance checks
# ---------------------------------------------------------------------------

class OracleConceptSpace(ConceptSpace):
    """Concept space with one-hot embeddings over block-structured latents.

    Oracle latents concatenate, per attribute, a one-hot over that
    attribute's concepts. Projections select the attribute's block, so the
    cosine to the true concept is exactly 1 and to others exactly 0.
    Relations are scored geometrically from slot-mask centroids.
    """

    def __init__(self, vocab: ConceptVocabulary):
        n = len(vocab.all_concepts)
        # sharp calibration: off-concept probabilities ~ sigmoid(-10)
        super().__init__(vocab, slot_dim=n, concept_dim=n, gamma=0.2, tau=0.02)
        with torch.no_grad():
            self.embeddings.copy_(torch.eye(n))
            offsets = {c: i for i, c in enumerate(vocab.all_concepts)}
            for attr, concepts in vocab.attributes.items():
                weight = torch.zeros(n, n)
                for c in concepts:
                    weight[offsets[c], offsets[c]] = 1.0
                self.projections[attr].weight.copy_(weight)

    def oracle_latent(self, attributes: dict[str, str]) -> Tensor:
        z = torch.zeros(len(self.concept_index))
        for concept in attributes.values():
            z[self.concept_index[concept]] = 1.0
        return z

    def relation_prob(self, enc: SceneEncoding, relation: str) -> Tensor:
        from .symbolic import relation_holds

        centroids = slot_centroids(enc.m)
        K = enc.num_slots
        rp = torch.zeros(K, K, dtype=enc.m.dtype)
        for j in range(K):
            for i in range(K):
                subject = (float(centroids[i, 0]), float(centroids[i, 1]))
                anchor = (float(centroids[j, 0]), float(centroids[j, 1]))
                rp[j, i] = 1.0 if relation_holds(relation, subject, anchor) else 0.0
        return rp


def oracle_encoding(record, vocab: ConceptVocabulary, space: OracleConceptSpace) -> SceneEncoding:
    """Perfect encoding of a ground-truth scene: one slot per object."""
    H, W = record.shape
    K = len(record.objects)
    z = torch.stack([space.oracle_latent(o.attributes) for o in record.objects])
    m = torch.stack([torch.from_numpy(o.mask.astype("float32")) for o in record.objects])
    x = torch.zeros(K, H, W, 3)
    s = torch.ones(K)
    return SceneEncoding(z=z, x=x, m=m, s=s, model_tag="oracle")
