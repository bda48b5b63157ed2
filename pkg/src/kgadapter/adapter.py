"""Knowledge adapter: one soft-prompt vector per reasoning path.

Each path is split into its triples. Label embeddings feed two views:
a structural one (per-triple translation vectors, zero-padded to the hop
limit and aggregated by one affine layer) and a textual one (role-wise
mean of head, relation and tail embeddings, concatenated). A small
transformer block fuses both views into a single vector, and a two-layer
MLP maps it into the language model's embedding space.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import layers
from . import numerics as nx
from .kg import KnowledgeGraph, ReasoningPath
from .numerics import Tensor

STRUCT_MODES = ("HplusRminusT", "HplusRplusT")
PARAM_GROUPS = ("embedding", "struct", "encoder", "projector")


class AdapterError(ValueError):
    pass


@dataclass
class AdapterConfig:
    dim: int = 64
    hidden: int = 128
    lm_width: int = 64
    max_hops: int = 2
    mode: str = "HplusRminusT"
    n_heads: int = 2
    n_blocks: int = 1
    use_struct: bool = True
    seed: int = 0


def struct_embed(e_h, e_r, e_t, mode: str = "HplusRminusT") -> Tensor:
    """Translation-style triple vector: h + r - t, or the order-blind h + r + t."""
    e_h, e_r, e_t = nx.as_tensor(e_h), nx.as_tensor(e_r), nx.as_tensor(e_t)
    if not e_h.shape == e_r.shape == e_t.shape:
        raise AdapterError(f"struct_embed: shapes differ {e_h.shape}, {e_r.shape}, {e_t.shape}")
    if mode == "HplusRminusT":
        return e_h + e_r - e_t
    if mode == "HplusRplusT":
        # h and t are added first so swapping them is bit-for-bit invariant
        return (e_h + e_t) + e_r
    raise AdapterError(f"unknown struct mode {mode!r}")


def fuse_text(vectors: Sequence) -> Tensor:
    if not vectors:
        raise AdapterError("fuse_text needs at least one vector")
    return nx.stack(list(vectors), axis=0).mean(axis=0)


def consolidate(z_h, z_r, z_t) -> Tensor:
    z_h, z_r, z_t = nx.as_tensor(z_h), nx.as_tensor(z_r), nx.as_tensor(z_t)
    if not z_h.shape == z_r.shape == z_t.shape:
        raise AdapterError(f"consolidate: shapes differ {z_h.shape}, {z_r.shape}, {z_t.shape}")
    return nx.concat([z_h, z_r, z_t], axis=-1)


class KnowledgeAdapter:
    """Trainable label table, structure aggregator, knowledge encoder and projector.

    Rows ``0..n_entities-1`` of the label table are entities, the remaining
    rows relations (see :meth:`relation_row`).
    """

    def __init__(self, n_entities: int, n_relations: int, config: AdapterConfig | None = None,
                 vocab_hash: str | None = None):
        self.config = c = config or AdapterConfig()
        if c.mode not in STRUCT_MODES:
            raise AdapterError(f"unknown struct mode {c.mode!r}")
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.vocab_hash = vocab_hash
        rng = np.random.default_rng(c.seed)
        d = c.dim
        p: dict[str, Tensor] = {}
        p["label_embedding"] = Tensor(rng.normal(0.0, 1.0, (n_entities + n_relations, d)), name="label_embedding")
        layers.init_linear(p, "struct", rng, c.max_hops * d, d)
        layers.init_linear(p, "encoder.text_proj", rng, 3 * d, d)
        p["encoder.readout"] = Tensor(rng.normal(0.0, 1.0, d), name="encoder.readout")
        for b in range(c.n_blocks):
            layers.init_block(p, f"encoder.block{b}", rng, d, 4 * d)
        layers.init_linear(p, "projector.fc1", rng, d, c.hidden)
        layers.init_linear(p, "projector.fc2", rng, c.hidden, c.lm_width)
        for name, t in p.items():
            t.name = name
        self.params = p

    @classmethod
    def for_graph(cls, kg: KnowledgeGraph, config: AdapterConfig | None = None) -> "KnowledgeAdapter":
        return cls(kg.num_entities, kg.num_relations, config, kg.vocab_hash())

    # -- parameters

    @staticmethod
    def group_of(name: str) -> str:
        return "embedding" if name == "label_embedding" else name.split(".")[0]

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in PARAM_GROUPS}
        for name in self.params:
            out[self.group_of(name)].append(name)
        return out

    def trainable(self, exclude: Sequence[str] = ()) -> list[Tensor]:
        chosen = []
        for name, t in self.params.items():
            t.requires_grad = self.group_of(name) not in exclude
            t.grad = None
            if t.requires_grad:
                chosen.append(t)
        return chosen

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def relation_row(self, relation: int) -> int:
        return self.n_entities + relation

    def init_labels_from_lm(self, kg: KnowledgeGraph, lm, tokenizer) -> None:
        """Seed label rows with the LM's mean token embedding of each label's text."""
        if lm.width != self.config.dim:
            raise AdapterError(f"LM width {lm.width} differs from adapter width {self.config.dim}")
        table = lm.params["tok_emb"].data
        rows = self.params["label_embedding"].data.copy()
        labels = list(kg.entities) + list(kg.relations)
        for i, label in enumerate(labels):
            ids = tokenizer.encode(label)
            if ids:
                rows[i] = table[ids].mean(axis=0)
        self.params["label_embedding"].data = rows.astype(np.float32)

    # -- per-path operations

    def embed_label(self, label_id: int) -> Tensor:
        n = self.n_entities + self.n_relations
        if not 0 <= label_id < n:
            raise AdapterError(f"unknown label id {label_id} (vocabulary has {n})")
        return nx.take(self.params["label_embedding"], [label_id])[0]

    def aggregate_struct(self, structs) -> Tensor:
        """Zero-pad per-triple vectors to ``max_hops`` slots, flatten, apply the affine layer.

        Accepts a list of ``(d,)`` vectors or a tensor ``(..., m, d)``.
        """
        H, d = self.config.max_hops, self.config.dim
        if isinstance(structs, (list, tuple)):
            if not structs:
                raise AdapterError("aggregate_struct needs at least one triple")
            structs = nx.stack(list(structs), axis=0)
        m = structs.shape[-2]
        if m > H:
            raise AdapterError(f"path has {m} triples, more than max_hops={H}")
        if structs.shape[-1] != d:
            raise AdapterError(f"struct vectors have width {structs.shape[-1]}, expected {d}")
        if m < H:
            pad = np.zeros(structs.shape[:-2] + (H - m, d))
            structs = nx.concat([structs, pad], axis=-2)
        flat = structs.reshape(*structs.shape[:-2], H * d)
        return layers.linear(flat, self.params, "struct")

    def encode_knowledge(self, z_text: Tensor, z_struct: Tensor) -> Tensor:
        """Fuse ``(..., 3d)`` text and ``(..., d)`` structure vectors into ``(..., d)``."""
        d = self.config.dim
        z_text, z_struct = nx.as_tensor(z_text), nx.as_tensor(z_struct)
        if z_text.shape[-1] != 3 * d or z_struct.shape[-1] != d or z_text.shape[:-1] != z_struct.shape[:-1]:
            raise AdapterError(f"encode_knowledge: got text {z_text.shape} and struct {z_struct.shape} for d={d}")
        lead = z_text.shape[:-1]
        text = layers.linear(z_text, self.params, "encoder.text_proj").reshape(*lead, 1, d)
        readout = self.params["encoder.readout"].reshape(*((1,) * len(lead)), 1, d) + np.zeros(lead + (1, d))
        x = nx.concat([readout, text, z_struct.reshape(*lead, 1, d)], axis=-2)
        for b in range(self.config.n_blocks):
            x = layers.block(x, self.params, f"encoder.block{b}", self.config.n_heads)
        return x[..., 0, :]

    def encode_path(self, path: ReasoningPath) -> Tensor:
        return self.encode_paths([path])[0]

    def encode_paths(self, paths: Sequence[ReasoningPath]) -> Tensor:
        """Fused vectors ``(N, d)`` for ``N`` paths, computed in one batch."""
        c = self.config
        H = c.max_hops
        N = len(paths)
        if N == 0:
            raise AdapterError("no paths to encode")
        heads = np.zeros((N, H), dtype=np.int64)
        rels = np.zeros((N, H), dtype=np.int64)
        tails = np.zeros((N, H), dtype=np.int64)
        mask = np.zeros((N, H, 1))
        for i, path in enumerate(paths):
            triples = path.triples()
            if not 1 <= len(triples) <= H:
                raise AdapterError(f"path with {len(triples)} triples outside 1..{H}")
            for j, (h, r, t) in enumerate(triples):
                if not (0 <= h < self.n_entities and 0 <= t < self.n_entities and 0 <= r < self.n_relations):
                    raise AdapterError(f"triple {(h, r, t)} outside the adapter vocabulary")
                heads[i, j], rels[i, j], tails[i, j] = h, self.relation_row(r), t
                mask[i, j] = 1.0
        table = self.params["label_embedding"]
        e_h, e_r, e_t = nx.take(table, heads), nx.take(table, rels), nx.take(table, tails)

        if c.use_struct:
            z_struct = self.aggregate_struct(struct_embed(e_h, e_r, e_t, c.mode) * mask)
        else:
            z_struct = nx.Tensor(np.zeros((N, c.dim)))

        inv = 1.0 / mask.sum(axis=1)
        z_text = consolidate((e_h * mask).sum(axis=1) * inv,
                             (e_r * mask).sum(axis=1) * inv,
                             (e_t * mask).sum(axis=1) * inv)
        return self.encode_knowledge(z_text, z_struct)

    def project_soft_prompt(self, path_vectors) -> Tensor:
        """Apply the projector to each path vector independently: ``(N, d) -> (N, lm_width)``."""
        if isinstance(path_vectors, (list, tuple)):
            if not path_vectors:
                raise AdapterError("no path vectors to project")
            path_vectors = nx.stack(list(path_vectors), axis=0)
        if path_vectors.shape[-1] != self.config.dim:
            raise AdapterError(f"path vectors have width {path_vectors.shape[-1]}, expected {self.config.dim}")
        h = nx.relu(layers.linear(path_vectors, self.params, "projector.fc1"))
        return layers.linear(h, self.params, "projector.fc2")

    def soft_prompt(self, paths: Sequence[ReasoningPath]) -> Tensor | None:
        if not paths:
            return None
        return self.project_soft_prompt(self.encode_paths(paths))

    # -- checkpoints

    def save(self, path) -> None:
        meta = {"kind": "adapter", **asdict(self.config), "n_entities": self.n_entities,
                "n_relations": self.n_relations, "vocab_hash": self.vocab_hash or ""}
        nx.save_archive(path, self.params, meta)

    @classmethod
    def load(cls, path, kg: KnowledgeGraph | None = None) -> "KnowledgeAdapter":
        arrays, meta = nx.load_archive(path)
        if meta.get("kind") != "adapter":
            raise AdapterError(f"{path}: not an adapter checkpoint")
        if kg is not None and meta.get("vocab_hash") != kg.vocab_hash():
            raise AdapterError(f"{path}: checkpoint vocabulary hash {meta.get('vocab_hash')} "
                               f"does not match the graph ({kg.vocab_hash()})")
        c = AdapterConfig(dim=int(meta["dim"]), hidden=int(meta["hidden"]), lm_width=int(meta["lm_width"]),
                          max_hops=int(meta["max_hops"]), mode=meta["mode"], n_heads=int(meta["n_heads"]),
                          n_blocks=int(meta["n_blocks"]), use_struct=meta["use_struct"] == "True",
                          seed=int(meta["seed"]))
        adapter = cls(int(meta["n_entities"]), int(meta["n_relations"]), c, meta.get("vocab_hash") or None)
        for name, t in adapter.params.items():
            t.data = arrays[name].copy()
        return adapter
