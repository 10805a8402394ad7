"""Second stage: graph-assisted report generation.

The generator consumes two memories per sample. The observation context
``h_c`` encodes the current image's patches, a first-visit/follow-up marker,
and the (label, status-marker) token pairs of the current observations. The
progression context ``h_p`` encodes the prior image's patches plus the prior
report tokens, or collapses to a single learned null-memory vector when there
is no prior. Each decoder layer runs causal self-attention, cross-attention
into ``h_c``, then cross-attention into ``h_p``, and fuses the two branches
with a sigmoid gate computed from the observation branch.

On top of the decoder sits the graph side: the per-sample retrieved subgraph
is encoded by a relational graph convolution, scored at every step by the
progression reasoner (neighbor-mean relation scores scaled by gamma plus a
bilinear self score), softmaxed into a distribution over the subgraph's
entity nodes, and mixed with the vocabulary distribution through a second
sigmoid gate. An empty subgraph forces the gate to 1, which reduces the model
to the pure decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .backbone import EncoderBlock, FeedForward, VisualEncoder, VisualSequence
from .config import ModelConfig
from .constants import (
    RELATIONS,
    REL_OBS,
    SIDES,
    STATUSES,
    STATUS_POSITIVE,
)
from .corpus import Vocabulary
from .graph import NODE_OBSERVATION, ProgressionGraph

PRR_RELATIONS = tuple(r for r in RELATIONS if r != REL_OBS)


def observation_token_sequence(
    pairs: Sequence[tuple[str, str]], vocab: Vocabulary
) -> list[int]:
    """Flatten (label, status) pairs into label-token + status-marker ids."""
    ids: list[int] = []
    for label, status in pairs:
        ids.append(vocab.observation_token_id(label))
        ids.append(vocab.pos_id if status == STATUS_POSITIVE else vocab.neg_id)
    return ids


def _causal_mask(length: int, device) -> Tensor:
    return torch.triu(
        torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1
    )


class ObservationContextEncoder(nn.Module):
    """Encodes [patches; visit marker; observation tokens] into h_c."""

    def __init__(self, cfg: ModelConfig, token_embedding: nn.Embedding):
        super().__init__()
        self.token_embedding = token_embedding
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.hidden_size, cfg.num_heads, cfg.ffn_ratio, cfg.dropout)
            for _ in range(cfg.encoder_layers)
        )
        self.norm = nn.LayerNorm(cfg.hidden_size)

    def forward(
        self,
        visual: VisualSequence,
        obs_tokens: Tensor,
        obs_mask: Tensor,
        first_visit: Tensor,
        fiv_id: int,
        fov_id: int,
    ) -> tuple[Tensor, Tensor]:
        patches = visual.patches
        batch, n_patches, _ = patches.shape
        marker_ids = torch.where(
            first_visit,
            torch.full_like(first_visit, fiv_id, dtype=torch.long),
            torch.full_like(first_visit, fov_id, dtype=torch.long),
        )
        marker = self.token_embedding(marker_ids).unsqueeze(1)
        obs_emb = self.token_embedding(obs_tokens)
        x = torch.cat([patches, marker, obs_emb], dim=1)
        valid = torch.cat(
            [
                torch.ones(batch, n_patches + 1, dtype=torch.bool, device=x.device),
                obs_mask,
            ],
            dim=1,
        )
        key_padding = ~valid
        for block in self.blocks:
            x = block(x, key_padding_mask=key_padding)
        return self.norm(x), valid


class ProgressionContextEncoder(nn.Module):
    """Encodes [prior patches; prior report] into h_p, or the null memory."""

    def __init__(
        self,
        cfg: ModelConfig,
        token_embedding: nn.Embedding,
        pos_embedding: nn.Embedding,
    ):
        super().__init__()
        self.token_embedding = token_embedding
        self.pos_embedding = pos_embedding
        self.null_memory = nn.Parameter(torch.zeros(cfg.hidden_size))
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.hidden_size, cfg.num_heads, cfg.ffn_ratio, cfg.dropout)
            for _ in range(cfg.encoder_layers)
        )
        self.norm = nn.LayerNorm(cfg.hidden_size)
        nn.init.trunc_normal_(self.null_memory, std=0.02)

    def forward(
        self,
        prior_visual: VisualSequence,
        report_tokens: Tensor,
        report_mask: Tensor,
        has_prior: Tensor,
    ) -> tuple[Tensor, Tensor]:
        patches = prior_visual.patches
        batch, n_patches, hidden = patches.shape
        positions = torch.arange(report_tokens.shape[1], device=patches.device)
        report_emb = self.token_embedding(report_tokens) + self.pos_embedding(positions)
        x = torch.cat([patches, report_emb], dim=1)
        valid = torch.cat(
            [
                torch.ones(batch, n_patches, dtype=torch.bool, device=x.device),
                report_mask,
            ],
            dim=1,
        )
        # Rows without a prior never reach the blocks; they get the null slot.
        valid = valid & has_prior.unsqueeze(1)
        key_padding = ~valid
        safe_padding = key_padding.clone()
        safe_padding[~has_prior, 0] = False
        for block in self.blocks:
            x = block(x, key_padding_mask=safe_padding)
        x = self.norm(x)
        null = self.null_memory.to(x.dtype).expand(batch, 1, hidden)
        x = torch.cat([null, x], dim=1)
        null_valid = torch.cat(
            [
                ~has_prior.unsqueeze(1),
                valid,
            ],
            dim=1,
        )
        return x, null_valid


class RelationalGraphEncoder(nn.Module):
    """L rounds of relation-typed message passing with self-loop and ReLU.

    Messages flow along stored edge direction; each node's relational sum is
    scaled by 1 / (number of incoming edges), then the self-loop term is
    added and the result rectified.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_layers = cfg.rgcn_layers
        h = cfg.hidden_size
        self.relation_weights = nn.Parameter(
            torch.empty(cfg.rgcn_layers, len(RELATIONS), h, h)
        )
        self.self_weights = nn.Parameter(torch.empty(cfg.rgcn_layers, h, h))
        with torch.no_grad():
            for layer in range(cfg.rgcn_layers):
                for r in range(len(RELATIONS)):
                    nn.init.xavier_uniform_(self.relation_weights[layer, r])
                nn.init.xavier_uniform_(self.self_weights[layer])

    def forward(self, subgraph: ProgressionGraph, init: Tensor) -> Tensor:
        n_nodes = len(subgraph.nodes)
        if init.shape[0] != n_nodes:
            raise ValueError(
                f"init has {init.shape[0]} rows for a {n_nodes}-node graph"
            )
        if n_nodes == 0:
            return init
        device = init.device
        src = torch.tensor([e.source for e in subgraph.edges], dtype=torch.long, device=device)
        dst = torch.tensor([e.target for e in subgraph.edges], dtype=torch.long, device=device)
        rel = torch.tensor(
            [RELATIONS.index(e.relation) for e in subgraph.edges],
            dtype=torch.long,
            device=device,
        )
        in_degree = torch.zeros(n_nodes, dtype=init.dtype, device=device)
        if len(subgraph.edges) > 0:
            in_degree.index_add_(0, dst, torch.ones_like(dst, dtype=init.dtype))
        scale = 1.0 / in_degree.clamp(min=1.0)
        h = init
        for layer in range(self.n_layers):
            agg = torch.zeros_like(h)
            if len(subgraph.edges) > 0:
                messages = torch.einsum(
                    "ehk,ek->eh", self.relation_weights[layer][rel], h[src]
                )
                agg.index_add_(0, dst, messages)
            h = torch.relu(agg * scale.unsqueeze(1) + h @ self.self_weights[layer].T)
        return h


def rgcn_encode(
    encoder: RelationalGraphEncoder, subgraph: ProgressionGraph, init: Tensor
) -> Tensor:
    return encoder(subgraph, init)


class ProgressionReasoner(nn.Module):
    """Scores subgraph entities against a decoder state.

    For entity e with in-edges (o, r): ps = mean_r,o tanh(h_t^T W_r [h_o; h_e])
    (0 when no observation points at e); score = gamma * ps +
    tanh(h_t W_s h_e); p_G = softmax over the subgraph's entities.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden_size
        self.gamma = cfg.gamma
        self.relation_weights = nn.Parameter(torch.empty(len(PRR_RELATIONS), h, 2 * h))
        self.self_weight = nn.Parameter(torch.empty(h, h))
        with torch.no_grad():
            for r in range(len(PRR_RELATIONS)):
                nn.init.xavier_uniform_(self.relation_weights[r])
            nn.init.xavier_uniform_(self.self_weight)

    def entity_scores(
        self, h_t: Tensor, node_emb: Tensor, subgraph: ProgressionGraph
    ) -> tuple[Tensor, list[int]]:
        """Raw pre-softmax scores, shape (T, E), plus entity node positions."""
        entity_pos = subgraph.entity_indices()
        squeeze = h_t.dim() == 1
        if squeeze:
            h_t = h_t.unsqueeze(0)
        if not entity_pos:
            return h_t.new_zeros(h_t.shape[0], 0), entity_pos
        device = h_t.device
        entity_emb = node_emb[entity_pos]
        col_of = {node: i for i, node in enumerate(entity_pos)}

        neighbor_cols: list[int] = []
        neighbor_vecs: list[Tensor] = []
        for edge in subgraph.edges:
            src_node = subgraph.nodes[edge.source]
            dst_node = subgraph.nodes[edge.target]
            if src_node.kind != NODE_OBSERVATION or not dst_node.is_entity:
                continue
            pair = torch.cat([node_emb[edge.source], node_emb[edge.target]])
            w = self.relation_weights[PRR_RELATIONS.index(edge.relation)]
            neighbor_cols.append(col_of[edge.target])
            neighbor_vecs.append(w @ pair)
        ps = h_t.new_zeros(h_t.shape[0], len(entity_pos))
        if neighbor_vecs:
            stacked = torch.stack(neighbor_vecs)
            per_edge = torch.tanh(h_t @ stacked.T)
            cols = torch.tensor(neighbor_cols, dtype=torch.long, device=device)
            counts = torch.zeros(len(entity_pos), dtype=h_t.dtype, device=device)
            counts.index_add_(0, cols, torch.ones_like(cols, dtype=h_t.dtype))
            sums = h_t.new_zeros(h_t.shape[0], len(entity_pos))
            sums.index_add_(1, cols, per_edge)
            ps = sums / counts.clamp(min=1.0)
        self_scores = torch.tanh(h_t @ self.self_weight @ entity_emb.T)
        scores = self.gamma * ps + self_scores
        if squeeze:
            scores = scores.squeeze(0)
        return scores, entity_pos

    def forward(
        self, h_t: Tensor, node_emb: Tensor, subgraph: ProgressionGraph
    ) -> tuple[Tensor, list[int]]:
        scores, entity_pos = self.entity_scores(h_t, node_emb, subgraph)
        if scores.shape[-1] == 0:
            return scores, entity_pos
        return torch.softmax(scores, dim=-1), entity_pos


def prr_entity_distribution(
    reasoner: ProgressionReasoner,
    h_t: Tensor,
    node_emb: Tensor,
    subgraph: ProgressionGraph,
) -> Tensor:
    p_g, _ = reasoner(h_t, node_emb, subgraph)
    return p_g


class DecoderLayer(nn.Module):
    """Causal self-attention, dual cross-attention, and the fusion gate."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden_size
        self.norm_self = nn.LayerNorm(h)
        self.self_attn = nn.MultiheadAttention(
            h, cfg.num_heads, dropout=cfg.dropout, batch_first=True
        )
        self.norm_obs = nn.LayerNorm(h)
        self.cross_obs = nn.MultiheadAttention(
            h, cfg.num_heads, dropout=cfg.dropout, batch_first=True
        )
        self.norm_prior = nn.LayerNorm(h)
        self.cross_prior = nn.MultiheadAttention(
            h, cfg.num_heads, dropout=cfg.dropout, batch_first=True
        )
        self.alpha_gate = nn.Linear(h, 1)
        self.norm_ffn = nn.LayerNorm(h)
        self.ffn = FeedForward(h, cfg.ffn_ratio, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(
        self,
        x: Tensor,
        self_padding: Tensor | None,
        h_c: Tensor,
        c_padding: Tensor,
        h_p: Tensor,
        p_padding: Tensor,
        causal: Tensor,
    ) -> tuple[Tensor, Tensor]:
        normed = self.norm_self(x)
        attended, _ = self.self_attn(
            normed,
            normed,
            normed,
            attn_mask=causal,
            key_padding_mask=self_padding,
            need_weights=False,
        )
        h_s = x + self.drop(attended)

        obs_attended, _ = self.cross_obs(
            self.norm_obs(h_s),
            h_c,
            h_c,
            key_padding_mask=c_padding,
            need_weights=False,
        )
        h_obs = h_s + self.drop(obs_attended)

        prior_attended, _ = self.cross_prior(
            self.norm_prior(h_obs),
            h_p,
            h_p,
            key_padding_mask=p_padding,
            need_weights=False,
        )
        h_pri = h_obs + self.drop(prior_attended)

        alpha = torch.sigmoid(self.alpha_gate(h_obs)).squeeze(-1)
        fused = alpha.unsqueeze(-1) * h_pri + (1.0 - alpha.unsqueeze(-1)) * h_obs
        out = fused + self.ffn(self.norm_ffn(fused))
        return out, alpha


class ReportDecoder(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        vocab_size: int,
        token_embedding: nn.Embedding,
        pos_embedding: nn.Embedding,
    ):
        super().__init__()
        self.token_embedding = token_embedding
        self.pos_embedding = pos_embedding
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.norm = nn.LayerNorm(cfg.hidden_size)
        self.vocab_proj = nn.Linear(cfg.hidden_size, vocab_size)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(
        self,
        prefix: Tensor,
        prefix_mask: Tensor | None,
        h_c: Tensor,
        c_mask: Tensor,
        h_p: Tensor,
        p_mask: Tensor,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Return hidden states (B, T, h), logits (B, T, V), alphas (B, T)."""
        batch, length = prefix.shape
        positions = torch.arange(length, device=prefix.device)
        x = self.token_embedding(prefix) + self.pos_embedding(positions)
        x = self.drop(x)
        causal = _causal_mask(length, prefix.device)
        self_padding = None if prefix_mask is None else ~prefix_mask
        c_padding = ~c_mask
        p_padding = ~p_mask
        alpha = x.new_zeros(batch, length)
        for layer in self.layers:
            x, alpha = layer(
                x, self_padding, h_c, c_padding, h_p, p_padding, causal
            )
        h = self.norm(x)
        logits = self.vocab_proj(h)
        return h, logits, alpha


@dataclass
class Stage2Batch:
    """Collated teacher-forcing inputs for one step of stage-2 training."""

    images: Tensor
    prior_images: Tensor
    has_prior: Tensor
    first_visit: Tensor
    obs_tokens: Tensor
    obs_mask: Tensor
    prior_report: Tensor
    prior_mask: Tensor
    target: Tensor
    target_mask: Tensor
    subgraphs: list[ProgressionGraph]

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class Stage2Output:
    """Per-step mixed distributions and gates, aligned with target[:, 1:]."""

    p: Tensor
    gate: Tensor
    alpha: Tensor
    target_out: Tensor
    step_mask: Tensor
    membership: Tensor


@dataclass
class Stage2Loss:
    nll: Tensor
    gate: Tensor
    total: Tensor


def mix_distributions(
    p_v: Tensor,
    p_g: Tensor,
    h_t: Tensor,
    gate_layer: nn.Linear,
    entity_token_ids: Sequence[int],
) -> tuple[Tensor, Tensor]:
    """Gated vocabulary/graph mixture.

    g = sigmoid(W_g h_t + b_g); the graph mass lands on the entities' token
    ids. An empty p_G returns p_V untouched with g reported as 1.
    """
    gate_logit = gate_layer(h_t).squeeze(-1)
    if p_g.shape[-1] == 0:
        return p_v, torch.ones_like(gate_logit)
    gate = torch.sigmoid(gate_logit)
    mixed = gate.unsqueeze(-1) * p_v
    ids = torch.tensor(list(entity_token_ids), dtype=torch.long, device=p_v.device)
    graph_part = (1.0 - gate).unsqueeze(-1) * p_g
    return mixed.index_add(-1, ids, graph_part), gate


def graph_membership_labels(
    target_ids: Tensor, entity_token_ids: set[int]
) -> Tensor:
    """Gate targets: 0 where the token is a subgraph entity token, else 1."""
    labels = torch.ones_like(target_ids, dtype=torch.get_default_dtype())
    for i, tok in enumerate(target_ids.tolist()):
        if tok in entity_token_ids:
            labels[i] = 0.0
    return labels


def stage2_loss(
    p: Tensor, gate: Tensor, targets: Tensor, membership: Tensor, lam: float
) -> Stage2Loss:
    """Per-sequence sums: L_NLL + lam * gate BCE."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    eps = 1e-12
    picked = p.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    nll = -torch.log(picked.clamp(min=eps)).sum()
    gate_bce = -(
        membership * torch.log(gate.clamp(min=eps))
        + (1.0 - membership) * torch.log((1.0 - gate).clamp(min=eps))
    ).sum()
    return Stage2Loss(nll, gate_bce, nll + lam * gate_bce)


class ReportGenerator(nn.Module):
    """Full stage-2 model. Ablation switches prune inputs structurally:
    ``use_obs`` drops observation tokens, ``use_prior`` forces the null
    memory, ``use_graph`` forces the mixture gate to 1 and skips graph work.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        vocab: Vocabulary,
        use_obs: bool = True,
        use_prior: bool = True,
        use_graph: bool = True,
    ):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.use_obs = use_obs
        self.use_prior = use_prior
        self.use_graph = use_graph
        h = cfg.hidden_size
        self.token_embedding = nn.Embedding(len(vocab), h, padding_idx=vocab.pad_id)
        self.pos_embedding = nn.Embedding(cfg.max_positions, h)
        self.visual_encoder = VisualEncoder(cfg)
        self.obs_encoder = ObservationContextEncoder(cfg, self.token_embedding)
        self.prior_encoder = ProgressionContextEncoder(
            cfg, self.token_embedding, self.pos_embedding
        )
        self.decoder = ReportDecoder(cfg, len(vocab), self.token_embedding, self.pos_embedding)
        self.rgcn = RelationalGraphEncoder(cfg)
        self.reasoner = ProgressionReasoner(cfg)
        self.mixture_gate = nn.Linear(h, 1)
        self.status_side_embedding = nn.Embedding(len(STATUSES) * len(SIDES), h)
        nn.init.trunc_normal_(self.token_embedding.weight, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding.weight, std=0.02)
        nn.init.trunc_normal_(self.status_side_embedding.weight, std=0.02)
        with torch.no_grad():
            self.token_embedding.weight[vocab.pad_id].zero_()

    def node_embeddings(self, subgraph: ProgressionGraph) -> Tensor:
        """Initial node states: token rows, averaged with status/side for
        observation nodes."""
        device = self.token_embedding.weight.device
        if not subgraph.nodes:
            return self.token_embedding.weight.new_zeros(0, self.cfg.hidden_size)
        token_ids = torch.tensor(
            [n.token_id for n in subgraph.nodes], dtype=torch.long, device=device
        )
        emb = self.token_embedding(token_ids)
        rows = []
        for i, node in enumerate(subgraph.nodes):
            if node.kind == NODE_OBSERVATION:
                idx = STATUSES.index(node.status) * len(SIDES) + SIDES.index(node.side)
                marker = self.status_side_embedding.weight[idx]
                rows.append((emb[i] + marker) / 2.0)
            else:
                rows.append(emb[i])
        return torch.stack(rows)

    def encode_contexts(self, batch: Stage2Batch) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        visual = self.visual_encoder(batch.images)
        prior_visual = self.visual_encoder(batch.prior_images)
        if self.use_obs:
            obs_tokens, obs_mask = batch.obs_tokens, batch.obs_mask
        else:
            obs_tokens = batch.obs_tokens[:, :0]
            obs_mask = batch.obs_mask[:, :0]
        h_c, c_mask = self.obs_encoder(
            visual,
            obs_tokens,
            obs_mask,
            batch.first_visit,
            self.vocab.first_visit_id,
            self.vocab.follow_up_id,
        )
        has_prior = batch.has_prior if self.use_prior else torch.zeros_like(batch.has_prior)
        h_p, p_mask = self.prior_encoder(
            prior_visual, batch.prior_report, batch.prior_mask, has_prior
        )
        return h_c, c_mask, h_p, p_mask

    def graph_distribution(
        self, hidden: Tensor, subgraph: ProgressionGraph
    ) -> tuple[Tensor, list[int]]:
        """p_G over the subgraph's entities for one sample's step states."""
        if not self.use_graph or not subgraph.entity_indices():
            return hidden.new_zeros(hidden.shape[0], 0), []
        node_emb = self.rgcn(subgraph, self.node_embeddings(subgraph))
        return self.reasoner(hidden, node_emb, subgraph)

    def forward(self, batch: Stage2Batch) -> Stage2Output:
        h_c, c_mask, h_p, p_mask = self.encode_contexts(batch)
        prefix = batch.target[:, :-1]
        prefix_mask = batch.target_mask[:, :-1]
        hidden, logits, alpha = self.decoder(
            prefix, prefix_mask, h_c, c_mask, h_p, p_mask
        )
        p_v = torch.softmax(logits, dim=-1)
        target_out = batch.target[:, 1:]
        step_mask = batch.target_mask[:, 1:]
        mixed_rows: list[Tensor] = []
        gates: list[Tensor] = []
        membership_rows: list[Tensor] = []
        for b, subgraph in enumerate(batch.subgraphs):
            p_g, entity_pos = self.graph_distribution(hidden[b], subgraph)
            entity_ids = [subgraph.nodes[i].token_id for i in entity_pos]
            mixed, gate = mix_distributions(
                p_v[b], p_g, hidden[b], self.mixture_gate, entity_ids
            )
            mixed_rows.append(mixed)
            gates.append(gate)
            membership_rows.append(
                graph_membership_labels(target_out[b], set(entity_ids)).to(p_v.dtype)
            )
        return Stage2Output(
            p=torch.stack(mixed_rows),
            gate=torch.stack(gates),
            alpha=alpha,
            target_out=target_out,
            step_mask=step_mask,
            membership=torch.stack(membership_rows),
        )

    def decode_step(
        self,
        prefix: Tensor,
        h_c: Tensor,
        c_mask: Tensor,
        h_p: Tensor,
        p_mask: Tensor,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Single-sample step: last-position (h_t, p_V, alpha) for a prefix."""
        if prefix.dim() != 1 or prefix.shape[0] == 0:
            raise ValueError("prefix must be a non-empty 1-d id tensor")
        if int(prefix.max()) >= len(self.vocab) or int(prefix.min()) < 0:
            raise ValueError("prefix token id outside the vocabulary")
        hidden, logits, alpha = self.decoder(
            prefix.unsqueeze(0), None, h_c, c_mask, h_p, p_mask
        )
        p_v = torch.softmax(logits[0, -1], dim=-1)
        return hidden[0, -1], p_v, alpha[0, -1]


@dataclass
class Stage2Example:
    """One record's tensors plus its retrieved subgraph."""

    image: Tensor
    prior_image: Tensor
    has_prior: bool
    first_visit: bool
    obs_tokens: list[int]
    prior_report: list[int]
    target: list[int]
    subgraph: ProgressionGraph


def build_stage2_example(
    record,
    vocab: Vocabulary,
    cfg: ModelConfig,
    graph: ProgressionGraph,
    obs_pairs: Sequence[tuple[str, str]],
    progressions: Sequence[str],
    image_root=None,
    include_target: bool = True,
) -> Stage2Example:
    """Assemble model inputs for one visit.

    ``obs_pairs`` and ``progressions`` form the subgraph query and the O^c
    token block: gold labels during training, stage-1 predictions at
    inference. Prior-side inputs always come from the stored prior record.
    """
    from .corpus import decode_image_ref
    from .graph import retrieve_subgraph

    image = torch.from_numpy(decode_image_ref(record.image_ref, image_root))
    prior = record.prior
    if prior is not None:
        prior_image = torch.from_numpy(decode_image_ref(prior.image_ref, image_root))
        prior_report = vocab.encode(prior.report_tokens())[: cfg.max_positions]
        prior_obs = list(prior.observations)
    else:
        prior_image = torch.zeros_like(image)
        prior_report = []
        prior_obs = []
    target: list[int] = []
    if include_target:
        target = vocab.encode_report(record.report)
        if len(target) > cfg.max_positions:
            raise ValueError(
                f"report of {record.study_id} needs {len(target)} positions, "
                f"model allows {cfg.max_positions}"
            )
    subgraph = retrieve_subgraph(graph, prior_obs, obs_pairs, progressions)
    return Stage2Example(
        image=image,
        prior_image=prior_image,
        has_prior=prior is not None,
        first_visit=prior is None,
        obs_tokens=observation_token_sequence(obs_pairs, vocab),
        prior_report=prior_report,
        target=target,
        subgraph=subgraph,
    )


def collate_stage2(examples: Sequence[Stage2Example], pad_id: int) -> Stage2Batch:
    """Pad a list of examples into one batch."""
    if not examples:
        raise ValueError("cannot collate an empty example list")

    def pad_block(rows: list[list[int]], width: int) -> tuple[Tensor, Tensor]:
        ids = torch.full((len(rows), width), pad_id, dtype=torch.long)
        mask = torch.zeros(len(rows), width, dtype=torch.bool)
        for i, row in enumerate(rows):
            if row:
                ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
                mask[i, : len(row)] = True
        return ids, mask

    obs_width = max(len(e.obs_tokens) for e in examples)
    prior_width = max(len(e.prior_report) for e in examples)
    target_width = max(len(e.target) for e in examples)
    obs_tokens, obs_mask = pad_block([e.obs_tokens for e in examples], obs_width)
    prior_report, prior_mask = pad_block([e.prior_report for e in examples], prior_width)
    target, target_mask = pad_block([e.target for e in examples], target_width)
    return Stage2Batch(
        images=torch.stack([e.image for e in examples]),
        prior_images=torch.stack([e.prior_image for e in examples]),
        has_prior=torch.tensor([e.has_prior for e in examples], dtype=torch.bool),
        first_visit=torch.tensor([e.first_visit for e in examples], dtype=torch.bool),
        obs_tokens=obs_tokens,
        obs_mask=obs_mask,
        prior_report=prior_report,
        prior_mask=prior_mask,
        target=target,
        target_mask=target_mask,
        subgraphs=[e.subgraph for e in examples],
    )


def stage2_batch_loss(
    output: Stage2Output, lam: float
) -> tuple[Stage2Loss, Tensor]:
    """Aggregate masked per-step losses; returns (sums, per-token mean loss)."""
    eps = 1e-12
    picked = output.p.gather(-1, output.target_out.unsqueeze(-1)).squeeze(-1)
    step_nll = -torch.log(picked.clamp(min=eps)) * output.step_mask
    gate_bce = -(
        output.membership * torch.log(output.gate.clamp(min=eps))
        + (1.0 - output.membership) * torch.log((1.0 - output.gate).clamp(min=eps))
    ) * output.step_mask
    n_tokens = output.step_mask.sum().clamp(min=1.0)
    nll_sum = step_nll.sum()
    gate_sum = gate_bce.sum()
    total = nll_sum + lam * gate_sum
    per_token = total / n_tokens
    return Stage2Loss(nll_sum, gate_sum, total), per_token


__all__ = [
    "PRR_RELATIONS",
    "DecoderLayer",
    "ObservationContextEncoder",
    "ProgressionContextEncoder",
    "ProgressionReasoner",
    "RelationalGraphEncoder",
    "ReportDecoder",
    "ReportGenerator",
    "Stage2Batch",
    "Stage2Example",
    "Stage2Loss",
    "Stage2Output",
    "build_stage2_example",
    "collate_stage2",
    "graph_membership_labels",
    "mix_distributions",
    "observation_token_sequence",
    "prr_entity_distribution",
    "rgcn_encode",
    "stage2_batch_loss",
    "stage2_loss",
]
