"""End-to-end glue: preprocessed pairs through the network into assignments.

For mini-batches the pillar and positional encoders run jointly over every
pillar of every pair so batch-norm statistics pool across the whole batch;
the attention graph and transport layers then run per pair.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network as net
from . import transport
from .network import ModelParameters
from .pairio import PreprocessedPair
from .transport import AssignmentMatrix, MatchSet


@dataclass
class MatchResult:
    assignment: AssignmentMatrix
    matches: MatchSet


def batch_assignments(
    params: ModelParameters,
    pairs: list[PreprocessedPair],
    train: bool = False,
    sinkhorn_iterations: int | None = None,
) -> list[AssignmentMatrix]:
    hyper = params.hyper
    iters = hyper.sinkhorn_iterations if sinkhorn_iterations is None else sinkhorn_iterations
    dtype = params.pillar_weight.dtype

    stacks, coords, offsets = [], [], [0]
    for pair in pairs:
        s_src, s_tgt = pair.stacks
        c_src, c_tgt = pair.coords
        stacks.extend([s_src, s_tgt])
        coords.extend([c_src, c_tgt])
        offsets.append(offsets[-1] + len(s_src))
        offsets.append(offsets[-1] + len(s_tgt))

    all_stacks = ad.as_tensor(np.concatenate(stacks), dtype=dtype)
    all_coords = ad.as_tensor(np.concatenate(coords), dtype=dtype)
    encoded = net.encode_pillars(all_stacks, params, train)
    positional = net.encode_positions(all_coords, params, train)
    nodes_all = net.init_nodes(encoded, positional)

    assignments = []
    for index, pair in enumerate(pairs):
        lo = offsets[2 * index]
        mid = offsets[2 * index + 1]
        hi = offsets[2 * index + 2]
        nodes_src = nodes_all.narrow(0, lo, mid - lo)
        nodes_tgt = nodes_all.narrow(0, mid, hi - mid)
        for li, layer in enumerate(params.layers):
            nodes_src, nodes_tgt = net.gnn_layer(nodes_src, nodes_tgt, layer, li, hyper)
        desc_src = net.final_projection(nodes_src, params)
        desc_tgt = net.final_projection(nodes_tgt, params)
        raw = transport.score_matrix(desc_src, desc_tgt)
        augmented = transport.augment_dustbin(raw, params.dustbin_score)
        assignments.append(
            transport.sinkhorn(
                augmented,
                iterations=iters,
                mode=hyper.sinkhorn_mode,
                marginals=hyper.sinkhorn_marginals,
            )
        )
    return assignments


def match_pair(
    params: ModelParameters,
    pair: PreprocessedPair,
    threshold: float | None = None,
    sinkhorn_iterations: int | None = None,
) -> MatchResult:
    """Inference for a single pair: assignment plus hard matches."""
    assignment = batch_assignments(
        params, [pair], train=False, sinkhorn_iterations=sinkhorn_iterations
    )[0]
    if threshold is None:
        threshold = params.hyper.match_threshold
    return MatchResult(
        assignment=assignment,
        matches=transport.extract_matches(assignment, threshold),
    )
