"""LightGCN-style propagation over the normalized bipartite graph and its adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import InteractionGraph


@dataclass
class PropagatedEmbeddings:
    user_layers: list[np.ndarray]  # layers 1..L
    item_layers: list[np.ndarray]
    users: np.ndarray  # e^g_u
    items: np.ndarray  # e^g_i


def propagate_layer(graph: InteractionGraph, users: np.ndarray, items: np.ndarray):
    """One hop: each node sums its neighbours scaled by 1/sqrt(|N_u| |N_i|)."""
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    return graph.norm @ items, graph.norm_t @ users


def propagate(graph: InteractionGraph, base_users, base_items, layers: int = 3,
              include_layer0: bool = False) -> PropagatedEmbeddings:
    """Run ``layers`` hops from the base tables and sum layers 1..L.

    With ``include_layer0`` the base tables join the sum as well.
    """
    if layers < 1:
        raise ValueError("need at least one propagation layer")
    u = np.asarray(base_users, dtype=np.float64)
    i = np.asarray(base_items, dtype=np.float64)
    ul, il = [], []
    sum_u = u.copy() if include_layer0 else np.zeros_like(u)
    sum_i = i.copy() if include_layer0 else np.zeros_like(i)
    for _ in range(layers):
        u, i = propagate_layer(graph, u, i)
        ul.append(u)
        il.append(i)
        sum_u += u
        sum_i += i
    return PropagatedEmbeddings(ul, il, sum_u, sum_i)


def backprop_graph(graph: InteractionGraph, layers: int, grad_users, grad_items,
                   include_layer0: bool = False):
    """Gradient w.r.t. the base tables given gradients w.r.t. e^g.

    The normalized adjacency is symmetric, so the adjoint of L hops is the same
    propagation applied to the upstream gradient.
    """
    out = propagate(graph, grad_users, grad_items, layers, include_layer0)
    return out.users, out.items
