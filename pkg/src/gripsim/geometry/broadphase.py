"""Environment-isolated spatial-hash broad phase.

One hash table serves the whole batch; every cell key packs the
environment id together with the integer cell coordinates, so two
environments occupying identical world coordinates can never share a
bucket and no cross-environment pair is ever emitted.  Primitives are
inserted tightly over the cells their AABB covers; queries probe the
radius-inflated neighborhood.  All insertion, matching, and filtering
is vectorized; candidates come out deterministically sorted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_BITS = 20
_OFF = 1 << (_BITS - 1)
_MASK_SPAN = 1 << _BITS


@dataclass
class CollisionSoup:
    """Static collision topology of one environment's combined surfaces.

    Index arrays refer to the environment's stacked surface-vertex array.
    collide[i, j] enables contact between bodies i and j (the diagonal
    controls self-collision); kinematic-kinematic pairs are always
    skipped since neither side carries solver DOFs.
    """

    vertex_body: np.ndarray              # (n_sv,) body id per surface vertex
    edges: np.ndarray                    # (n_e, 2) surface vertex indices
    triangles: np.ndarray                # (n_t, 3)
    body_kinematic: np.ndarray           # (n_b,) bool
    collide: np.ndarray                  # (n_b, n_b) bool, symmetric
    edge_rest_len_sq: np.ndarray = None  # (n_e,) for the edge-edge mollifier

    def __post_init__(self):
        self.vertex_body = np.asarray(self.vertex_body, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.body_kinematic = np.asarray(self.body_kinematic, dtype=bool)
        self.collide = np.asarray(self.collide, dtype=bool)
        if self.edge_rest_len_sq is None:
            self.edge_rest_len_sq = np.ones(len(self.edges))
        self.edge_body = self.vertex_body[self.edges[:, 0]]
        self.tri_body = self.vertex_body[self.triangles[:, 0]]
        kin = self.body_kinematic
        self.pair_ok = self.collide & ~(kin[:, None] & kin[None, :])

    def pair_enabled(self, body_a, body_b):
        return bool(self.pair_ok[body_a, body_b])


def _pack(env_id, cells):
    """Pack (env, cx, cy, cz) into one int64 key."""
    c = cells + _OFF
    if np.any((c < 0) | (c >= _MASK_SPAN)):
        raise ValueError("scene exceeds spatial hash coordinate range")
    return (
        (np.int64(env_id) << np.int64(3 * _BITS))
        | (c[..., 0].astype(np.int64) << np.int64(2 * _BITS))
        | (c[..., 1].astype(np.int64) << np.int64(_BITS))
        | c[..., 2].astype(np.int64)
    )


def _expand_boxes(lo, hi):
    """All integer cells in [lo, hi] per row: (row_ids, cells (m, 3))."""
    spans = hi - lo + 1
    counts = spans.prod(axis=1)
    total = int(counts.sum())
    row_ids = np.repeat(np.arange(len(lo)), counts)
    # grouped arange: local flat offset within each row's box
    cum = np.cumsum(counts)
    local = np.arange(total) - np.repeat(cum - counts, counts)
    sy = np.repeat(spans[:, 1], counts)
    sz = np.repeat(spans[:, 2], counts)
    dz = local % sz
    dy = (local // sz) % sy
    dx = local // (sz * sy)
    cells = np.repeat(lo, counts, axis=0) + np.stack([dx, dy, dz], axis=1)
    return row_ids, cells


def _match(table_keys_sorted, table_vals_sorted, query_keys, query_ids):
    """All (query_id, table_val) pairs whose keys match; vectorized."""
    left = np.searchsorted(table_keys_sorted, query_keys, side="left")
    right = np.searchsorted(table_keys_sorted, query_keys, side="right")
    counts = right - left
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    cum = np.cumsum(counts)
    flat = np.arange(total) - np.repeat(cum - counts, counts) + np.repeat(left, counts)
    return np.repeat(query_ids, counts), table_vals_sorted[flat]


def broad_phase(soups, positions, search_radius):
    """Spatial-hash candidate stencils for a batch of environments.

    soups/positions are parallel per-environment lists; search_radius (m)
    must cover dhat plus the per-env maximum displacement bound for the
    interval the candidates protect.  Returns one dict per environment:
    {"pt": (n,4) [p,t0,t1,t2] vertex rows, "ee": (m,4) vertex rows,
     "ee_edges": (m,2) edge ids, "pt_tri": (n,) triangle ids}.
    """
    r = float(search_radius)
    if r <= 0.0:
        raise ValueError("search_radius must be positive")

    # one shared cell size so all envs hash into one table
    extents = [r]
    for soup, x in zip(soups, positions):
        if len(soup.triangles):
            tv = x[soup.triangles]
            extents.append(float(np.median((tv.max(axis=1) - tv.min(axis=1)).max(axis=1))))
    cell = max(max(extents), 1e-9)
    inv = 1.0 / cell

    tri_keys, tri_vals = [], []
    edge_keys, edge_vals = [], []
    for env_id, (soup, x) in enumerate(zip(soups, positions)):
        if len(soup.triangles):
            tv = x[soup.triangles]
            lo = np.floor(tv.min(axis=1) * inv).astype(np.int64)
            hi = np.floor(tv.max(axis=1) * inv).astype(np.int64)
            ids, cells = _expand_boxes(lo, hi)
            tri_keys.append(_pack(env_id, cells))
            tri_vals.append(ids)
        if len(soup.edges):
            ev = x[soup.edges]
            lo = np.floor(ev.min(axis=1) * inv).astype(np.int64)
            hi = np.floor(ev.max(axis=1) * inv).astype(np.int64)
            ids, cells = _expand_boxes(lo, hi)
            edge_keys.append(_pack(env_id, cells))
            edge_vals.append(ids)

    def sorted_table(keys, vals):
        if not keys:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        keys = np.concatenate(keys)
        vals = np.concatenate(vals)
        order = np.argsort(keys, kind="stable")
        return keys[order], vals[order]

    tk, tv_ids = sorted_table(tri_keys, tri_vals)
    ek, ev_ids = sorted_table(edge_keys, edge_vals)

    results = []
    for env_id, (soup, x) in enumerate(zip(soups, positions)):
        results.append(_candidates_env(env_id, soup, x, r, inv, tk, tv_ids, ek, ev_ids))
    return results


def _candidates_env(env_id, soup, x, r, inv, tri_keys, tri_vals, edge_keys, edge_vals):
    n_sv = len(x)
    pt_out = np.zeros((0, 4), np.int64)
    pt_tri = np.zeros(0, np.int64)
    ee_out = np.zeros((0, 4), np.int64)
    ee_pairs = np.zeros((0, 2), np.int64)

    if len(soup.triangles) and n_sv:
        lo = np.floor((x - r) * inv).astype(np.int64)
        hi = np.floor((x + r) * inv).astype(np.int64)
        vids, cells = _expand_boxes(lo, hi)
        q_keys = _pack(env_id, cells)
        vi, ti = _match(tri_keys, tri_vals, q_keys, vids)
        if len(vi):
            pair_key = vi * np.int64(len(soup.triangles)) + ti
            uniq = np.unique(pair_key)
            vi = uniq // len(soup.triangles)
            ti = uniq % len(soup.triangles)
            tris = soup.triangles[ti]
            keep = (tris[:, 0] != vi) & (tris[:, 1] != vi) & (tris[:, 2] != vi)
            keep &= soup.pair_ok[soup.vertex_body[vi], soup.tri_body[ti]]
            # tight AABB rejection at the exact radius
            tv = x[tris]
            keep &= np.all(x[vi] >= tv.min(axis=1) - r, axis=1)
            keep &= np.all(x[vi] <= tv.max(axis=1) + r, axis=1)
            vi, ti = vi[keep], ti[keep]
            pt_out = np.concatenate([vi[:, None], soup.triangles[ti]], axis=1)
            pt_tri = ti

    if len(soup.edges):
        ev = x[soup.edges]
        lo = np.floor((ev.min(axis=1) - r) * inv).astype(np.int64)
        hi = np.floor((ev.max(axis=1) + r) * inv).astype(np.int64)
        eids, cells = _expand_boxes(lo, hi)
        q_keys = _pack(env_id, cells)
        ei, ej = _match(edge_keys, edge_vals, q_keys, eids)
        if len(ei):
            m = ej > ei
            ei, ej = ei[m], ej[m]
            pair_key = ei * np.int64(len(soup.edges)) + ej
            uniq = np.unique(pair_key)
            ei = uniq // len(soup.edges)
            ej = uniq % len(soup.edges)
            ea, eb = soup.edges[ei], soup.edges[ej]
            keep = (
                (ea[:, 0] != eb[:, 0]) & (ea[:, 0] != eb[:, 1])
                & (ea[:, 1] != eb[:, 0]) & (ea[:, 1] != eb[:, 1])
            )
            keep &= soup.pair_ok[soup.edge_body[ei], soup.edge_body[ej]]
            lo_i, hi_i = ev[ei].min(axis=1), ev[ei].max(axis=1)
            lo_j, hi_j = ev[ej].min(axis=1), ev[ej].max(axis=1)
            keep &= np.all(hi_j >= lo_i - r, axis=1) & np.all(lo_j <= hi_i + r, axis=1)
            ei, ej = ei[keep], ej[keep]
            ee_pairs = np.stack([ei, ej], axis=1)
            ee_out = np.concatenate([soup.edges[ei], soup.edges[ej]], axis=1)

    return {"pt": pt_out, "ee": ee_out, "ee_edges": ee_pairs, "pt_tri": pt_tri}
