"""Span enumeration, span representation, and all candidate scoring heads.

Every scoring function builds autodiff graph nodes so the same code path
serves both decoding (values only) and training (values + gradients).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import MentionAddress
from .encoder import WindowInput
from .errors import ValidationError

DISTANCE_BUCKETS = 5  # turn distance 0,1,2,3,4+


def distance_bucket(turn_distance: int) -> int:
    return min(turn_distance, DISTANCE_BUCKETS - 1)


def enumerate_spans(n: int, max_width: int) -> list[tuple[int, int]]:
    """All (start, end) spans of width <= max_width, lexicographically."""
    return [
        (s, e)
        for s in range(n)
        for e in range(s, min(s + max_width, n))
    ]


def resolve_window_span(window: WindowInput, addr: MentionAddress) -> tuple[int, int]:
    """Map a mention address to inclusive window positions.

    Token positions of one utterance are contiguous in the window, so a valid
    address can never cross a speaker token or ``[SEP]``.
    """
    u, s, e = addr
    if not window.covers(u):
        raise ValidationError(f"mention {addr} lies outside the window")
    try:
        lo = window.position_of(u, s)
        hi = window.position_of(u, e)
    except KeyError as exc:
        raise ValidationError(f"mention {addr} lies outside the window") from exc
    if hi - lo != e - s:
        raise ValidationError(f"mention {addr} crosses a special token")
    return lo, hi


def represent_spans(
    embeddings: ad.Node,
    window: WindowInput,
    addrs: list[MentionAddress],
    params: dict[str, ad.Node],
) -> ad.Node:
    """Span representations, one row per address, in the given order.

    g = [first token ; last token ; attention-weighted span average ;
    width-bucket embedding], so the width is ``3*d + d_width``. Attention
    weights are a softmax over per-token scores from ``span_attn_w``.
    Spans are grouped by width so each group runs as one batched matmul.
    """
    if not addrs:
        raise ValidationError("represent_spans needs at least one span")
    positions = [resolve_window_span(window, a) for a in addrs]
    widths = [hi - lo + 1 for lo, hi in positions]
    max_bucket = params["width_emb"].value.shape[0]

    token_logits = ad.matmul(embeddings, params["span_attn_w"])  # W x 1
    firsts = ad.select_rows(embeddings, [lo for lo, _ in positions])
    lasts = ad.select_rows(embeddings, [hi for _, hi in positions])
    width_rows = ad.select_rows(
        params["width_emb"], [min(w, max_bucket) - 1 for w in widths]
    )

    # Attention-weighted average, batched per width group.
    by_width: dict[int, list[int]] = {}
    for idx, w in enumerate(widths):
        by_width.setdefault(w, []).append(idx)
    d = embeddings.value.shape[1]
    group_rows: list[ad.Node] = []
    group_order: list[int] = []
    for w, members in sorted(by_width.items()):
        starts = [positions[i][0] for i in members]
        logit_cols = [
            ad.select_rows(token_logits, [s + t for s in starts]) for t in range(w)
        ]
        att = ad.softmax_rows(ad.concat_columns(*logit_cols))  # m x w
        ones_row = ad.constant(np.ones((1, d)))
        acc = None
        for t in range(w):
            tok_rows = ad.select_rows(embeddings, [s + t for s in starts])
            # att column t as an m x 1, repeated across the embedding width
            weight_mask = ad.matmul(
                ad.transpose(ad.select_rows(ad.transpose(att), [t])), ones_row
            )
            term = ad.elementwise_multiply(weight_mask, tok_rows)
            acc = term if acc is None else ad.add(acc, term)
        group_rows.append(acc)
        group_order.extend(members)

    attended_grouped = ad.concat_rows(*group_rows)
    # Undo the width grouping so rows line up with the requested order.
    inverse = [0] * len(addrs)
    for grouped_pos, original in enumerate(group_order):
        inverse[original] = grouped_pos
    attended = ad.select_rows(attended_grouped, inverse)
    return ad.concat_columns(firsts, lasts, attended, width_rows)


def span_representation(
    embeddings: ad.Node,
    window: WindowInput,
    addr: MentionAddress,
    params: dict[str, ad.Node],
) -> ad.Node:
    return represent_spans(embeddings, window, [addr], params)


def mention_scores(g: ad.Node, params: dict[str, ad.Node]) -> ad.Node:
    """One score per row of g; the sign is the keep/drop boundary."""
    return ad.affine(g, params["mention_w"], params["mention_b"])


def mention_score(g: ad.Node, params: dict[str, ad.Node]) -> ad.Node:
    return mention_scores(g, params)


def prune_top_spans(
    spans: list[tuple[int, int]],
    scores: np.ndarray,
    n_tokens: int,
    ratio: float,
) -> list[int]:
    """Indices of the kept spans: top ceil(ratio*n) by score, no crossing.

    Ties break toward the earlier (start, end); spans crossing an already
    accepted span are skipped. The returned indices are sorted so the spans
    come out in (start, end) order.
    """
    cap = int(np.ceil(ratio * n_tokens))
    order = sorted(range(len(spans)), key=lambda i: (-scores[i], spans[i]))
    kept: list[int] = []
    for i in order:
        if len(kept) >= cap:
            break
        s, e = spans[i]
        crosses = any(
            (s < s2 <= e < e2) or (s2 < s <= e2 < e)
            for s2, e2 in (spans[j] for j in kept)
        )
        if not crosses:
            kept.append(i)
    return sorted(kept, key=lambda i: spans[i])


def self_attend(g: ad.Node, params: dict[str, ad.Node]) -> ad.Node:
    """Scaled dot-product self-attention over the candidate matrix."""
    d = g.value.shape[1]
    q = ad.matmul(g, params["sa_wq"])
    k = ad.matmul(g, params["sa_wk"])
    v = ad.matmul(g, params["sa_wv"])
    att = ad.softmax_rows(ad.scalar_scale(ad.matmul(q, ad.transpose(k)),
                                          1.0 / np.sqrt(d)))
    return ad.matmul(att, v)


@dataclass
class AntecedentRow:
    """Scores for one current-turn candidate over its allowed antecedents.

    Column 0 of ``scores`` is the dummy antecedent, fixed at exactly 0;
    column ``j+1`` corresponds to ``antecedents[j]``. Antecedent pool indices
    are ordered nearest-first so an argmax tie prefers the closest one.
    """

    pool_index: int
    antecedents: list[int]
    scores: ad.Node  # 1 x (1 + len(antecedents))

    @property
    def values(self) -> np.ndarray:
        return self.scores.value[0]


def pairwise_scores(
    pool_addresses: list[MentionAddress],
    carried_flags: list[bool],
    g_ctx: ad.Node,
    mention_score_col: ad.Node,
    params: dict[str, ad.Node],
    max_antecedents: int,
) -> list[AntecedentRow]:
    """Antecedent score rows for every non-carried pool entry.

    s(x, y) = s_m(x) + s_m(y) + w_c . [g'_x ; g'_y ; g'_x*g'_y ; dist].
    Only current-turn candidates are scored as anaphors, so no
    (carried, carried) pair can ever be produced. Antecedents are the
    ``max_antecedents`` nearest preceding pool entries.
    """
    n = len(pool_addresses)
    pair_x: list[int] = []
    pair_y: list[int] = []
    buckets: list[int] = []
    row_plan: list[tuple[int, list[int], list[int]]] = []
    for p in range(n):
        if carried_flags[p]:
            continue
        ants = list(range(p - 1, max(-1, p - 1 - max_antecedents), -1))
        pair_ids = []
        for y in ants:
            pair_ids.append(len(pair_x))
            pair_x.append(p)
            pair_y.append(y)
            buckets.append(
                distance_bucket(pool_addresses[p][0] - pool_addresses[y][0])
            )
        row_plan.append((p, ants, pair_ids))

    rows: list[AntecedentRow] = []
    if pair_x:
        gx = ad.select_rows(g_ctx, pair_x)
        gy = ad.select_rows(g_ctx, pair_y)
        feats = ad.concat_columns(
            gx, gy, ad.elementwise_multiply(gx, gy),
            ad.select_rows(params["dist_emb"], buckets),
        )
        raw = ad.matmul(feats, params["pair_w"])
        total = ad.add(
            ad.add(raw, ad.select_rows(mention_score_col, pair_x)),
            ad.select_rows(mention_score_col, pair_y),
        )
    for p, ants, pair_ids in row_plan:
        dummy = ad.constant(np.zeros((1, 1)))
        if ants:
            row = ad.concat_columns(
                dummy, ad.transpose(ad.select_rows(total, pair_ids))
            )
        else:
            row = dummy
        rows.append(AntecedentRow(p, ants, row))
    return rows


def speaker_scores(
    g: ad.Node, pairs: list[tuple[int, int]], params: dict[str, ad.Node]
) -> ad.Node:
    """Same-speaker scores for candidate index pairs, one row each.

    s_s(x, y) = w_s . [g_x ; g_y ; g_x*g_y ; g_x - g_y]; a positive score
    claims the two candidates share a speaker.
    """
    gx = ad.select_rows(g, [i for i, _ in pairs])
    gy = ad.select_rows(g, [j for _, j in pairs])
    feats = ad.concat_columns(
        gx, gy, ad.elementwise_multiply(gx, gy), ad.subtract(gx, gy)
    )
    return ad.matmul(feats, params["speaker_w"])


def speaker_score(g_x: ad.Node, g_y: ad.Node, params: dict[str, ad.Node]) -> ad.Node:
    both = ad.concat_rows(g_x, g_y)
    return speaker_scores(both, [(0, 1)], params)


SCORING_BLOCKS = ("width_emb", "span_attn_w", "mention_w", "mention_b",
                  "pair_w", "dist_emb", "speaker_w", "sa_wq", "sa_wk", "sa_wv")


def init_scoring_params(d: int, d_width: int, d_dist: int, max_span_width: int,
                        rng) -> dict[str, np.ndarray]:
    d_g = 3 * d + d_width

    def gauss(rows, cols, scale):
        return rng.normal(0.0, scale, size=(rows, cols))

    return {
        "width_emb": gauss(max_span_width, d_width, 0.5),
        "span_attn_w": gauss(d, 1, 1.0 / np.sqrt(d)),
        "mention_w": gauss(d_g, 1, 1.0 / np.sqrt(d_g)),
        "mention_b": np.zeros((1, 1)),
        "pair_w": gauss(3 * d_g + d_dist, 1, 1.0 / np.sqrt(3 * d_g + d_dist)),
        "dist_emb": gauss(DISTANCE_BUCKETS, d_dist, 0.5),
        "speaker_w": gauss(4 * d_g, 1, 1.0 / np.sqrt(4 * d_g)),
        # near-identity start: sharply self-peaked attention and an identity
        # value map, so switching the attention layer on does not wreck a
        # warm-started pairwise head; training then learns how much to mix
        "sa_wq": 1.5 * np.eye(d_g) + gauss(d_g, d_g, 0.01),
        "sa_wk": 1.5 * np.eye(d_g) + gauss(d_g, d_g, 0.01),
        "sa_wv": np.eye(d_g) + gauss(d_g, d_g, 0.01),
    }
