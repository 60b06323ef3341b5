"""Scalar pure-Python reference implementations used as test oracles.

These deliberately avoid numpy in the arithmetic so they share no code path
with the package under test.
"""

import math


def matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    return [[math.fsum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def rms_norm(row, gain, eps=1e-6):
    inv = 1.0 / math.sqrt(math.fsum(v * v for v in row) / len(row) + eps)
    return [v * inv * g for v, g in zip(row, gain)]


def rotate(vec, pos, base=10000.0):
    out = list(vec)
    dk = len(vec)
    for i in range(dk // 2):
        ang = pos * base ** (-2.0 * i / dk)
        a, b = vec[2 * i], vec[2 * i + 1]
        out[2 * i] = a * math.cos(ang) - b * math.sin(ang)
        out[2 * i + 1] = a * math.sin(ang) + b * math.cos(ang)
    return out


def causal_softmax_row(scores, i):
    live = scores[: i + 1]
    top = max(live)
    e = [math.exp(s - top) for s in live]
    tot = math.fsum(e)
    return [v / tot for v in e] + [0.0] * (len(scores) - i - 1)


def silu(v):
    return v / (1.0 + math.exp(-v))


def forward(ids, emb, layers, heads, head_dim):
    """Return (hidden rows, maps[layer][head][i][j]) for a tiny decoder.

    ``layers`` is a list of dicts of nested lists: wq, wk, wv, wo, attn_norm,
    ffn_norm, w_in, w_out.  Embedding rows are normalized with layer 0's
    attention gain, which layer 0 then consumes without normalizing again.
    """
    seq = len(ids)
    h = [rms_norm(list(emb[t]), layers[0]["attn_norm"]) for t in ids]
    all_maps = []
    for li, lw in enumerate(layers):
        x = h if li == 0 else [rms_norm(r, lw["attn_norm"]) for r in h]
        q, k, v = matmul(x, lw["wq"]), matmul(x, lw["wk"]), matmul(x, lw["wv"])
        ctx = [[0.0] * (heads * head_dim) for _ in range(seq)]
        maps = []
        for hd in range(heads):
            sl = slice(hd * head_dim, (hd + 1) * head_dim)
            qh = [rotate(q[t][sl], t) for t in range(seq)]
            kh = [rotate(k[t][sl], t) for t in range(seq)]
            amap = []
            for i in range(seq):
                s = [math.fsum(a * b for a, b in zip(qh[i], kh[j])) / math.sqrt(head_dim) for j in range(seq)]
                amap.append(causal_softmax_row(s, i))
            maps.append(amap)
            for i in range(seq):
                for c in range(head_dim):
                    ctx[i][hd * head_dim + c] = math.fsum(amap[i][j] * v[j][hd * head_dim + c] for j in range(seq))
        all_maps.append(maps)
        o = matmul(ctx, lw["wo"])
        h = [[a + b for a, b in zip(hr, orow)] for hr, orow in zip(h, o)]
        f = [rms_norm(r, lw["ffn_norm"]) for r in h]
        act = [[silu(u) for u in row] for row in matmul(f, lw["w_in"])]
        out = matmul(act, lw["w_out"])
        h = [[a + b for a, b in zip(hr, orow)] for hr, orow in zip(h, out)]
    return h, all_maps


def attention_label(m1, m2, alpha, include_length=True):
    """Label for one layer given two nested-list ``[head][i][j]`` maps."""
    heads = len(m1)
    s1, s2 = len(m1[0]), len(m2[0])
    k = min(s1, s2)
    total = 0.0
    for p in range(heads):
        sq = math.fsum((m1[p][i][j] - m2[p][i][j]) ** 2 for i in range(k) for j in range(k))
        total += 0.5 * math.sqrt(sq)
    y = alpha / heads * total
    if include_length:
        y += abs(s1 - s2)
    return y


def js(p, q):
    def kl(a, m):
        return math.fsum(x * math.log(x / y) for x, y in zip(a, m) if x > 0)
    m = [(x + y) / 2 for x, y in zip(p, q)]
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def brute_force_nearest(vectors, ids, q):
    """(id, squared distance) of the nearest vector; ties go to the lower id."""
    best = None
    for rid, v in zip(ids, vectors):
        d = math.fsum((float(a) - float(b)) ** 2 for a, b in zip(v, q))
        if best is None or d < best[1] or (d == best[1] and rid < best[0]):
            best = (rid, d)
    return best


def smooth_l1(delta):
    r = abs(delta)
    return 0.5 * r * r if r < 1 else r - 0.5
