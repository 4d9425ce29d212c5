"""Plain-Python affinity propagation messages, written from the update rules.

Sums over rows run in increasing row order.
"""


def ap_reference(s, damping, n_iter):
    n = len(s)
    r = [[0.0] * n for _ in range(n)]
    a = [[0.0] * n for _ in range(n)]
    keep = 1.0 - damping
    out = []
    for _ in range(n_iter):
        for i in range(n):
            vals = [a[i][k] + s[i][k] for k in range(n)]
            for k in range(n):
                rival = max(vals[j] for j in range(n) if j != k)
                r[i][k] = damping * r[i][k] + keep * (s[i][k] - rival)
        for k in range(n):
            for i in range(n):
                # add the terms in row order, then drop the excluded one
                col = 0.0
                for j in range(n):
                    col += r[j][k] if j == k else max(r[j][k], 0.0)
                if i == k:
                    new = col - r[k][k]
                else:
                    new = min(col - max(r[i][k], 0.0), 0.0)
                a[i][k] = damping * a[i][k] + keep * new
        out.append(([row[:] for row in r], [row[:] for row in a]))
    return out


def availability_direct(r, i, k):
    """Availability target summing only the included terms, for tolerance checks."""
    n = len(r)
    if i == k:
        return sum(max(r[j][k], 0.0) for j in range(n) if j != k)
    return min(r[k][k] + sum(max(r[j][k], 0.0) for j in range(n) if j not in (i, k)), 0.0)
