"""Pure-Python scalar reference implementations (no numpy, no package code).

Used to freeze expected values and to cross-check the vectorized paths.
"""

import math


def matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def softmax(row):
    mx = max(row)
    e = [math.exp(x - mx) for x in row]
    s = sum(e)
    return [x / s for x in e]


def cross_entropy(logits, targets):
    tot = 0.0
    for row, t in zip(logits, targets):
        mx = max(row)
        lse = mx + math.log(sum(math.exp(x - mx) for x in row))
        tot += lse - row[t]
    return tot / len(targets)


def layer_norm(row, gain, bias, eps):
    n = len(row)
    mu = sum(row) / n
    var = sum((x - mu) ** 2 for x in row) / n
    return [(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(row, gain, bias)]


def rms_norm(row, gain, eps):
    rms = math.sqrt(sum(x * x for x in row) / len(row) + eps)
    return [x / rms * g for x, g in zip(row, gain)]


def silu(x):
    return x / (1.0 + math.exp(-x))


def swiglu(x, w1, w3, w2):
    h = len(w1[0])
    a = [sum(x[i] * w1[i][j] for i in range(len(x))) for j in range(h)]
    b = [sum(x[i] * w3[i][j] for i in range(len(x))) for j in range(h)]
    gated = [silu(a[j]) * b[j] for j in range(h)]
    return [sum(gated[j] * w2[j][k] for j in range(h)) for k in range(len(w2[0]))]


def bilinear_resample(grid, out_h, out_w):
    """Aligned-corner bilinear interpolation of a 2-D list of values."""
    in_h, in_w = len(grid), len(grid[0])

    def coord(i, n_in, n_out):
        if n_out == 1 or n_in == 1:
            return 0.0 if n_in == 1 else (n_in - 1) / 2
        return i * (n_in - 1) / (n_out - 1)

    out = []
    for i in range(out_h):
        y = coord(i, in_h, out_h)
        y0 = min(int(math.floor(y)), in_h - 1)
        y1 = min(y0 + 1, in_h - 1)
        fy = y - y0
        row = []
        for j in range(out_w):
            x = coord(j, in_w, out_w)
            x0 = min(int(math.floor(x)), in_w - 1)
            x1 = min(x0 + 1, in_w - 1)
            fx = x - x0
            top = grid[y0][x0] * (1 - fx) + grid[y0][x1] * fx
            bot = grid[y1][x0] * (1 - fx) + grid[y1][x1] * fx
            row.append(top * (1 - fy) + bot * fy)
        out.append(row)
    return out


def attention(x, wq, wk, wv, wo, heads, causal):
    """Multi-head attention on a list of token vectors, no positional rotation, no QK-Norm."""
    T = len(x)
    d = len(x[0])
    dh = d // heads
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    ctx = [[0.0] * d for _ in range(T)]
    for h in range(heads):
        sl = range(h * dh, (h + 1) * dh)
        for t in range(T):
            scores = []
            for s in range(T):
                if causal and s > t:
                    scores.append(-math.inf)
                else:
                    scores.append(sum(q[t][i] * k[s][i] for i in sl) / math.sqrt(dh))
            mx = max(scores)
            e = [math.exp(sc - mx) for sc in scores]
            z = sum(e)
            for i in sl:
                ctx[t][i] = sum(e[s] / z * v[s][i] for s in range(T))
    return matmul(ctx, wo)


def adamw_trajectory(p0, grad_fn, lr, steps, beta1=0.9, beta2=0.95, eps=1e-8, wd=0.0):
    """Scalar decoupled-decay Adam; ``grad_fn(p)`` returns dL/dp."""
    p, m, v = p0, 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(p)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        p = p * (1 - lr * wd)
        p = p - lr * mh / (math.sqrt(vh) + eps)
        out.append(p)
    return out


def dpo(pc, pr, rc, rr, beta):
    z = beta * ((pc - pr) - (rc - rr))
    return math.log1p(math.exp(-z))
