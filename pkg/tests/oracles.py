"""Brute-force reference metrics, written loop by loop without sharing code with the package."""

import math


def psnr_ref(a, b, peak=1.0):
    C, H, W = a.shape
    se = 0.0
    for c in range(C):
        for i in range(H):
            for j in range(W):
                se += (float(a[c, i, j]) - float(b[c, i, j])) ** 2
    mse = se / (C * H * W)
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def sam_ref(a, b):
    C, H, W = a.shape
    total, n = 0.0, 0
    for i in range(H):
        for j in range(W):
            dot = na = nb = 0.0
            for c in range(C):
                dot += a[c, i, j] * b[c, i, j]
                na += a[c, i, j] ** 2
                nb += b[c, i, j] ** 2
            if na == 0 or nb == 0:
                continue
            cos = dot / (math.sqrt(na) * math.sqrt(nb))
            total += math.acos(max(-1.0, min(1.0, cos)))
            n += 1
    return total / n if n else 0.0


def ergas_ref(a, b, ratio=4):
    C, H, W = a.shape
    acc = 0.0
    for c in range(C):
        se = mu = 0.0
        for i in range(H):
            for j in range(W):
                se += (a[c, i, j] - b[c, i, j]) ** 2
                mu += b[c, i, j]
        rmse = math.sqrt(se / (H * W))
        acc += (rmse / (mu / (H * W))) ** 2
    return 100.0 / ratio * math.sqrt(acc / C)


def _window(size, sigma):
    half = (size - 1) / 2.0
    g = [math.exp(-((k - half) ** 2) / (2 * sigma * sigma)) for k in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    return [[g[i] * g[j] for j in range(size)] for i in range(size)]


def ssim_ref(a, b, peak=1.0, size=11, sigma=1.5):
    """Mean over channels and all fully-inside window positions."""
    w = _window(size, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    C, H, W = a.shape
    total, n = 0.0, 0
    for c in range(C):
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                mx = my = sxx = syy = sxy = 0.0
                for u in range(size):
                    for v in range(size):
                        x, y, k = a[c, i + u, j + v], b[c, i + u, j + v], w[u][v]
                        mx += k * x
                        my += k * y
                        sxx += k * x * x
                        syy += k * y * y
                        sxy += k * x * y
                vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
                n += 1
    return total / n
