"""Slow, obviously-correct reference implementations used as test oracles."""

import itertools

import numpy as np


def naive_conv2d(x, k, stride=1, pad=0):
    c, h, w = x.shape
    o, c2, kh, kw = k.shape
    assert c == c2
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ic in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ic, i * stride + u, j * stride + v] * k[oc, ic, u, v]
                out[oc, i, j] = acc
    return out


def flood_fill_count(binary):
    """Number of 8-connected foreground components by explicit stack flood fill."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    count = 0
    for y in range(h):
        for x in range(w):
            if binary[y, x] and not seen[y, x]:
                count += 1
                stack = [(y, x)]
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    for dy, dx in itertools.product((-1, 0, 1), repeat=2):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
    return count


def box_iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def brute_force_ap(dets, gts, thr=0.5):
    """dets: list of (score, image, (x,y,w,h)); gts: per-image lists of (x,y,w,h).

    Builds the full PR list by walking detections in score order, then takes
    the area under the monotone (max-to-the-right) precision envelope by
    integrating over every distinct recall level.
    """
    n_gt = sum(len(g) for g in gts)
    order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
    used = [[False] * len(g) for g in gts]
    tp = fp = 0
    points = []
    for i in order:
        _, img, box = dets[i]
        ious = [box_iou(box, g) for g in gts[img]]
        hit = False
        if ious:
            j = int(np.argmax(ious))
            if ious[j] > thr and not used[img][j]:
                used[img][j] = True
                hit = True
        tp += hit
        fp += not hit
        points.append((tp / n_gt, tp / (tp + fp)))
    ap = 0.0
    prev_r = 0.0
    for r in sorted({p[0] for p in points}):
        if r == prev_r:
            continue
        best = max(p for rr, p in points if rr >= r)
        ap += (r - prev_r) * best
        prev_r = r
    return ap


def naive_rmse(a, b):
    total = 0.0
    n = 0
    for u, v in zip(np.ravel(a), np.ravel(b)):
        total += (u - v) ** 2
        n += 1
    return (total / n) ** 0.5


def naive_ssim(a, b, win=7, c1=0.01 ** 2, c2=0.03 ** 2):
    a = a[None] if a.ndim == 2 else a
    b = b[None] if b.ndim == 2 else b
    vals = []
    for ch in range(a.shape[0]):
        for i in range(a.shape[1] - win + 1):
            for j in range(a.shape[2] - win + 1):
                wa = a[ch, i:i + win, j:j + win].ravel()
                wb = b[ch, i:i + win, j:j + win].ravel()
                n = wa.size
                ma, mb = sum(wa) / n, sum(wb) / n
                va = sum((x - ma) ** 2 for x in wa) / n
                vb = sum((x - mb) ** 2 for x in wb) / n
                cov = sum((x - ma) * (y - mb) for x, y in zip(wa, wb)) / n
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)
