"""Scalar-loop reference implementations, written independently of the package."""

import itertools
import math


def voxels(shape):
    return itertools.product(*[range(s) for s in shape])


def mean_pred(p, qs, idx):
    vals = [q[idx] for q in qs] + [p[idx]]
    s = 0.0
    for v in vals:
        s += float(v)
    return s / len(vals)


def u_m(mu):
    return 0.0 if mu == 0 else -mu * math.log(mu)


def u_s(p, qs, idx):
    mu = mean_pred(p, qs, idx)
    acc = 0.0
    for v in [q[idx] for q in qs] + [p[idx]]:
        acc += (float(v) - mu) ** 2
    return math.sqrt(acc) / (len(qs) + 1)


def l_ic(p, back):
    acc, n = 0.0, 0
    for idx in voxels(p.shape):
        acc += (float(p[idx]) - float(back[idx])) ** 2
        n += 1
    return acc / n


def l_fc(p, qs):
    acc = 0.0
    for q in qs:
        for idx in voxels(p.shape):
            acc += (float(p[idx]) - float(q[idx])) ** 2
    return acc / (len(qs) * p.size)


def l_ufc(p, qs, omega):
    acc, count = 0.0, 0
    for idx in voxels(p.shape):
        if omega[idx]:
            count += 1
            for q in qs:
                acc += (float(p[idx]) - float(q[idx])) ** 2
    return acc / (len(qs) * max(count, 1))


def dice_jaccard(a, b):
    inter = sa = sb = 0
    for idx in voxels(a.shape):
        inter += bool(a[idx]) and bool(b[idx])
        sa += bool(a[idx])
        sb += bool(b[idx])
    union = sa + sb - inter
    dice = 100.0 if sa + sb == 0 else 200.0 * inter / (sa + sb)
    jac = 100.0 if union == 0 else 100.0 * inter / union
    return dice, jac


def surface(mask):
    """Foreground voxels with a 6-neighbour outside the mask (outside the grid counts)."""
    pts = []
    for idx in voxels(mask.shape):
        if not mask[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if not 0 <= n[axis] < mask.shape[axis] or not mask[tuple(n)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return pts


def asd(a, b, spacing=(1.0, 1.0, 1.0)):
    sa, sb = surface(a), surface(b)
    if not sa or not sb:
        return None

    def nearest(src, dst):
        out = []
        for i in src:
            best = math.inf
            for j in dst:
                d = math.sqrt(sum(((i[k] - j[k]) * spacing[k]) ** 2 for k in range(3)))
                best = min(best, d)
            out.append(best)
        return out

    d = nearest(sa, sb) + nearest(sb, sa)
    return sum(d) / len(d)
